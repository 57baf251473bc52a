//! Semantic-entropy uncertainty estimation for short clinical answers.
//!
//! The pipeline samples several answers per question ([`genclient`]),
//! groups them by bidirectional entailment ([`cluster`]), measures
//! uncertainty ([`metrics`]), decides correctness of the selected answer
//! ([`scoring`]) and reports accuracy and AUROC ([`eval`]). Every stage is
//! persisted in a run directory ([`run`]) and driven by [`pipeline`].

pub mod cluster;
pub mod config;
pub mod dataset;
pub mod entail;
pub mod error;
pub mod eval;
pub mod genclient;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod scoring;
pub mod util;

pub use cluster::Clustering;
pub use config::{BackendKind, PipelineConfig, ReviewSettings, RunSettings};
pub use dataset::{Category, Exclusion, Part, Question};
pub use entail::{Entailer, OracleJudge};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalReport, Metric};
pub use genclient::{Generation, GenerationBackend, GenerationConfig};
pub use metrics::UncertaintyScore;
pub use run::{RunDir, Stage};
pub use scoring::{CorrectnessRecord, Definition, Method};
