//! Expert review of clustered answers: bundles for reviewers, an
//! append-only annotation log, expert-scored metrics and the HTTP service.

pub mod annotation;
pub mod bundle;
pub mod error;
pub mod expert;
pub mod server;

pub use annotation::{Annotation, AnnotationStore, AnnotationSubmission, ClusterJudgment, QuestionQuality};
pub use bundle::{build_bundles, load_or_create_review_set, ReviewBundle, ReviewSet};
pub use error::{FieldError, Result, ReviewError};
pub use expert::{expert_metrics, expert_table, ExpertCell, ExpertInput, ExpertReport};
pub use server::{router, serve, AppState};
