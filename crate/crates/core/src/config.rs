//! Pipeline configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{SubgroupSpec, DEFAULT_RESAMPLES};
use crate::genclient::simulated::SimulationParams;
use crate::genclient::{GatewayConfig, GenerationConfig};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Chat-completions gateway.
    Live,
    /// Seeded simulated model, for offline runs and tests.
    #[default]
    Stub,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(BackendKind::Live),
            "stub" => Ok(BackendKind::Stub),
            other => Err(Error::Config(format!("unknown backend `{other}` (live, stub)"))),
        }
    }
}

/// Settings frozen into a run's manifest at ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub backend: BackendKind,
    /// `exact`, `normalized-exact`, `scripted:<file>` or `llm`.
    pub judge: String,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub subgroups: Vec<SubgroupSpec>,
    pub max_in_flight: usize,
    pub gateway: GatewayConfig,
    pub simulation: SimulationParams,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            judge: "normalized-exact".into(),
            seed: 0,
            bootstrap_resamples: DEFAULT_RESAMPLES,
            subgroups: SubgroupSpec::ALL.to_vec(),
            max_in_flight: 8,
            gateway: GatewayConfig::default(),
            simulation: SimulationParams::default(),
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be at least 1".into()));
        }
        let judge_ok = matches!(self.judge.as_str(), "exact" | "normalized-exact" | "llm")
            || self.judge.strip_prefix("scripted:").is_some_and(|p| !p.is_empty());
        if !judge_ok {
            return Err(Error::Config(format!(
                "unknown judge `{}` (exact, normalized-exact, scripted:<file>, llm)",
                self.judge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSettings {
    pub bind: String,
    /// Lines of `<token> <reviewer_id>`.
    pub token_file: Option<PathBuf>,
    pub review_size: usize,
    /// Static assets served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ReviewSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token_file: None,
            review_size: 105,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub runs_root: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    pub run_id: Option<String>,
    /// RFC 3339 timestamp recorded in the manifest.
    pub created_at: Option<String>,
    pub generation: GenerationConfig,
    pub run: RunSettings,
    pub review: ReviewSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.run.validate()
    }

    /// Digest of the settings that shape results; paths and naming excluded.
    pub fn digest(&self) -> String {
        config_digest(&self.generation, &self.run)
    }
}

pub fn config_digest(generation: &GenerationConfig, settings: &RunSettings) -> String {
    let canonical = json!({ "generation": generation, "settings": settings });
    sha256_hex(canonical.to_string())
}

/// Stable run id derived from corpus and configuration digests.
pub fn default_run_id(corpus_hash: &str, config_digest: &str) -> String {
    let h = sha256_hex(format!("{corpus_hash}:{config_digest}"));
    format!("run-{}", &h[..12])
}

/// Timestamp for a new manifest: the explicit value, else
/// `SOURCE_DATE_EPOCH`, else the current time.
pub fn resolve_created_at(explicit: Option<&str>) -> Result<String> {
    let ts: DateTime<Utc> = if let Some(s) = explicit {
        DateTime::parse_from_rfc3339(s)
            .map_err(|e| Error::Config(format!("created_at `{s}`: {e}")))?
            .with_timezone(&Utc)
    } else if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("SOURCE_DATE_EPOCH `{epoch}` is not an integer")))?;
        DateTime::from_timestamp(secs, 0).ok_or_else(|| Error::Config("SOURCE_DATE_EPOCH out of range".into()))?
    } else {
        Utc::now()
    };
    Ok(ts.to_rfc3339_opts(SecondsFormat::Secs, true))
}
