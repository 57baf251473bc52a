//! Run directories: manifest, corpus snapshot and one JSONL file per stage.
//!
//! Layout:
//!
//! ```text
//! <runs_root>/<run_id>/
//!   manifest.json
//!   questions.jsonl        corpus snapshot; its digest is the run's corpus_hash
//!   generate.jsonl         header line, then one record per line
//!   cluster.jsonl
//!   metrics.jsonl
//!   score.jsonl
//!   evaluate.jsonl
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::ErrorKind as IoErrorKind;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunSettings;
use crate::dataset::{corpus_to_string, parse_corpus, Question};
use crate::error::{Error, Result};
use crate::genclient::GenerationConfig;
use crate::util::{atomic_write, sha256_hex};

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Cluster,
    Metrics,
    Score,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generate,
        Stage::Cluster,
        Stage::Metrics,
        Stage::Score,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Cluster => "cluster",
            Stage::Metrics => "metrics",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    pub fn predecessors(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    /// SHA-256 of `questions.jsonl`.
    pub corpus_hash: String,
    /// SHA-256 of the effective configuration, paths excluded.
    pub config_digest: String,
    pub generation_config: GenerationConfig,
    pub settings: RunSettings,
    pub created_at: String,
    pub stage_status: BTreeMap<Stage, StageStatus>,
}

impl RunManifest {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status.get(&stage).copied().unwrap_or(StageStatus::Pending)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.status(stage) == StageStatus::Complete
    }

    /// First incomplete predecessor of `stage`, if any.
    pub fn missing_predecessor(&self, stage: Stage) -> Option<Stage> {
        stage.predecessors().iter().copied().find(|&s| !self.is_complete(s))
    }
}

/// Header line of every stage file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHeader {
    pub stage: Stage,
    pub run_id: String,
    pub corpus_hash: String,
    pub records: usize,
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_path: &Path) -> Result<Self> {
        let path = run_path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == IoErrorKind::AlreadyExists => Err(Error::Locked(run_path.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
    questions: Vec<Question>,
    _lock: Option<RunLock>,
}

impl RunDir {
    /// Creates the run directory with its manifest and corpus snapshot. The
    /// manifest's `corpus_hash` is overwritten with the snapshot digest.
    pub fn create(path: &Path, mut manifest: RunManifest, questions: &[Question]) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = RunLock::acquire(path)?;
        let snapshot = corpus_to_string(questions);
        manifest.corpus_hash = sha256_hex(snapshot.as_bytes());
        manifest.stage_status = Stage::ALL.iter().map(|&s| (s, StageStatus::Pending)).collect();
        atomic_write(&path.join(QUESTIONS_FILE), snapshot.as_bytes())?;
        let run = Self {
            path: path.to_path_buf(),
            manifest,
            questions: questions.to_vec(),
            _lock: Some(lock),
        };
        run.save_manifest()?;
        Ok(run)
    }

    /// Opens an existing run read-only, verifying the corpus snapshot.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::StageFile {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        if manifest.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::StageFile {
                path: manifest_path,
                message: format!("unsupported schema version {}", manifest.schema_version),
            });
        }
        let qpath = path.join(QUESTIONS_FILE);
        let snapshot = std::fs::read_to_string(&qpath).map_err(|e| Error::io(&qpath, e))?;
        let found = sha256_hex(snapshot.as_bytes());
        if found != manifest.corpus_hash {
            return Err(Error::CorpusMismatch {
                expected: manifest.corpus_hash,
                found,
            });
        }
        let questions = parse_corpus(&qpath, &snapshot)?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
            questions,
            _lock: None,
        })
    }

    /// Opens a run and takes its lock for the lifetime of the handle.
    pub fn open_locked(path: &Path) -> Result<Self> {
        if !path.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!(
                "no run at {} (run `sentropy ingest` first)",
                path.display()
            )));
        }
        let lock = RunLock::acquire(path)?;
        let mut run = Self::open(path)?;
        run._lock = Some(lock);
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// The full corpus snapshot, excluded questions included.
    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn eligible(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.is_eligible())
    }

    fn save_manifest(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        atomic_write(&self.path.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Errors unless every predecessor of `stage` is complete.
    pub fn check_ready(&self, stage: Stage) -> Result<()> {
        match self.manifest.missing_predecessor(stage) {
            Some(missing) => Err(Error::StageOrder {
                stage: stage.name().into(),
                missing: missing.name().into(),
            }),
            None => Ok(()),
        }
    }

    /// Errors unless `stage` itself is complete; `user` names the consumer.
    pub fn require(&self, stage: Stage, user: &str) -> Result<()> {
        if self.manifest.is_complete(stage) {
            Ok(())
        } else {
            Err(Error::StageOrder {
                stage: user.into(),
                missing: stage.name().into(),
            })
        }
    }

    /// Writes a stage file atomically and marks the stage complete. Later
    /// stages go back to pending when an overwrite replaces this one.
    pub fn persist_stage<T: Serialize>(&mut self, stage: Stage, records: &[T], overwrite: bool) -> Result<()> {
        self.check_ready(stage)?;
        if self.manifest.is_complete(stage) && !overwrite {
            return Err(Error::StageComplete(stage.name().into()));
        }
        let header = StageHeader {
            stage,
            run_id: self.manifest.run_id.clone(),
            corpus_hash: self.manifest.corpus_hash.clone(),
            records: records.len(),
        };
        let mut text = serde_json::to_string(&header).expect("header serializes");
        text.push('\n');
        for r in records {
            let line =
                serde_json::to_string(r).map_err(|e| Error::Invalid(format!("serializing {stage} record: {e}")))?;
            text.push_str(&line);
            text.push('\n');
        }
        atomic_write(&self.path.join(stage.file_name()), text.as_bytes())?;
        for s in Stage::ALL {
            if s == stage {
                self.manifest.stage_status.insert(s, StageStatus::Complete);
            } else if s > stage {
                self.manifest.stage_status.insert(s, StageStatus::Pending);
            }
        }
        self.save_manifest()
    }

    /// Reads a complete stage, checking its header against the manifest.
    pub fn read_stage<T: DeserializeOwned>(&self, stage: Stage) -> Result<Vec<T>> {
        self.require(stage, "read")?;
        let path = self.path.join(stage.file_name());
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |message: String| Error::StageFile {
            path: path.clone(),
            message,
        };
        let mut lines = text.lines();
        let header: StageHeader = serde_json::from_str(lines.next().ok_or_else(|| bad("empty file".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.stage != stage {
            return Err(bad(format!("header names stage `{}`", header.stage)));
        }
        if header.corpus_hash != self.manifest.corpus_hash {
            return Err(Error::CorpusMismatch {
                expected: self.manifest.corpus_hash.clone(),
                found: header.corpus_hash,
            });
        }
        let records: Vec<T> = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("line {}: {e}", i + 2))))
            .collect::<Result<_>>()?;
        if records.len() != header.records {
            return Err(bad(format!(
                "header promises {} records, found {}",
                header.records,
                records.len()
            )));
        }
        Ok(records)
    }

    /// Writes an auxiliary file (digest, ROC points, report) inside the run.
    pub fn write_aux(&self, relative: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.path.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        atomic_write(&path, contents)?;
        Ok(path)
    }

    pub fn read_aux(&self, relative: &str) -> Result<Option<String>> {
        let path = self.path.join(relative);
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == IoErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Appends one JSON line to a file, creating it when absent.
pub fn append_json_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    use std::io::Write;
    let mut line = serde_json::to_string(record).map_err(|e| Error::Invalid(e.to_string()))?;
    line.push('\n');
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}
