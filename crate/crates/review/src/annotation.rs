//! Expert annotations, their validation and the append-only store.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use sentropy_core::run::append_json_line;

use crate::bundle::ReviewBundle;
use crate::error::{FieldError, Result, ReviewError};

pub const ANNOTATIONS_FILE: &str = "review/annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionQuality {
    Acceptable,
    Flawed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterJudgment {
    pub consistent_meaning: bool,
    pub distinct_from_others: bool,
    pub equals_true_answer: bool,
}

/// Request body of a submission; the reviewer comes from the token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    pub question_id: String,
    pub question_quality: QuestionQuality,
    #[serde(default)]
    pub quality_note: String,
    pub lp_same_as_true: bool,
    pub lp_correct_but_different: bool,
    /// One judgment per cluster, in bundle order.
    pub clusters: Vec<ClusterJudgment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub question_id: String,
    pub reviewer_id: String,
    pub question_quality: QuestionQuality,
    #[serde(default)]
    pub quality_note: String,
    pub lp_same_as_true: bool,
    pub lp_correct_but_different: bool,
    pub clusters: Vec<ClusterJudgment>,
    pub submitted_at: String,
}

impl Annotation {
    pub fn from_submission(s: AnnotationSubmission, reviewer_id: &str, submitted_at: String) -> Self {
        Self {
            question_id: s.question_id,
            reviewer_id: reviewer_id.to_string(),
            question_quality: s.question_quality,
            quality_note: s.quality_note,
            lp_same_as_true: s.lp_same_as_true,
            lp_correct_but_different: s.lp_correct_but_different,
            clusters: s.clusters,
            submitted_at,
        }
    }

    /// Lowest-perplexity answer judged correct, verbatim or otherwise.
    pub fn lp_correct(&self) -> bool {
        self.lp_same_as_true || self.lp_correct_but_different
    }

    /// Every cluster has one meaning, distinct from the others.
    pub fn clustering_success(&self) -> bool {
        self.clusters
            .iter()
            .all(|c| c.consistent_meaning && c.distinct_from_others)
    }
}

/// Checks a submission against the bundle it annotates.
pub fn validate(s: &AnnotationSubmission, bundle: &ReviewBundle) -> Result<()> {
    let mut errors = Vec::new();
    if s.lp_same_as_true && s.lp_correct_but_different {
        errors.push(FieldError::new(
            "lp_correct_but_different",
            "cannot be true together with lp_same_as_true",
        ));
    }
    if s.clusters.len() != bundle.cluster_count {
        errors.push(FieldError::new(
            "clusters",
            format!(
                "expected {} cluster judgments, got {}",
                bundle.cluster_count,
                s.clusters.len()
            ),
        ));
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(ReviewError::Validation(errors))
    }
}

/// Append-only annotation log with a latest-per-reviewer view.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    log: Mutex<Vec<Annotation>>,
}

impl AnnotationStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut log = Vec::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let a: Annotation = serde_json::from_str(line).map_err(|e| sentropy_core::Error::StageFile {
                        path: path.clone(),
                        message: format!("line {}: {e}", i + 1),
                    })?;
                    log.push(a);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(sentropy_core::Error::io(&path, e).into()),
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| sentropy_core::Error::io(parent, e))?;
        }
        Ok(Self {
            path,
            log: Mutex::new(log),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends and returns the revision number for this (question, reviewer).
    /// Writes are serialized, so the log order is the acceptance order.
    pub fn append(&self, annotation: Annotation) -> Result<usize> {
        let mut log = self.log.lock().expect("store lock");
        append_json_line(&self.path, &annotation)?;
        let revision = 1 + log
            .iter()
            .filter(|a| a.question_id == annotation.question_id && a.reviewer_id == annotation.reviewer_id)
            .count();
        log.push(annotation);
        Ok(revision)
    }

    /// Every accepted submission, oldest first.
    pub fn history(&self) -> Vec<Annotation> {
        self.log.lock().expect("store lock").clone()
    }

    /// Latest annotation per (question_id, reviewer_id).
    pub fn current(&self) -> Vec<Annotation> {
        current_view(&self.history())
    }
}

pub fn current_view(log: &[Annotation]) -> Vec<Annotation> {
    let mut latest: BTreeMap<(String, String), Annotation> = BTreeMap::new();
    for a in log {
        latest.insert((a.question_id.clone(), a.reviewer_id.clone()), a.clone());
    }
    latest.into_values().collect()
}

/// Reads `<token> <reviewer_id>` lines; `#` starts a comment.
pub fn load_tokens(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| sentropy_core::Error::io(path, e))?;
    parse_tokens(&text).map_err(|m| ReviewError::Config(format!("{}: {m}", path.display())))
}

pub fn parse_tokens(text: &str) -> std::result::Result<HashMap<String, String>, String> {
    let mut tokens = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(token), Some(reviewer), None) => {
                if tokens.insert(token.to_string(), reviewer.to_string()).is_some() {
                    return Err(format!("line {}: duplicate token", i + 1));
                }
            }
            _ => return Err(format!("line {}: expected `<token> <reviewer_id>`", i + 1)),
        }
    }
    if tokens.is_empty() {
        return Err("no reviewer tokens".into());
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{ClusterView, MemberView};

    fn bundle(k: usize) -> ReviewBundle {
        ReviewBundle {
            question_id: "q1".into(),
            question: "Q?".into(),
            reference_answer: "A".into(),
            lowest_perplexity_answer: Some("A".into()),
            clusters: (0..k)
                .map(|i| ClusterView {
                    members: vec![MemberView {
                        sample_index: i,
                        text: format!("t{i}"),
                        perplexity: Some(1.0),
                    }],
                })
                .collect(),
            cluster_count: k,
        }
    }

    fn submission(k: usize) -> AnnotationSubmission {
        AnnotationSubmission {
            question_id: "q1".into(),
            question_quality: QuestionQuality::Acceptable,
            quality_note: String::new(),
            lp_same_as_true: true,
            lp_correct_but_different: false,
            clusters: vec![
                ClusterJudgment {
                    consistent_meaning: true,
                    distinct_from_others: true,
                    equals_true_answer: false,
                };
                k
            ],
        }
    }

    #[test]
    fn validation_lists_fields() {
        validate(&submission(2), &bundle(2)).unwrap();
        let mut s = submission(1);
        s.lp_correct_but_different = true;
        match validate(&s, &bundle(2)).unwrap_err() {
            ReviewError::Validation(fields) => {
                let names: Vec<_> = fields.iter().map(|f| f.field.as_str()).collect();
                assert_eq!(names, ["lp_correct_but_different", "clusters"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn store_keeps_history_and_latest_view() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review/annotations.jsonl");
        let store = AnnotationStore::open(&path).unwrap();
        let a = |reviewer: &str, t: &str, same: bool| {
            let mut s = submission(1);
            s.lp_same_as_true = same;
            Annotation::from_submission(s, reviewer, t.into())
        };
        assert_eq!(store.append(a("r1", "t1", true)).unwrap(), 1);
        assert_eq!(store.append(a("r2", "t2", true)).unwrap(), 1);
        assert_eq!(store.append(a("r1", "t3", false)).unwrap(), 2);
        assert_eq!(store.history().len(), 3);
        let current = store.current();
        assert_eq!(current.len(), 2);
        assert!(!current.iter().find(|x| x.reviewer_id == "r1").unwrap().lp_same_as_true);

        let reopened = AnnotationStore::open(&path).unwrap();
        assert_eq!(reopened.history(), store.history());
    }

    #[test]
    fn token_file_parsing() {
        let t = parse_tokens("# reviewers\nabc alice\n\ndef bob  # second\n").unwrap();
        assert_eq!(t["abc"], "alice");
        assert_eq!(t["def"], "bob");
        assert!(parse_tokens("abc").is_err());
        assert!(parse_tokens("a x\na y").is_err());
        assert!(parse_tokens("# none").is_err());
    }
}
