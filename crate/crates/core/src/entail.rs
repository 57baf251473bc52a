//! Directed and bidirectional entailment between answers to a question.
//!
//! Judges decide one direction at a time. [`Entailer`] adds the reflexive
//! fast path, a verdict cache and call accounting on top of any judge.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genclient::templates::{PromptTemplate, ENTAIL_TEMPLATE_ID};
use crate::genclient::{normalize_label, CompletionRequest, GenerationBackend, Purpose, LABEL_MAX_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directed {
    Entails,
    NotEntails,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub premise: String,
    pub hypothesis: String,
    pub question_context: String,
    pub directed: Directed,
    pub backend_id: String,
}

pub trait EntailmentJudge: Send + Sync {
    fn id(&self) -> &str;

    /// Does `premise` entail `hypothesis`, read as answers to `context`?
    fn judge(&self, premise: &str, hypothesis: &str, context: &str) -> Result<Directed>;
}

/// Rule-based judges for tests and offline runs.
#[derive(Debug, Clone)]
pub enum OracleJudge {
    /// Byte equality.
    Exact,
    /// Equality after trimming and lowercasing.
    NormalizedExact,
    /// Entails exactly for the listed (premise, hypothesis) pairs.
    Scripted {
        id: String,
        pairs: HashSet<(String, String)>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptedLine {
    premise: String,
    hypothesis: String,
    verdict: String,
}

impl OracleJudge {
    /// Parses a rule name: `exact`, `normalized-exact` or `scripted:<file>`.
    pub fn from_rule(rule: &str) -> Result<Self> {
        match rule {
            "exact" => Ok(OracleJudge::Exact),
            "normalized-exact" => Ok(OracleJudge::NormalizedExact),
            other => match other.strip_prefix("scripted:") {
                Some(path) => Self::scripted_file(Path::new(path)),
                None => Err(Error::Config(format!("unknown oracle rule `{rule}`"))),
            },
        }
    }

    pub fn scripted<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        OracleJudge::Scripted {
            id: "scripted".into(),
            pairs: pairs.into_iter().map(|(p, h)| (p.into(), h.into())).collect(),
        }
    }

    /// Judge for an equivalence relation given as `(text, class)` labels:
    /// entails iff both texts carry the same class.
    pub fn from_classes<'a>(labelled: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let labelled: Vec<_> = labelled.into_iter().collect();
        let mut pairs = HashSet::new();
        for (a, ca) in &labelled {
            for (b, cb) in &labelled {
                if ca == cb {
                    pairs.insert((a.to_string(), b.to_string()));
                }
            }
        }
        OracleJudge::Scripted {
            id: "scripted".into(),
            pairs,
        }
    }

    /// Loads `{"premise", "hypothesis", "verdict"}` lines; only
    /// `"entailment"` verdicts are kept, everything else is non-entailing.
    pub fn scripted_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptedLine =
                serde_json::from_str(line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            match parse_nli_label(&rec.verdict) {
                Some(Directed::Entails) => {
                    pairs.insert((rec.premise, rec.hypothesis));
                }
                Some(Directed::NotEntails) => {}
                None => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown verdict {:?}",
                        path.display(),
                        i + 1,
                        rec.verdict
                    )))
                }
            }
        }
        Ok(OracleJudge::Scripted {
            id: format!("scripted:{}", path.display()),
            pairs,
        })
    }
}

impl EntailmentJudge for OracleJudge {
    fn id(&self) -> &str {
        match self {
            OracleJudge::Exact => "exact",
            OracleJudge::NormalizedExact => "normalized-exact",
            OracleJudge::Scripted { id, .. } => id,
        }
    }

    fn judge(&self, premise: &str, hypothesis: &str, _context: &str) -> Result<Directed> {
        let entails = match self {
            OracleJudge::Exact => premise == hypothesis,
            OracleJudge::NormalizedExact => premise.trim().to_lowercase() == hypothesis.trim().to_lowercase(),
            OracleJudge::Scripted { pairs, .. } => pairs.contains(&(premise.to_string(), hypothesis.to_string())),
        };
        Ok(if entails {
            Directed::Entails
        } else {
            Directed::NotEntails
        })
    }
}

/// Maps an NLI label to a verdict; only `entailment` entails.
pub fn parse_nli_label(reply: &str) -> Option<Directed> {
    match normalize_label(reply).as_str() {
        "entailment" => Some(Directed::Entails),
        "neutral" | "contradiction" => Some(Directed::NotEntails),
        _ => None,
    }
}

/// Entailment judged by a chat model, with the question in the prompt.
pub struct LlmJudge<B> {
    backend: B,
    model_id: String,
    temperature: f64,
    template: PromptTemplate,
    id: String,
}

impl<B: GenerationBackend> LlmJudge<B> {
    pub fn new(backend: B, model_id: impl Into<String>, temperature: f64) -> Result<Self> {
        let model_id = model_id.into();
        let id = format!("llm:{}:{}", backend.id(), model_id);
        Ok(Self {
            backend,
            model_id,
            temperature,
            template: PromptTemplate::builtin(ENTAIL_TEMPLATE_ID)?,
            id,
        })
    }
}

impl<B: GenerationBackend> EntailmentJudge for LlmJudge<B> {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, premise: &str, hypothesis: &str, context: &str) -> Result<Directed> {
        let vars = [("question", context), ("premise", premise), ("hypothesis", hypothesis)];
        let mut last = String::new();
        for reprompt in [false, true] {
            let request = CompletionRequest {
                model: self.model_id.clone(),
                messages: self.template.render(&vars, reprompt),
                temperature: self.temperature,
                max_tokens: LABEL_MAX_TOKENS,
                sample_index: 0,
                logprobs: false,
                purpose: Purpose::Entail,
            };
            let reply = self.backend.complete(&request)?.text;
            if let Some(verdict) = parse_nli_label(&reply) {
                return Ok(verdict);
            }
            last = reply;
        }
        Err(Error::UnparseableReply(last))
    }
}

type VerdictKey = (String, String, String);

/// Caching front end over a judge.
pub struct Entailer {
    judge: Arc<dyn EntailmentJudge>,
    cache: Mutex<HashMap<VerdictKey, Directed>>,
    judge_calls: AtomicUsize,
}

impl Entailer {
    pub fn new(judge: Arc<dyn EntailmentJudge>) -> Self {
        Self {
            judge,
            cache: Mutex::new(HashMap::new()),
            judge_calls: AtomicUsize::new(0),
        }
    }

    pub fn oracle(judge: OracleJudge) -> Self {
        Self::new(Arc::new(judge))
    }

    pub fn backend_id(&self) -> &str {
        self.judge.id()
    }

    /// Number of directed questions that reached the judge (cache misses,
    /// excluding the reflexive fast path).
    pub fn judge_calls(&self) -> usize {
        self.judge_calls.load(Ordering::SeqCst)
    }

    pub fn entails(&self, premise: &str, hypothesis: &str, context: &str) -> Result<EntailmentVerdict> {
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Invalid(
                "entailment needs non-empty premise and hypothesis".into(),
            ));
        }
        let verdict = |directed| EntailmentVerdict {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            question_context: context.to_string(),
            directed,
            backend_id: self.judge.id().to_string(),
        };
        if premise == hypothesis {
            return Ok(verdict(Directed::Entails));
        }
        let key = (context.to_string(), premise.to_string(), hypothesis.to_string());
        if let Some(&hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(verdict(hit));
        }
        self.judge_calls.fetch_add(1, Ordering::SeqCst);
        let directed = self.judge.judge(premise, hypothesis, context)?;
        self.cache.lock().unwrap().insert(key, directed);
        Ok(verdict(directed))
    }

    /// Both directed verdicts, `a → b` first. Always makes both queries.
    pub fn bidirectional_verdicts(&self, a: &str, b: &str, context: &str) -> Result<[EntailmentVerdict; 2]> {
        let forward = self.entails(a, b, context)?;
        let backward = self.entails(b, a, context)?;
        Ok([forward, backward])
    }

    pub fn bidirectional(&self, a: &str, b: &str, context: &str) -> Result<bool> {
        let [f, r] = self.bidirectional_verdicts(a, b, context)?;
        Ok(f.directed == Directed::Entails && r.directed == Directed::Entails)
    }
}
