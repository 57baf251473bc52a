//! Sampling answers from a generation backend.
//!
//! A backend is anything implementing [`GenerationBackend`]: the live
//! chat-completions [`HttpGateway`], the scripted [`StubBackend`], or the
//! seeded [`SimulatedBackend`]. Wrap any of them in [`CachedBackend`] to make
//! reruns free and bit-identical.

mod backend;
mod cache;
mod gateway;
pub mod simulated;
mod stub;
pub mod templates;

pub use backend::{ChatMessage, Completion, CompletionRequest, GenerationBackend, Purpose, Role};
pub use cache::CachedBackend;
pub use gateway::{GatewayConfig, HttpGateway};
pub use simulated::SimulatedBackend;
pub use stub::StubBackend;
pub use templates::PromptTemplate;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, Question};
use crate::error::{Error, Result};

/// Token budget for single-word judge and classifier replies.
pub const LABEL_MAX_TOKENS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LogprobMode {
    /// Token log-probabilities are required; missing ones are an error.
    #[default]
    Required,
    /// Run without log-probabilities; only discrete SE is available.
    DiscreteOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub model_id: String,
    pub num_samples: usize,
    pub answer_temperature: f64,
    pub entailment_temperature: f64,
    pub max_answer_tokens: u32,
    pub prompt_template_id: String,
    /// Permits a non-zero entailment temperature (logged as a warning).
    pub allow_nonzero_entailment_temperature: bool,
    pub logprob_mode: LogprobMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o-2024-08-06".into(),
            num_samples: 10,
            answer_temperature: 1.0,
            entailment_temperature: 0.0,
            max_answer_tokens: 128,
            prompt_template_id: "answer-v1".into(),
            allow_nonzero_entailment_temperature: false,
            logprob_mode: LogprobMode::Required,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::Config(format!(
                "num_samples must be at least 2, got {}",
                self.num_samples
            )));
        }
        for (name, t) in [
            ("answer_temperature", self.answer_temperature),
            ("entailment_temperature", self.entailment_temperature),
        ] {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {t}")));
            }
        }
        if self.entailment_temperature != 0.0 {
            if !self.allow_nonzero_entailment_temperature {
                return Err(Error::Config(format!(
                    "entailment_temperature must be 0.0 (got {}); set \
                     allow_nonzero_entailment_temperature to override",
                    self.entailment_temperature
                )));
            }
            tracing::warn!(
                temperature = self.entailment_temperature,
                "entailment judge is running at a non-zero temperature"
            );
        }
        if self.max_answer_tokens == 0 {
            return Err(Error::Config("max_answer_tokens must be positive".into()));
        }
        PromptTemplate::builtin(&self.prompt_template_id)?;
        Ok(())
    }
}

/// One sampled answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub question_id: String,
    pub sample_index: usize,
    pub text: String,
    /// Natural-log token probabilities, one per emitted token.
    pub token_logprobs: Vec<f64>,
    pub temperature: f64,
}

impl Generation {
    pub fn has_logprobs(&self) -> bool {
        !self.token_logprobs.is_empty()
    }
}

/// Length-normalized log-likelihood: the mean token log-probability.
pub fn sequence_loglik(gen: &Generation) -> Result<f64> {
    mean_logprob(&gen.token_logprobs).ok_or_else(|| {
        Error::Invalid(format!(
            "generation {}#{} has no token log-probabilities",
            gen.question_id, gen.sample_index
        ))
    })
}

pub(crate) fn mean_logprob(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() {
        None
    } else {
        Some(logprobs.iter().sum::<f64>() / logprobs.len() as f64)
    }
}

/// Draws `config.num_samples` independent answers for one question.
///
/// Samples are requested in parallel on the current rayon pool; callers
/// bound in-flight requests by installing a sized pool.
pub fn generate_answers(
    question: &Question,
    config: &GenerationConfig,
    backend: &dyn GenerationBackend,
) -> Result<Vec<Generation>> {
    if !question.is_eligible() {
        return Err(Error::Invalid(format!(
            "question `{}` is excluded and cannot be sampled",
            question.id
        )));
    }
    let template = PromptTemplate::builtin(&config.prompt_template_id)?;
    let messages = template.render(&[("question", question.text.as_str())], false);
    let want_logprobs = config.logprob_mode == LogprobMode::Required;

    (0..config.num_samples)
        .into_par_iter()
        .map(|sample_index| {
            let request = CompletionRequest {
                model: config.model_id.clone(),
                messages: messages.clone(),
                temperature: config.answer_temperature,
                max_tokens: config.max_answer_tokens,
                sample_index,
                logprobs: want_logprobs,
                purpose: Purpose::Answer {
                    question_id: question.id.clone(),
                },
            };
            let completion = backend.complete(&request).map_err(|e| Error::Generation {
                question_id: question.id.clone(),
                sample_index,
                message: e.to_string(),
            })?;
            let token_logprobs = if want_logprobs {
                checked_logprobs(question, sample_index, &completion)?
            } else {
                Vec::new()
            };
            Ok(Generation {
                question_id: question.id.clone(),
                sample_index,
                text: completion.text,
                token_logprobs,
                temperature: config.answer_temperature,
            })
        })
        .collect()
}

fn checked_logprobs(question: &Question, sample_index: usize, completion: &Completion) -> Result<Vec<f64>> {
    let logprobs = match &completion.token_logprobs {
        Some(lp) => lp.clone(),
        None => return Err(Error::LogprobsUnavailable(question.id.clone())),
    };
    if logprobs.is_empty() && !completion.text.trim().is_empty() {
        return Err(Error::LogprobsUnavailable(question.id.clone()));
    }
    if let Some(bad) = logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
        return Err(Error::Generation {
            question_id: question.id.clone(),
            sample_index,
            message: format!("invalid token log-probability {bad}"),
        });
    }
    Ok(logprobs)
}

/// Labels a question as knowledge retrieval or clinical reasoning with a
/// deterministic (temperature 0) single-word reply, reprompting once.
pub fn classify_question(question: &Question, model_id: &str, backend: &dyn GenerationBackend) -> Result<Category> {
    if !question.is_eligible() {
        return Err(Error::Invalid(format!(
            "question `{}` is excluded and cannot be classified",
            question.id
        )));
    }
    let template = PromptTemplate::builtin(templates::CLASSIFY_TEMPLATE_ID)?;
    let mut last_reply = String::new();
    for reprompt in [false, true] {
        let request = CompletionRequest {
            model: model_id.to_string(),
            messages: template.render(&[("question", question.text.as_str())], reprompt),
            temperature: 0.0,
            max_tokens: LABEL_MAX_TOKENS,
            sample_index: 0,
            logprobs: false,
            purpose: Purpose::Classify {
                question_id: question.id.clone(),
            },
        };
        let reply = backend.complete(&request)?.text;
        match normalize_label(&reply).as_str() {
            "knowledge" => return Ok(Category::Knowledge),
            "reasoning" => return Ok(Category::Reasoning),
            _ => last_reply = reply,
        }
    }
    Err(Error::UnparseableReply(last_reply))
}

/// Lowercases a one-word reply and strips surrounding whitespace, quotes and
/// trailing punctuation.
pub(crate) fn normalize_label(reply: &str) -> String {
    reply
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .trim_end_matches(['.', '!', ','])
        .trim()
        .to_lowercase()
}
