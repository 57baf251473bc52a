use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// What a request is for. Never sent over the wire; lets simulated backends
/// answer structurally instead of parsing prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Purpose {
    Answer { question_id: String },
    Classify { question_id: String },
    Entail,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub sample_index: usize,
    pub logprobs: bool,
    pub purpose: Purpose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Natural-log probabilities of the emitted tokens, when the backend
    /// exposes them.
    pub token_logprobs: Option<Vec<f64>>,
}

/// A source of model completions.
///
/// Implementations must be deterministic per request when used for
/// reproducible runs; the live gateway is not, and relies on the cache.
pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}
