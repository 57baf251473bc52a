//! Client for an OpenAI-style `/chat/completions` endpoint with token
//! log-probabilities.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{Completion, CompletionRequest, GenerationBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "SENTROPY_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_base_ms: 500,
        }
    }
}

pub struct HttpGateway {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    config: GatewayConfig,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpGateway {
    /// Builds a gateway, reading the API key from the configured variable.
    /// A missing key is allowed for local endpoints that do not need one.
    pub fn new(config: GatewayConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: GatewayConfig, api_key: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self {
            client,
            endpoint,
            api_key,
            config,
        })
    }

    fn body(request: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": 1,
            "logprobs": request.logprobs,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<Completion, Attempt> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal("response has no choices".into()))?;
        let token_logprobs = choice
            .logprobs
            .and_then(|lp| lp.content)
            .map(|tokens| tokens.into_iter().map(|t| t.logprob).collect());
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs,
        })
    }
}

impl GenerationBackend for HttpGateway {
    fn id(&self) -> &str {
        "live"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let body = Self::body(request);
        let mut delay = Duration::from_millis(self.config.backoff_base_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(msg)) => return Err(Error::Backend(msg)),
                Err(Attempt::Retry(msg)) if attempt >= self.config.max_retries => {
                    return Err(Error::Backend(format!(
                        "{msg} (gave up after {} retries)",
                        self.config.max_retries
                    )))
                }
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt, %msg, "transient gateway failure, retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}
