use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::backend::{Completion, CompletionRequest, GenerationBackend, Purpose};
use crate::error::Result;

/// Scripted backend for tests.
///
/// Answer requests get `answers[sample_index % len]`, so results do not
/// depend on the order in which parallel requests arrive. Classification and
/// entailment requests consume `label_replies` in order; the last reply
/// repeats once the queue is drained.
#[derive(Debug)]
pub struct StubBackend {
    answers: Vec<String>,
    logprobs: Option<Vec<Vec<f64>>>,
    emit_logprobs: bool,
    label_replies: Mutex<VecDeque<String>>,
    last_label: Mutex<String>,
    calls: AtomicUsize,
}

impl StubBackend {
    pub fn with_answers<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        assert!(!answers.is_empty(), "StubBackend needs at least one answer");
        Self {
            answers,
            logprobs: None,
            emit_logprobs: true,
            label_replies: Mutex::new(VecDeque::new()),
            last_label: Mutex::new("knowledge".into()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Explicit token log-probabilities, indexed like the answers.
    pub fn with_logprobs(mut self, logprobs: Vec<Vec<f64>>) -> Self {
        assert_eq!(logprobs.len(), self.answers.len());
        self.logprobs = Some(logprobs);
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.emit_logprobs = false;
        self
    }

    pub fn with_label_reply(self, reply: impl Into<String>) -> Self {
        self.with_label_replies([reply])
    }

    pub fn with_label_replies<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        {
            let mut queue = self.label_replies.lock().unwrap();
            queue.clear();
            queue.extend(replies.into_iter().map(Into::into));
        }
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn next_label(&self) -> String {
        let mut queue = self.label_replies.lock().unwrap();
        let mut last = self.last_label.lock().unwrap();
        if let Some(reply) = queue.pop_front() {
            *last = reply;
        }
        last.clone()
    }
}

impl GenerationBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match request.purpose {
            Purpose::Answer { .. } => {
                let idx = request.sample_index % self.answers.len();
                let text = self.answers[idx].clone();
                let token_logprobs = self.emit_logprobs.then(|| match &self.logprobs {
                    Some(lps) => lps[idx].clone(),
                    None => vec![-0.1; text.split_whitespace().count().max(1)],
                });
                Ok(Completion { text, token_logprobs })
            }
            Purpose::Classify { .. } | Purpose::Entail => Ok(Completion {
                text: self.next_label(),
                token_logprobs: None,
            }),
        }
    }
}
