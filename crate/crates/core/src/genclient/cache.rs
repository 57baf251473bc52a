use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::backend::{ChatMessage, Completion, CompletionRequest, GenerationBackend};
use crate::error::Result;
use crate::util::{atomic_write, sha256_hex};

#[derive(Serialize)]
struct CacheKey<'a> {
    backend: &'a str,
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    sample_index: usize,
    max_tokens: u32,
    logprobs: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    completion: Completion,
}

/// Content-addressed on-disk cache in front of another backend.
///
/// Entries live at `<root>/<kk>/<key>.json` where `key` is the SHA-256 of the
/// canonical JSON request. Writes go through a temp file and rename, so
/// concurrent readers and writers only ever see complete entries.
pub struct CachedBackend<B> {
    inner: B,
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: GenerationBackend> CachedBackend<B> {
    pub fn new(inner: B, root: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            root: root.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn key(&self, request: &CompletionRequest) -> String {
        let key = CacheKey {
            backend: self.inner.id(),
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            sample_index: request.sample_index,
            max_tokens: request.max_tokens,
            logprobs: request.logprobs,
        };
        sha256_hex(serde_json::to_vec(&key).expect("cache key serializes"))
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read_entry(path: &Path, key: &str) -> Option<Completion> {
        let bytes = std::fs::read(path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.completion),
            _ => {
                tracing::warn!(path = %path.display(), "ignoring unreadable cache entry");
                None
            }
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let key = self.key(request);
        let path = self.entry_path(&key);
        if let Some(hit) = Self::read_entry(&path, &key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let completion = self.inner.complete(request)?;
        let entry = CacheEntry {
            key,
            completion: completion.clone(),
        };
        atomic_write(&path, &serde_json::to_vec(&entry).expect("cache entry serializes"))?;
        Ok(completion)
    }
}
