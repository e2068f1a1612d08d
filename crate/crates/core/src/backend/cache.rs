//! Content-addressed completion cache.
//!
//! Keys are SHA-256 over the canonical serialization of (backend id, model
//! id, request); entries live one file per key under
//! `{dir}/{first-2-hex}/{hash}.json` and are written atomically
//! (temp file + rename). Corrupt entries are ignored, recomputed, and
//! rewritten.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChatRequest, Completion, TokenUsage};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: ChatRequest,
    completion: Completion,
    created: u64,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    model: &'a str,
    request: &'a ChatRequest,
}

pub struct CachedBackend {
    inner: Box<dyn Backend>,
    dir: PathBuf,
    hits: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Box<dyn Backend>, dir: impl Into<PathBuf>) -> Self {
        CachedBackend {
            inner,
            dir: dir.into(),
            hits: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    fn key(&self, request: &ChatRequest) -> String {
        let material = KeyMaterial {
            backend: self.inner.id(),
            model: self.inner.model(),
            request,
        };
        let canonical = crate::json::canonical_string(&material).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read_entry(path: &Path) -> Option<Completion> {
        let text = std::fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(entry.completion)
    }

    fn write_entry(&self, path: &Path, request: &ChatRequest, completion: &Completion) {
        let entry = CacheEntry {
            request: request.clone(),
            completion: completion.clone(),
            created: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        // Cache writes are best-effort: a failed write only costs a recompute.
        if let Some(parent) = path.parent() {
            if std::fs::create_dir_all(parent).is_err() {
                return;
            }
            if let Ok(json) = crate::json::canonical_string(&entry) {
                if let Ok(mut tmp) = tempfile::NamedTempFile::new_in(parent) {
                    use std::io::Write;
                    if tmp.write_all(json.as_bytes()).is_ok() {
                        let _ = tmp.persist(path);
                    }
                }
            }
        }
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let key = self.key(request);
        let path = self.entry_path(&key);
        if let Some(mut completion) = Self::read_entry(&path) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            completion.cached = true;
            return Ok(completion);
        }
        let completion = self.inner.complete(request)?;
        self.write_entry(&path, request, &completion);
        Ok(completion)
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }

    fn usage(&self) -> TokenUsage {
        self.inner.usage()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockBackend, MockScript};
    use crate::backend::{RequestClass, RequestMeta};
    use crate::domain::ChatMessage;

    fn request(temp: f64) -> ChatRequest {
        ChatRequest {
            messages: vec![ChatMessage::user("does the answer specify X?")],
            temperature: temp,
            n: 10,
            max_tokens: 4,
            stop: None,
            meta: RequestMeta {
                class: RequestClass::Decision,
                response_id: Some("r1".into()),
                element_id: Some("e1".into()),
                prefix: Some(String::new()),
                decision: None,
                score: None,
            },
        }
    }

    fn cached_mock(dir: &Path) -> CachedBackend {
        let script = MockScript::with_seed(5).rule(None, None, None, 0.6);
        CachedBackend::new(Box::new(MockBackend::new(script, "mock-model")), dir)
    }

    #[test]
    fn hit_skips_backend_and_flags_cached() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached_mock(dir.path());
        let first = backend.complete(&request(0.7)).unwrap();
        assert!(!first.cached);
        assert_eq!(backend.calls(), 1);
        let second = backend.complete(&request(0.7)).unwrap();
        assert!(second.cached);
        assert_eq!(second.texts, first.texts);
        assert_eq!(backend.calls(), 1, "hit must not invoke the backend");
        assert_eq!(backend.hits(), 1);
    }

    #[test]
    fn temperature_changes_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached_mock(dir.path());
        backend.complete(&request(0.7)).unwrap();
        backend.complete(&request(0.9)).unwrap();
        assert_eq!(backend.calls(), 2);
        assert_eq!(backend.hits(), 0);
    }

    #[test]
    fn corrupted_entry_is_recomputed_and_rewritten() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached_mock(dir.path());
        let first = backend.complete(&request(0.7)).unwrap();

        let key = backend.key(&request(0.7));
        let path = backend.entry_path(&key);
        std::fs::write(&path, b"{ not json").unwrap();

        let again = backend.complete(&request(0.7)).unwrap();
        assert_eq!(again.texts, first.texts);
        assert_eq!(backend.calls(), 2, "corruption forces a recompute");
        let healed = backend.complete(&request(0.7)).unwrap();
        assert!(healed.cached, "entry must be rewritten after corruption");
    }

    #[test]
    fn warm_cache_survives_process_restart() {
        let dir = tempfile::tempdir().unwrap();
        let texts = {
            let backend = cached_mock(dir.path());
            backend.complete(&request(0.7)).unwrap().texts
        };
        let backend = cached_mock(dir.path());
        let warm = backend.complete(&request(0.7)).unwrap();
        assert!(warm.cached);
        assert_eq!(warm.texts, texts);
        assert_eq!(backend.calls(), 0);
    }
}
