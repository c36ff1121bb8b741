//! Content-addressed response cache.
//!
//! One JSON file per entry, named by the SHA-256 of the backend id, prompt
//! text, decoding parameters and seed. Each file stores the request, the
//! response and a digest over both; entries that fail the check are logged
//! and treated as misses. Writes go through a temp file and a rename, so
//! concurrent writers of the same key leave one complete entry behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Decoding, ModelRequest, ModelResponse};
use crate::mcqa::PromptVariant;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(backend_id: &str, request: &ModelRequest) -> Self {
        #[derive(Serialize)]
        struct Material<'a> {
            backend_id: &'a str,
            prompt: &'a str,
            decoding: &'a Decoding,
            seed: u64,
        }
        let material = serde_json::to_vec(&Material {
            backend_id,
            prompt: &request.prompt.text,
            decoding: &request.decoding,
            seed: request.seed,
        })
        .expect("key material serializes");
        Self(hex::encode(Sha256::digest(&material)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRequest {
    backend_id: String,
    prompt: PromptVariant,
    decoding: Decoding,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: StoredRequest,
    response: ModelResponse,
    digest: String,
}

fn entry_digest(request: &StoredRequest, response: &ModelResponse) -> String {
    let body = serde_json::to_vec(&(request, response)).expect("entry serializes");
    hex::encode(Sha256::digest(&body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub corrupt: u64,
}

pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
    warnings: Mutex<Vec<String>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
            warnings: Mutex::new(Vec::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            corrupt: self.corrupt.load(Ordering::Relaxed),
        }
    }

    /// Integrity failures seen so far.
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    fn warn(&self, message: String) {
        log::warn!("{message}");
        self.corrupt.fetch_add(1, Ordering::Relaxed);
        self.warnings
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(message);
    }

    /// Stored response for `key`, or `None` on a miss or a corrupt entry.
    pub fn lookup(&self, key: &CacheKey) -> Option<ModelResponse> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                self.warn(format!("cache entry {}: {e}", path.display()));
                return None;
            }
        };
        let entry: CacheEntry = match serde_json::from_slice(&bytes) {
            Ok(entry) => entry,
            Err(e) => {
                self.warn(format!("cache entry {} unreadable: {e}", path.display()));
                return None;
            }
        };
        if entry.key != key.0 || entry.digest != entry_digest(&entry.request, &entry.response) {
            self.warn(format!("cache entry {} failed integrity check", path.display()));
            return None;
        }
        Some(entry.response)
    }

    pub fn store(
        &self,
        key: &CacheKey,
        backend_id: &str,
        request: &ModelRequest,
        response: &ModelResponse,
    ) -> std::io::Result<()> {
        let stored = StoredRequest {
            backend_id: backend_id.to_string(),
            prompt: request.prompt.clone(),
            decoding: request.decoding,
            seed: request.seed,
        };
        let entry = CacheEntry {
            key: key.0.clone(),
            digest: entry_digest(&stored, response),
            request: stored,
            response: response.clone(),
        };
        let path = self.path_for(key);
        let parent = path.parent().expect("entry path has a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        serde_json::to_writer_pretty(&mut tmp, &entry)?;
        tmp.write_all(b"\n")?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn query<B: Backend + ?Sized>(
        &self,
        backend: &B,
        request: &ModelRequest,
    ) -> Result<ModelResponse, BackendError> {
        let key = CacheKey::new(backend.id(), request);
        if let Some(hit) = self.lookup(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = backend.query(request)?;
        if let Err(e) = self.store(&key, backend.id(), request, &response) {
            log::warn!("could not write cache entry {}: {e}", key.0);
        }
        Ok(response)
    }
}

/// Queries through `cache` when present, directly otherwise.
pub fn cached_query<B: Backend + ?Sized>(
    cache: Option<&ResponseCache>,
    backend: &B,
    request: &ModelRequest,
) -> Result<ModelResponse, BackendError> {
    match cache {
        Some(cache) => cache.query(backend, request),
        None => backend.query(request),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::simulated::{KnowledgeProfile, ProfileTable, SimulatedBackend, VerifierPolicy};
    use crate::backend::Counting;
    use crate::mcqa::{render_prompt, shuffle_options, Question};

    fn setup() -> (Counting<SimulatedBackend>, ModelRequest) {
        let q = Question::new("q1", "s", vec!["a".into(), "b".into(), "c".into(), "d".into()], 2).unwrap();
        let mut profiles = ProfileTable::new();
        profiles.insert(
            "q1".into(),
            KnowledgeProfile::Unstable {
                dist_plain: [0.1, 0.2, 0.3, 0.4],
                dist_augmented: [0.2; 5],
            },
        );
        let backend = Counting::new(SimulatedBackend::new(profiles, VerifierPolicy::AcceptAll));
        let request = ModelRequest {
            prompt: render_prompt(&q.stem, &shuffle_options(&q, 3)),
            decoding: Decoding::default(),
            seed: 11,
        };
        (backend, request)
    }

    #[test]
    fn miss_then_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let (backend, request) = setup();
        let first = cache.query(&backend, &request).unwrap();
        let second = cache.query(&backend, &request).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls(), 1);
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 1, corrupt: 0 });
    }

    #[test]
    fn key_sensitivity() {
        let (backend, request) = setup();
        let mut warmer = request.clone();
        warmer.decoding.temperature = 0.7;
        assert_ne!(CacheKey::new("x", &request), CacheKey::new("x", &warmer));
        assert_ne!(CacheKey::new("x", &request), CacheKey::new("y", &request));
        let mut reseeded = request.clone();
        reseeded.seed += 1;
        assert_ne!(CacheKey::new("x", &request), CacheKey::new("x", &reseeded));
        let mut edited = request.clone();
        edited.prompt.text.push(' ');
        assert_ne!(CacheKey::new("x", &request), CacheKey::new("x", &edited));
        assert_eq!(CacheKey::new("x", &request), CacheKey::new("x", &request.clone()));

        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        cache.query(&backend, &request).unwrap();
        cache.query(&backend, &warmer).unwrap();
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let (backend, request) = setup();
        let original = cache.query(&backend, &request).unwrap();
        let path = cache.path_for(&CacheKey::new(backend.id(), &request));

        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"latency_ms\": 0", "\"latency_ms\": 5", 1);
        assert_ne!(text, tampered);
        fs::write(&path, tampered).unwrap();
        let again = cache.query(&backend, &request).unwrap();
        assert_eq!(again, original);
        assert_eq!(backend.calls(), 2);
        assert_eq!(cache.stats().corrupt, 1);
        assert_eq!(cache.warnings().len(), 1);

        fs::write(&path, "{ truncated").unwrap();
        cache.query(&backend, &request).unwrap();
        assert_eq!(cache.stats().corrupt, 2);
        // Rewritten entry is healthy again.
        cache.query(&backend, &request).unwrap();
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn concurrent_identical_requests() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let (backend, request) = setup();
        let k = 8;
        let responses: Vec<ModelResponse> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..k)
                .map(|_| s.spawn(|| cache.query(&backend, &request).unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let calls = backend.calls();
        assert!((1..=k as u64).contains(&calls), "calls = {calls}");
        assert!(responses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(cache.lookup(&CacheKey::new(backend.id(), &request)).unwrap(), responses[0]);
    }
}
