//! External repositories behind one put/get/list/delete contract.
//!
//! Locators: `file://<dir>` maps keys to relative paths under `<dir>`;
//! `kv://<dir>` is a single-file log-structured store (see [`super::kv`]).
//! Either may carry `?put_latency_ms=<n>` to delay every put, which the
//! benchmark uses to emulate a slow repository.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use walkdir::WalkDir;

use super::kv::KvRepository;
use super::ResilienceError;
use crate::fsutil::{is_temp_name, write_atomic};

pub trait RepositoryBackend: Send + Sync {
    fn locator(&self) -> &str;
    fn put(&self, key: &str, value: &[u8]) -> Result<(), ResilienceError>;
    /// `Ok(None)` when the key is absent.
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ResilienceError>;
    /// Every live key starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>, ResilienceError>;
    /// Returns whether the key existed.
    fn delete(&self, key: &str) -> Result<bool, ResilienceError>;
}

/// Keys are `/`-separated segments of `[A-Za-z0-9_.-]`, none empty, none
/// starting with `.`.
pub fn validate_key(key: &str) -> Result<(), ResilienceError> {
    let ok = !key.is_empty()
        && key.split('/').all(|seg| {
            !seg.is_empty()
                && !seg.starts_with('.')
                && seg.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
        });
    if ok {
        Ok(())
    } else {
        Err(ResilienceError::InvalidKey(key.to_string()))
    }
}

pub struct FileRepository {
    locator: String,
    root: PathBuf,
}

impl FileRepository {
    pub fn open(root: &Path) -> Result<Self, ResilienceError> {
        std::fs::create_dir_all(root)?;
        Ok(Self { locator: format!("file://{}", root.display()), root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &str) -> Result<PathBuf, ResilienceError> {
        validate_key(key)?;
        Ok(self.root.join(key))
    }
}

impl RepositoryBackend for FileRepository {
    fn locator(&self) -> &str {
        &self.locator
    }

    fn put(&self, key: &str, value: &[u8]) -> Result<(), ResilienceError> {
        write_atomic(&self.path_of(key)?, value)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ResilienceError> {
        match std::fs::read(self.path_of(key)?) {
            Ok(v) => Ok(Some(v)),
            Err(e) if absent(&e) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, ResilienceError> {
        let mut keys = Vec::new();
        for entry in WalkDir::new(&self.root).min_depth(1) {
            let entry = entry.map_err(|e| ResilienceError::Io(e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy();
            if is_temp_name(&name) {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key.starts_with(prefix) && validate_key(&key).is_ok() {
                keys.push(key);
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn delete(&self, key: &str) -> Result<bool, ResilienceError> {
        let path = self.path_of(key)?;
        match std::fs::remove_file(&path) {
            Ok(()) => {
                let mut dir = path.parent();
                while let Some(d) = dir {
                    if d == self.root || std::fs::remove_dir(d).is_err() {
                        break;
                    }
                    dir = d.parent();
                }
                Ok(true)
            }
            Err(e) if absent(&e) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }
}

/// A key whose path runs into a file or names a directory does not exist.
fn absent(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(e.kind(), NotFound | NotADirectory | IsADirectory)
}

/// Delays every put by a fixed latency.
pub struct LatencyRepository {
    inner: Arc<dyn RepositoryBackend>,
    put_latency: Duration,
    locator: String,
}

impl LatencyRepository {
    pub fn new(inner: Arc<dyn RepositoryBackend>, put_latency: Duration) -> Self {
        let locator = format!("{}?put_latency_ms={}", inner.locator(), put_latency.as_millis());
        Self { inner, put_latency, locator }
    }
}

impl RepositoryBackend for LatencyRepository {
    fn locator(&self) -> &str {
        &self.locator
    }
    fn put(&self, key: &str, value: &[u8]) -> Result<(), ResilienceError> {
        std::thread::sleep(self.put_latency);
        self.inner.put(key, value)
    }
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ResilienceError> {
        self.inner.get(key)
    }
    fn list(&self, prefix: &str) -> Result<Vec<String>, ResilienceError> {
        self.inner.list(prefix)
    }
    fn delete(&self, key: &str) -> Result<bool, ResilienceError> {
        self.inner.delete(key)
    }
}

/// Test double that fails puts on demand and counts attempts.
pub struct FaultInjectingRepository {
    inner: Arc<dyn RepositoryBackend>,
    failures_left: AtomicU32,
    offline: AtomicBool,
    put_attempts: AtomicU32,
}

impl FaultInjectingRepository {
    pub fn new(inner: Arc<dyn RepositoryBackend>) -> Self {
        Self {
            inner,
            failures_left: AtomicU32::new(0),
            offline: AtomicBool::new(false),
            put_attempts: AtomicU32::new(0),
        }
    }

    /// The next `n` puts fail with `REPO_UNAVAILABLE`.
    pub fn fail_next_puts(&self, n: u32) {
        self.failures_left.store(n, Ordering::SeqCst);
    }

    pub fn set_offline(&self, offline: bool) {
        self.offline.store(offline, Ordering::SeqCst);
    }

    pub fn put_attempts(&self) -> u32 {
        self.put_attempts.load(Ordering::SeqCst)
    }

    fn check(&self) -> Result<(), ResilienceError> {
        if self.offline.load(Ordering::SeqCst) {
            return Err(ResilienceError::RepoUnavailable("offline".into()));
        }
        Ok(())
    }
}

impl RepositoryBackend for FaultInjectingRepository {
    fn locator(&self) -> &str {
        self.inner.locator()
    }
    fn put(&self, key: &str, value: &[u8]) -> Result<(), ResilienceError> {
        self.put_attempts.fetch_add(1, Ordering::SeqCst);
        self.check()?;
        let injected = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected {
            return Err(ResilienceError::RepoUnavailable("injected put failure".into()));
        }
        self.inner.put(key, value)
    }
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ResilienceError> {
        self.check()?;
        self.inner.get(key)
    }
    fn list(&self, prefix: &str) -> Result<Vec<String>, ResilienceError> {
        self.check()?;
        self.inner.list(prefix)
    }
    fn delete(&self, key: &str) -> Result<bool, ResilienceError> {
        self.check()?;
        self.inner.delete(key)
    }
}

/// Opens the repository named by `locator`.
pub fn repo_open(locator: &str) -> Result<Arc<dyn RepositoryBackend>, ResilienceError> {
    let (scheme, rest) =
        locator.split_once("://").ok_or_else(|| ResilienceError::UnknownScheme(locator.to_string()))?;
    let (path, query) = match rest.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (rest, None),
    };
    let base: Arc<dyn RepositoryBackend> = match scheme {
        "file" => Arc::new(FileRepository::open(Path::new(path))?),
        "kv" => Arc::new(KvRepository::open(Path::new(path))?),
        _ => return Err(ResilienceError::UnknownScheme(locator.to_string())),
    };
    let mut latency = None;
    for pair in query.into_iter().flat_map(|q| q.split('&')).filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("put_latency_ms", v)) => {
                let ms: u64 = v.parse().map_err(|_| ResilienceError::UnknownScheme(locator.to_string()))?;
                latency = Some(Duration::from_millis(ms));
            }
            _ => return Err(ResilienceError::UnknownScheme(locator.to_string())),
        }
    }
    Ok(match latency {
        Some(d) if !d.is_zero() => Arc::new(LatencyRepository::new(base, d)),
        _ => base,
    })
}

/// Appends or replaces the `put_latency_ms` query on a locator.
pub fn with_put_latency(locator: &str, latency_ms: u64) -> String {
    let base = locator.split_once('?').map(|(b, _)| b).unwrap_or(locator);
    format!("{base}?put_latency_ms={latency_ms}")
}
