//! L3: copying a verified local artifact into the external repository.

use std::time::Duration;

use log::{info, warn};

use super::format::verify_bytes;
use super::repo::RepositoryBackend;
use super::{LocalArtifact, ResilienceError};
use crate::fsutil::read_throttled;
use crate::model::{CheckpointId, CheckpointManifest, Level, LevelStatus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Wait after the n-th failed attempt; the last entry repeats.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: vec![Duration::from_millis(100), Duration::from_millis(400), Duration::from_millis(1600)],
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        Self { max_attempts, backoff: vec![Duration::ZERO] }
    }

    pub fn delay_after(&self, failed_attempt: u32) -> Duration {
        let i = (failed_attempt.saturating_sub(1) as usize).min(self.backoff.len().saturating_sub(1));
        self.backoff.get(i).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushReport {
    pub attempts: u32,
    pub data_key: String,
    pub manifest_key: String,
    pub bytes: u64,
}

pub fn key_prefix(id: &CheckpointId) -> String {
    format!("{}/v{}/r{}", id.name, id.version, id.rank)
}

pub fn data_key(id: &CheckpointId) -> String {
    format!("{}/data", key_prefix(id))
}

pub fn manifest_key(id: &CheckpointId) -> String {
    format!("{}/manifest", key_prefix(id))
}

/// Parses `<name>/v<version>/r<rank>/manifest`.
pub fn parse_manifest_key(key: &str) -> Option<CheckpointId> {
    let mut parts = key.split('/');
    let name = parts.next()?;
    let version = parts.next()?.strip_prefix('v')?.parse().ok()?;
    let rank = parts.next()?.strip_prefix('r')?.parse().ok()?;
    (parts.next()? == "manifest" && parts.next().is_none())
        .then(|| CheckpointId::new(name, version, rank).ok())
        .flatten()
}

fn retryable(e: &ResilienceError) -> bool {
    matches!(e, ResilienceError::RepoUnavailable(_) | ResilienceError::Io(_) | ResilienceError::StoreCorrupt(_))
}

/// Uploads data then manifest. Nothing is uploaded unless the artifact
/// verifies and matches the manifest digest. The uploaded manifest already
/// reads L3 COMPLETE: its presence under the key is the completion marker.
pub fn flush(
    artifact: &LocalArtifact,
    manifest: &CheckpointManifest,
    repo: &dyn RepositoryBackend,
    policy: &RetryPolicy,
    quantum: usize,
) -> Result<FlushReport, ResilienceError> {
    let bytes = read_throttled(&artifact.path, quantum)?;
    let header = verify_bytes(&bytes)?;
    if header.digest != manifest.digest {
        return Err(ResilienceError::VerifyFailed(format!(
            "{}: artifact digest {} differs from manifest {}",
            artifact.path.display(),
            header.digest,
            manifest.digest
        )));
    }
    let mut remote = manifest.clone();
    remote.set_status(Level::L3Repository, LevelStatus::Complete)?;
    let remote_json = remote.to_json();
    let (dkey, mkey) = (data_key(&artifact.ckpt), manifest_key(&artifact.ckpt));

    let mut attempt = 0;
    loop {
        attempt += 1;
        let result = repo.put(&dkey, &bytes).and_then(|()| repo.put(&mkey, remote_json.as_bytes()));
        match result {
            Ok(()) => {
                info!("flushed {} to {} after {attempt} attempt(s)", artifact.ckpt, repo.locator());
                return Ok(FlushReport { attempts: attempt, data_key: dkey, manifest_key: mkey, bytes: bytes.len() as u64 });
            }
            Err(e) if retryable(&e) && attempt < policy.max_attempts => {
                let wait = policy.delay_after(attempt);
                warn!("flush of {} attempt {attempt} failed: {e}; retrying in {wait:?}", artifact.ckpt);
                std::thread::sleep(wait);
            }
            Err(e) if retryable(&e) => {
                return Err(ResilienceError::RepoUnavailable(format!("{attempt} attempts failed, last: {e}")));
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegionDescriptor;
    use crate::resilience::local::write_local;
    use crate::resilience::repo::{FaultInjectingRepository, FileRepository};
    use std::sync::Arc;

    fn setup(dir: &std::path::Path) -> (LocalArtifact, CheckpointManifest) {
        let data: Vec<u8> = (0..1000u32).map(|i| (i * 7) as u8).collect();
        let id = CheckpointId::new("hacc", 2, 1).unwrap();
        let art = write_local(&[(RegionDescriptor::new(0, 1000, 1).unwrap(), &data[..])], &id, &[dir.join("s")], 2)
            .unwrap();
        let m = CheckpointManifest::read(&art.manifest_path()).unwrap();
        (art, m)
    }

    #[test]
    fn keys() {
        let id = CheckpointId::new("hacc", 3, 2).unwrap();
        assert_eq!(data_key(&id), "hacc/v3/r2/data");
        assert_eq!(manifest_key(&id), "hacc/v3/r2/manifest");
        assert_eq!(parse_manifest_key("hacc/v3/r2/manifest"), Some(id));
        assert_eq!(parse_manifest_key("hacc/v3/r2/data"), None);
    }

    #[test]
    fn flush_then_get_returns_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let (art, m) = setup(dir.path());
        let repo = FileRepository::open(&dir.path().join("repo")).unwrap();
        let report = flush(&art, &m, &repo, &RetryPolicy::default(), 64).unwrap();
        assert_eq!(report.attempts, 1);
        assert_eq!(repo.get(&report.data_key).unwrap().unwrap(), std::fs::read(&art.path).unwrap());
        let remote = CheckpointManifest::from_json(
            std::str::from_utf8(&repo.get(&report.manifest_key).unwrap().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(remote.levels.l3, LevelStatus::Complete);
        assert_eq!(remote.digest, m.digest);
    }

    #[test]
    fn two_failures_then_success_takes_three_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let (art, m) = setup(dir.path());
        let inner = Arc::new(FileRepository::open(&dir.path().join("repo")).unwrap());
        let repo = FaultInjectingRepository::new(inner);
        repo.fail_next_puts(2);
        let t = std::time::Instant::now();
        let report = flush(&art, &m, &repo, &RetryPolicy::default(), 64).unwrap();
        assert_eq!(report.attempts, 3);
        // Backoff 100 ms + 400 ms.
        assert!(t.elapsed() >= Duration::from_millis(500));
    }

    #[test]
    fn offline_repository_exhausts_retries() {
        let dir = tempfile::tempdir().unwrap();
        let (art, m) = setup(dir.path());
        let repo = FaultInjectingRepository::new(Arc::new(FileRepository::open(&dir.path().join("repo")).unwrap()));
        repo.set_offline(true);
        let err = flush(&art, &m, &repo, &RetryPolicy::no_wait(3), 64).unwrap_err();
        assert_eq!(err.code(), "REPO_UNAVAILABLE");
        assert_eq!(repo.put_attempts(), 3);
    }

    #[test]
    fn corrupt_artifact_uploads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (art, m) = setup(dir.path());
        let mut bytes = std::fs::read(&art.path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&art.path, &bytes).unwrap();
        let repo = FileRepository::open(&dir.path().join("repo")).unwrap();
        let err = flush(&art, &m, &repo, &RetryPolicy::default(), 64).unwrap_err();
        assert_eq!(err.code(), "VERIFY_FAILED");
        assert!(repo.list("").unwrap().is_empty());
    }
}
