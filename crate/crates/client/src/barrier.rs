//! Rank barrier for SYNC mode, where no backend runs. Each rank drops a
//! marker file into a shared directory on scratch tier 0 and waits until
//! every rank's marker is present:
//!
//! ```text
//! <tier0>/barrier/<name>-v<version>-<phase>/r<rank>.<job>.ok|fail
//! ```
//!
//! The job token keeps markers from an earlier run of the same scratch
//! directory from counting.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mlckpt_core::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierResult {
    /// Every rank arrived; `failed` lists ranks that arrived with ok=false.
    Released { failed: Vec<u32> },
    TimedOut { missing: Vec<u32> },
}

pub struct FileBarrier {
    root: PathBuf,
    job: String,
    timeout: Duration,
}

impl FileBarrier {
    pub fn new(tier0: &Path, job: impl Into<String>, timeout: Duration) -> Self {
        Self { root: tier0.join("barrier"), job: job.into(), timeout }
    }

    fn dir(&self, name: &str, version: u32, phase: &str) -> PathBuf {
        self.root.join(format!("{name}-v{version}-{phase}"))
    }

    pub fn wait(
        &self,
        name: &str,
        version: u32,
        phase: &str,
        rank: u32,
        num_ranks: u32,
        ok: bool,
    ) -> std::io::Result<BarrierResult> {
        let dir = self.dir(name, version, phase);
        let status = if ok { "ok" } else { "fail" };
        write_atomic(&dir.join(format!("r{rank}.{}.{status}", self.job)), b"")?;
        let suffix_ok = format!(".{}.ok", self.job);
        let suffix_fail = format!(".{}.fail", self.job);
        let deadline = Instant::now() + self.timeout;
        let mut pause = Duration::from_millis(1);
        loop {
            let mut arrived = BTreeSet::new();
            let mut failed = Vec::new();
            for entry in std::fs::read_dir(&dir)?.flatten() {
                let file = entry.file_name().to_string_lossy().into_owned();
                let (stem, bad) = if let Some(s) = file.strip_suffix(&suffix_ok) {
                    (s, false)
                } else if let Some(s) = file.strip_suffix(&suffix_fail) {
                    (s, true)
                } else {
                    continue;
                };
                if let Some(r) = stem.strip_prefix('r').and_then(|r| r.parse::<u32>().ok()) {
                    if r < num_ranks && arrived.insert(r) && bad {
                        failed.push(r);
                    }
                }
            }
            if arrived.len() as u32 == num_ranks {
                failed.sort_unstable();
                if rank == 0 {
                    self.cleanup_before(name, version);
                }
                return Ok(BarrierResult::Released { failed });
            }
            if Instant::now() >= deadline {
                let missing = (0..num_ranks).filter(|r| !arrived.contains(r)).collect();
                return Ok(BarrierResult::TimedOut { missing });
            }
            std::thread::sleep(pause);
            pause = (pause * 2).min(Duration::from_millis(20));
        }
    }

    /// Drops barrier directories of this name two or more versions back;
    /// no rank can still be waiting in them.
    fn cleanup_before(&self, name: &str, version: u32) {
        let Ok(entries) = std::fs::read_dir(&self.root) else { return };
        for e in entries.flatten() {
            let file = e.file_name().to_string_lossy().into_owned();
            let Some(rest) = file.strip_prefix(name).and_then(|r| r.strip_prefix("-v")) else { continue };
            let Some(v) = rest.split('-').next().and_then(|v| v.parse::<u32>().ok()) else { continue };
            if v + 1 < version {
                let _ = std::fs::remove_dir_all(e.path());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn releases_when_all_arrive() {
        let dir = tempfile::tempdir().unwrap();
        let handles: Vec<_> = (0..4)
            .map(|r| {
                let root = dir.path().to_path_buf();
                std::thread::spawn(move || {
                    std::thread::sleep(Duration::from_millis(10 * r as u64));
                    FileBarrier::new(&root, "j", Duration::from_secs(5)).wait("n", 1, "l1", r, 4, r != 2).unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), BarrierResult::Released { failed: vec![2] });
        }
    }

    #[test]
    fn times_out_naming_missing() {
        let dir = tempfile::tempdir().unwrap();
        let b = FileBarrier::new(dir.path(), "j", Duration::from_millis(50));
        assert_eq!(b.wait("n", 1, "l1", 0, 3, true).unwrap(), BarrierResult::TimedOut { missing: vec![1, 2] });
        // Markers of another job do not count.
        let other = FileBarrier::new(dir.path(), "k", Duration::from_millis(50));
        assert_eq!(other.wait("n", 1, "l1", 1, 2, true).unwrap(), BarrierResult::TimedOut { missing: vec![0] });
    }
}
