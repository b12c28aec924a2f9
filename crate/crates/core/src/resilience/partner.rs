use std::path::{Path, PathBuf};

use super::format::{read_header, verify_artifact};
use super::{layout, LocalArtifact, ResilienceError};
use crate::fsutil::{read_throttled, write_atomic, write_atomic_throttled};

/// Rank holding `rank`'s partner copy.
pub fn partner_of(rank: u32, num_ranks: u32, distance: u32) -> Result<u32, ResilienceError> {
    if num_ranks == 0 || distance.is_multiple_of(num_ranks) {
        return Err(ResilienceError::SelfPartner);
    }
    Ok((rank + distance) % num_ranks)
}

/// Rank whose partner copy `holder` stores.
pub fn origin_for(holder: u32, num_ranks: u32, distance: u32) -> u32 {
    (holder + num_ranks - distance % num_ranks) % num_ranks
}

/// Copies the artifact (and its manifest) into the partner rank's
/// namespace, under `partner/r<origin>/`. Returns the copy's path.
pub fn partner_replicate(
    artifact: &LocalArtifact,
    num_ranks: u32,
    distance: u32,
    tiers: &[PathBuf],
    quantum: usize,
) -> Result<PathBuf, ResilienceError> {
    let holder = partner_of(artifact.ckpt.rank, num_ranks, distance)?;
    let bytes = read_throttled(&artifact.path, quantum)?;
    let manifest = std::fs::read(artifact.manifest_path()).ok();
    let source_digest = read_header(&artifact.path)?.digest;

    let mut last_err = None;
    for tier in tiers {
        let dest = layout::partner_path(tier, holder, &artifact.ckpt);
        match copy_to(&dest, &bytes, manifest.as_deref(), quantum) {
            Ok(()) => {
                let copy_digest = read_header(&dest)?.digest;
                if copy_digest != source_digest || !verify_artifact(&dest)? {
                    return Err(ResilienceError::VerifyFailed(format!("partner copy {}", dest.display())));
                }
                for other in tiers.iter().filter(|t| *t != tier) {
                    let stale = layout::partner_path(other, holder, &artifact.ckpt);
                    let _ = std::fs::remove_file(&stale);
                    let _ = std::fs::remove_file(stale.with_extension("manifest"));
                }
                return Ok(dest);
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.map(ResilienceError::Io).unwrap_or(ResilienceError::NoTierFits("no tiers".into())))
}

fn copy_to(dest: &Path, bytes: &[u8], manifest: Option<&[u8]>, quantum: usize) -> std::io::Result<()> {
    write_atomic_throttled(dest, bytes, quantum)?;
    if let Some(m) = manifest {
        write_atomic(&dest.with_extension("manifest"), m)?;
    }
    Ok(())
}
