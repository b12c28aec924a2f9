use std::ffi::CString;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use log::warn;

use super::format::{write_artifact, ArtifactHeader};
use super::{layout, LocalArtifact, ResilienceError};
use crate::fsutil::write_atomic_with;
use crate::model::{
    manifest_digest, CheckpointId, CheckpointManifest, Level, LevelStatus, RegionDescriptor,
};

/// Bytes available to an unprivileged writer on the filesystem holding `dir`
/// (or its nearest existing ancestor).
pub fn available_bytes(dir: &Path) -> Option<u64> {
    let mut probe = Some(dir);
    while let Some(p) = probe {
        if p.exists() {
            let c = CString::new(p.as_os_str().as_bytes()).ok()?;
            let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
            let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
            return (rc == 0).then(|| st.f_bavail as u64 * st.f_frsize as u64);
        }
        probe = p.parent();
    }
    None
}

/// Writes the checkpoint file to the first tier with room for it, falling
/// over to the next tier on any write error. A manifest with L1 COMPLETE is
/// written beside the artifact.
pub fn write_local(
    regions: &[(RegionDescriptor, &[u8])],
    ckpt: &CheckpointId,
    tiers: &[PathBuf],
    group_size: u32,
) -> Result<LocalArtifact, ResilienceError> {
    if regions.is_empty() {
        return Err(ResilienceError::EmptyRegions);
    }
    for (desc, bytes) in regions {
        if bytes.len() as u64 != desc.byte_length() {
            return Err(ResilienceError::Malformed(format!(
                "region {} has {} bytes, descriptor says {}",
                desc.region_id,
                bytes.len(),
                desc.byte_length()
            )));
        }
    }
    let payloads: Vec<&[u8]> = regions.iter().map(|(_, b)| *b).collect();
    let header = ArtifactHeader {
        rank: ckpt.rank,
        version: ckpt.version,
        regions: regions.iter().map(|(d, _)| *d).collect(),
        digest: manifest_digest(&payloads),
    };
    let needed = header.file_len();

    let mut reasons = Vec::new();
    for (tier_index, tier) in tiers.iter().enumerate() {
        if let Some(avail) = available_bytes(tier) {
            if avail < needed + 4096 {
                reasons.push(format!("tier {tier_index}: {avail} bytes free, need {needed}"));
                continue;
            }
        }
        let path = layout::l1_path(tier, ckpt);
        let written = write_atomic_with(&path, |f| {
            let mut w = std::io::BufWriter::with_capacity(1 << 20, f);
            write_artifact(&mut w, &header, &payloads)?;
            w.into_inner().map_err(|e| e.into_error())?;
            Ok(())
        })
        .and_then(|()| {
            let mut manifest = CheckpointManifest::new(ckpt.clone(), header.regions.clone(), header.digest, group_size);
            manifest.set_status(Level::L1Local, LevelStatus::Complete).expect("L1 is always settable");
            manifest.write(&path.with_extension("manifest")).map_err(|e| match e {
                crate::model::ModelError::Io(io) => io,
                other => std::io::Error::other(other.to_string()),
            })
        });
        match written {
            Ok(()) => {
                for (other_index, other) in tiers.iter().enumerate() {
                    if other_index != tier_index {
                        let stale = layout::l1_path(other, ckpt);
                        let _ = std::fs::remove_file(&stale);
                        let _ = std::fs::remove_file(stale.with_extension("manifest"));
                    }
                }
                return Ok(LocalArtifact { path, ckpt: ckpt.clone(), byte_length: needed, tier_index });
            }
            Err(e) => {
                warn!("tier {tier_index} ({}) failed for {ckpt}: {e}", tier.display());
                let _ = std::fs::remove_file(&path);
                reasons.push(format!("tier {tier_index}: {e}"));
            }
        }
    }
    Err(ResilienceError::NoTierFits(reasons.join("; ")))
}
