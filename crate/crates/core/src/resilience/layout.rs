//! Scratch directory layout. Every rank owns a namespace on each tier:
//!
//! ```text
//! <tier>/rank-<r>/<name>-v<v>-r<r>.ckpt          L1 artifact
//! <tier>/rank-<r>/<name>-v<v>-r<r>.manifest      its manifest
//! <tier>/rank-<p>/partner/r<o>/<stem>.ckpt       partner copy of rank o
//! <tier>/rank-<h>/xor/<name>-v<v>-g<g>.xor        parity of XOR group g
//! ```

use std::path::{Path, PathBuf};

use crate::model::CheckpointId;

pub fn rank_dir(tier: &Path, rank: u32) -> PathBuf {
    tier.join(format!("rank-{rank}"))
}

pub fn parse_rank_dir(name: &str) -> Option<u32> {
    name.strip_prefix("rank-")?.parse().ok()
}

pub fn l1_path(tier: &Path, id: &CheckpointId) -> PathBuf {
    rank_dir(tier, id.rank).join(id.artifact_file_name())
}

pub fn partner_dir(tier: &Path, holder: u32, origin: u32) -> PathBuf {
    rank_dir(tier, holder).join("partner").join(format!("r{origin}"))
}

pub fn partner_path(tier: &Path, holder: u32, id: &CheckpointId) -> PathBuf {
    partner_dir(tier, holder, id.rank).join(id.artifact_file_name())
}

pub fn parity_file_name(name: &str, version: u32, group: u32) -> String {
    format!("{name}-v{version}-g{group}.xor")
}

/// Parses `<name>-v<version>-g<group>.xor`.
pub fn parse_parity_file_name(file: &str) -> Option<(String, u32, u32)> {
    let stem = file.strip_suffix(".xor")?;
    let (rest, group) = stem.rsplit_once("-g")?;
    let (name, version) = rest.rsplit_once("-v")?;
    Some((name.to_string(), version.parse().ok()?, group.parse().ok()?))
}

pub fn parity_path(tier: &Path, holder: u32, name: &str, version: u32, group: u32) -> PathBuf {
    rank_dir(tier, holder).join("xor").join(parity_file_name(name, version, group))
}

/// Finds an existing L1 artifact for `id` on any tier, fastest tier first.
pub fn find_l1(tiers: &[PathBuf], id: &CheckpointId) -> Option<(usize, PathBuf)> {
    tiers.iter().enumerate().map(|(i, t)| (i, l1_path(t, id))).find(|(_, p)| p.is_file())
}

pub fn find_partner(tiers: &[PathBuf], holder: u32, id: &CheckpointId) -> Option<PathBuf> {
    tiers.iter().map(|t| partner_path(t, holder, id)).find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        let f = parity_file_name("my-app-v1", 12, 3);
        assert_eq!(parse_parity_file_name(&f), Some(("my-app-v1".into(), 12, 3)));
        assert_eq!(parse_rank_dir("rank-17"), Some(17));
        assert_eq!(parse_rank_dir("rank-x"), None);
        let id = CheckpointId::new("a", 2, 1).unwrap();
        assert_eq!(partner_path(Path::new("/s"), 2, &id), PathBuf::from("/s/rank-2/partner/r1/a-v2-r1.ckpt"));
    }
}
