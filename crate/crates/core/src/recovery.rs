//! Version discovery and the recovery cascade.
//!
//! `discover` reads every scratch tier, partner directory, parity file and
//! repository manifest for one checkpoint name and records, per version and
//! rank, which copies exist and whether they verify. `latest_restorable`
//! applies the all-ranks rule to that catalog, and `materialize` rebuilds a
//! rank's artifact on tier 0 trying L1, partner, XOR and repository in turn.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::config::Redundancy;
use crate::fsutil::write_atomic;
use crate::model::{CheckpointId, CheckpointManifest, Digest, Level, LevelStatus};
use crate::pipeline::GroupTopology;
use crate::resilience::flush::{data_key, parse_manifest_key};
use crate::resilience::format::{verify_artifact, verify_bytes, ArtifactHeader};
use crate::resilience::layout;
use crate::resilience::repo::RepositoryBackend;
use crate::resilience::xor::{xor_decode, xor_encode, ParityBlock, XorGroup};
use crate::resilience::LocalArtifact;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("{id} unrecoverable: {detail}")]
    Unrecoverable { id: CheckpointId, detail: String, log: Vec<String> },
}

impl RecoveryError {
    pub fn code(&self) -> &'static str {
        "UNRECOVERABLE"
    }

    pub fn log(&self) -> &[String] {
        match self {
            RecoveryError::Unrecoverable { log, .. } => log,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Availability {
    PresentValid,
    PresentInvalid,
    Absent,
}

impl Availability {
    pub fn as_str(self) -> &'static str {
        match self {
            Availability::PresentValid => "PRESENT_VALID",
            Availability::PresentInvalid => "PRESENT_INVALID",
            Availability::Absent => "ABSENT",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Availability::PresentValid => "valid",
            Availability::PresentInvalid => "invalid",
            Availability::Absent => "-",
        }
    }
}

/// One copy of a rank's artifact (or of a group's parity).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Source {
    pub state: Availability,
    pub path: Option<PathBuf>,
    pub reason: Option<String>,
}

impl Default for Source {
    fn default() -> Self {
        Self { state: Availability::Absent, path: None, reason: None }
    }
}

impl Source {
    fn valid(path: PathBuf) -> Self {
        Self { state: Availability::PresentValid, path: Some(path), reason: None }
    }

    fn invalid(path: PathBuf, reason: impl Into<String>) -> Self {
        Self { state: Availability::PresentInvalid, path: Some(path), reason: Some(reason.into()) }
    }

    pub fn is_valid(&self) -> bool {
        self.state == Availability::PresentValid
    }

    /// Keeps the better of two copies found on different tiers.
    fn merge(&mut self, other: Source) {
        let rank = |s: &Source| match s.state {
            Availability::PresentValid => 2,
            Availability::PresentInvalid => 1,
            Availability::Absent => 0,
        };
        if rank(&other) > rank(self) {
            *self = other;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RankAvailability {
    pub l1: Source,
    pub partner: Source,
    /// Path holds the repository data key.
    pub l3: Source,
    pub group_size: Option<u32>,
    pub digest: Option<Digest>,
}

impl RankAvailability {
    pub fn local_valid(&self) -> bool {
        self.l1.is_valid() || self.partner.is_valid()
    }

    fn local_source(&self) -> Option<&Path> {
        [&self.l1, &self.partner].into_iter().find(|s| s.is_valid()).and_then(|s| s.path.as_deref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VersionEntry {
    pub ranks: BTreeMap<u32, RankAvailability>,
    /// Keyed by XOR group index.
    pub parity: BTreeMap<u32, Source>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionCatalog {
    pub name: String,
    pub versions: BTreeMap<u32, VersionEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum RecoverLevel {
    L1,
    Partner,
    Xor,
    L3,
}

impl RecoverLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            RecoverLevel::L1 => "L1",
            RecoverLevel::Partner => "PARTNER",
            RecoverLevel::Xor => "XOR",
            RecoverLevel::L3 => "L3",
        }
    }
}

impl fmt::Display for RecoverLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_local(path: &Path, id: &CheckpointId, manifest_digest: Option<Digest>) -> Source {
    let header = match verify_artifact(path) {
        Ok(true) => match crate::resilience::read_header(path) {
            Ok(h) => h,
            Err(e) => return Source::invalid(path.to_path_buf(), e.to_string()),
        },
        Ok(false) => return Source::invalid(path.to_path_buf(), "digest mismatch"),
        Err(e) => return Source::invalid(path.to_path_buf(), e.to_string()),
    };
    if header.rank != id.rank || header.version != id.version {
        return Source::invalid(path.to_path_buf(), format!("header names r{} v{}", header.rank, header.version));
    }
    if let Some(d) = manifest_digest {
        if d != header.digest {
            return Source::invalid(path.to_path_buf(), "digest differs from manifest");
        }
    }
    Source::valid(path.to_path_buf())
}

fn read_manifest(artifact: &Path) -> Option<CheckpointManifest> {
    CheckpointManifest::read(&artifact.with_extension("manifest")).ok()
}

fn list_dir(dir: &Path) -> Vec<(String, PathBuf)> {
    let Ok(entries) = std::fs::read_dir(dir) else { return Vec::new() };
    let mut out: Vec<(String, PathBuf)> =
        entries.flatten().map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())).collect();
    out.sort();
    out
}

fn ckpt_stem(file: &str, name: &str) -> Option<CheckpointId> {
    let id = CheckpointId::parse_stem(file.strip_suffix(".ckpt")?)?;
    (id.name == name).then_some(id)
}

/// Builds the catalog of `name` without modifying anything.
pub fn discover(
    name: &str,
    tiers: &[PathBuf],
    repo: Option<&dyn RepositoryBackend>,
    group: &GroupTopology,
) -> VersionCatalog {
    let mut versions: BTreeMap<u32, VersionEntry> = BTreeMap::new();
    let mut parity_files: Vec<(u32, u32, PathBuf)> = Vec::new();

    for tier in tiers {
        for (dir_name, rank_path) in list_dir(tier) {
            let Some(dir_rank) = layout::parse_rank_dir(&dir_name) else { continue };
            for (file, path) in list_dir(&rank_path) {
                let Some(id) = ckpt_stem(&file, name) else { continue };
                if id.rank != dir_rank {
                    continue;
                }
                let manifest = read_manifest(&path);
                let src = check_local(&path, &id, manifest.as_ref().map(|m| m.digest));
                let entry = versions.entry(id.version).or_default().ranks.entry(id.rank).or_default();
                if let Some(m) = manifest {
                    entry.group_size.get_or_insert(m.group_size);
                    entry.digest.get_or_insert(m.digest);
                }
                entry.l1.merge(src);
            }
            for (origin_dir, origin_path) in list_dir(&rank_path.join("partner")) {
                let Some(origin) = origin_dir.strip_prefix('r').and_then(|r| r.parse::<u32>().ok()) else {
                    continue;
                };
                for (file, path) in list_dir(&origin_path) {
                    let Some(id) = ckpt_stem(&file, name) else { continue };
                    if id.rank != origin {
                        continue;
                    }
                    let manifest = read_manifest(&path);
                    let src = check_local(&path, &id, manifest.as_ref().map(|m| m.digest));
                    let entry = versions.entry(id.version).or_default().ranks.entry(id.rank).or_default();
                    if let Some(m) = manifest {
                        entry.group_size.get_or_insert(m.group_size);
                        entry.digest.get_or_insert(m.digest);
                    }
                    entry.partner.merge(src);
                }
            }
            for (file, path) in list_dir(&rank_path.join("xor")) {
                if let Some((n, v, g)) = layout::parse_parity_file_name(&file) {
                    if n == name {
                        parity_files.push((v, g, path));
                    }
                }
            }
        }
    }

    if let Some(repo) = repo {
        discover_repository(name, repo, &mut versions);
    }

    if let Redundancy::Xor { group_size } = group.redundancy {
        for (version, g, path) in parity_files {
            let entry = versions.entry(version).or_default();
            let src = check_parity(&path, name, version, g, group_size, entry);
            entry.parity.entry(g).or_default().merge(src);
        }
    }
    VersionCatalog { name: name.to_string(), versions }
}

fn discover_repository(name: &str, repo: &dyn RepositoryBackend, versions: &mut BTreeMap<u32, VersionEntry>) {
    let keys = match repo.list(&format!("{name}/")) {
        Ok(k) => k,
        Err(e) => {
            warn!("repository {} unreadable: {e}", repo.locator());
            return;
        }
    };
    for key in keys {
        let Some(id) = parse_manifest_key(&key) else { continue };
        if id.name != name {
            continue;
        }
        let dkey = data_key(&id);
        let src = match check_remote(repo, &key, &dkey, &id) {
            Ok(m) => {
                let entry = versions.entry(id.version).or_default().ranks.entry(id.rank).or_default();
                entry.group_size.get_or_insert(m.group_size);
                entry.digest.get_or_insert(m.digest);
                Source::valid(PathBuf::from(&dkey))
            }
            Err(reason) => Source::invalid(PathBuf::from(&dkey), reason),
        };
        versions.entry(id.version).or_default().ranks.entry(id.rank).or_default().l3.merge(src);
    }
}

fn check_remote(
    repo: &dyn RepositoryBackend,
    mkey: &str,
    dkey: &str,
    id: &CheckpointId,
) -> Result<CheckpointManifest, String> {
    let mbytes = repo.get(mkey).map_err(|e| e.to_string())?.ok_or("manifest vanished")?;
    let manifest = CheckpointManifest::from_json(&String::from_utf8_lossy(&mbytes)).map_err(|e| e.to_string())?;
    let data = repo.get(dkey).map_err(|e| e.to_string())?.ok_or("data object missing")?;
    let header = verify_bytes(&data).map_err(|e| e.to_string())?;
    if header.digest != manifest.digest || header.rank != id.rank || header.version != id.version {
        return Err("object does not match its manifest".into());
    }
    Ok(manifest)
}

fn check_parity(path: &Path, name: &str, version: u32, g: u32, group_size: u32, entry: &VersionEntry) -> Source {
    let parity = match std::fs::read(path).map_err(|e| e.to_string()).and_then(|b| {
        ParityBlock::parse(&b).map_err(|e| e.to_string())
    }) {
        Ok(p) => p,
        Err(reason) => return Source::invalid(path.to_path_buf(), reason),
    };
    let group = XorGroup::of_rank(g * group_size, group_size);
    if parity.k() != group.member_ranks.len() {
        return Source::invalid(path.to_path_buf(), format!("k={} for group of {group_size}", parity.k()));
    }
    let mut members: Vec<Option<Vec<u8>>> = Vec::new();
    for r in &group.member_ranks {
        let bytes = entry.ranks.get(r).and_then(|ra| ra.local_source()).and_then(|p| std::fs::read(p).ok());
        members.push(bytes);
    }
    let missing: Vec<usize> = members.iter().enumerate().filter(|(_, m)| m.is_none()).map(|(i, _)| i).collect();
    match missing.as_slice() {
        [] => {
            let refs: Vec<&[u8]> = members.iter().map(|m| m.as_deref().unwrap()).collect();
            match xor_encode(&refs, parity.block_size) {
                Ok(expect) if expect == parity => Source::valid(path.to_path_buf()),
                _ => Source::invalid(path.to_path_buf(), "parity does not match members"),
            }
        }
        [lost] => {
            let refs: Vec<&[u8]> = members.iter().flatten().map(Vec::as_slice).collect();
            let rank = group.member_ranks[*lost];
            match xor_decode(&refs, &parity, *lost).map_err(|e| e.to_string()).and_then(|bytes| {
                verify_bytes(&bytes).map_err(|e| e.to_string())
            }) {
                Ok(h) if h.rank == rank && h.version == version => Source::valid(path.to_path_buf()),
                Ok(_) => Source::invalid(path.to_path_buf(), "decoded artifact names another checkpoint"),
                Err(reason) => Source::invalid(path.to_path_buf(), format!("trial decode of {name} r{rank}: {reason}")),
            }
        }
        // Cannot be checked, and cannot help either.
        _ => Source { state: Availability::PresentValid, path: Some(path.to_path_buf()), reason: Some("unchecked".into()) },
    }
}

impl VersionCatalog {
    /// The cheapest level that can restore `rank` at `version`.
    pub fn best_level(&self, version: u32, rank: u32, group: &GroupTopology) -> Option<RecoverLevel> {
        let entry = self.versions.get(&version)?;
        let ra = entry.ranks.get(&rank).cloned().unwrap_or_default();
        if ra.l1.is_valid() {
            return Some(RecoverLevel::L1);
        }
        if ra.partner.is_valid() {
            return Some(RecoverLevel::Partner);
        }
        if let Redundancy::Xor { group_size } = group.redundancy {
            let g = XorGroup::of_rank(rank, group_size);
            let missing = g
                .member_ranks
                .iter()
                .filter(|r| !entry.ranks.get(r).map(RankAvailability::local_valid).unwrap_or(false))
                .count();
            if missing <= 1 && entry.parity.get(&g.index).is_some_and(Source::is_valid) {
                return Some(RecoverLevel::Xor);
            }
        }
        if ra.l3.is_valid() {
            return Some(RecoverLevel::L3);
        }
        None
    }

    /// Every rank of the group is restorable and no copy records a
    /// different group size.
    pub fn is_restorable(&self, version: u32, group: &GroupTopology) -> bool {
        let Some(entry) = self.versions.get(&version) else { return false };
        if entry.ranks.values().any(|r| r.group_size.is_some_and(|g| g != group.num_ranks)) {
            return false;
        }
        group.num_ranks > 0 && (0..group.num_ranks).all(|r| self.best_level(version, r, group).is_some())
    }
}

pub fn latest_restorable(catalog: &VersionCatalog, group: &GroupTopology, max_version: Option<u32>) -> Option<u32> {
    catalog
        .versions
        .keys()
        .rev()
        .copied()
        .filter(|&v| max_version.is_none_or(|m| v <= m))
        .find(|&v| catalog.is_restorable(v, group))
}

pub fn recover_line(id: &CheckpointId, level: RecoverLevel, outcome: &str) -> String {
    format!("RECOVER {} v{} r{} level={} outcome={}", id.name, id.version, id.rank, level, outcome)
}

fn sanitize(reason: &str) -> String {
    reason.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Places verified bytes on tier 0 and writes a manifest if none exists.
fn install(
    bytes: &[u8],
    header: &ArtifactHeader,
    id: &CheckpointId,
    tiers: &[PathBuf],
    group: &GroupTopology,
    from_repo: bool,
) -> Result<LocalArtifact, String> {
    let tier = tiers.first().ok_or("no scratch tiers")?;
    let path = layout::l1_path(tier, id);
    write_atomic(&path, bytes).map_err(|e| e.to_string())?;
    if !verify_artifact(&path).map_err(|e| e.to_string())? {
        return Err("installed copy fails verification".into());
    }
    let mpath = path.with_extension("manifest");
    let mut manifest = CheckpointManifest::read(&mpath)
        .ok()
        .filter(|m| m.digest == header.digest)
        .unwrap_or_else(|| CheckpointManifest::new(id.clone(), header.regions.clone(), header.digest, group.num_ranks));
    manifest.set_status(Level::L1Local, LevelStatus::Complete).map_err(|e| e.to_string())?;
    if from_repo {
        manifest.set_status(Level::L3Repository, LevelStatus::Complete).map_err(|e| e.to_string())?;
    }
    manifest.write(&mpath).map_err(|e| e.to_string())?;
    Ok(LocalArtifact { path, ckpt: id.clone(), byte_length: bytes.len() as u64, tier_index: 0 })
}

fn checked(bytes: &[u8], id: &CheckpointId, expect: Option<Digest>) -> Result<ArtifactHeader, String> {
    let header = verify_bytes(bytes).map_err(|e| e.to_string())?;
    if header.rank != id.rank || header.version != id.version {
        return Err("artifact names another checkpoint".into());
    }
    if expect.is_some_and(|d| d != header.digest) {
        return Err("digest differs from manifest".into());
    }
    Ok(header)
}

/// Produces a verified artifact for `id` on scratch, trying L1, partner,
/// XOR decode and repository in that order. Returns the artifact, the level
/// that served it, and one `RECOVER` line per level considered.
pub fn materialize(
    id: &CheckpointId,
    catalog: &VersionCatalog,
    tiers: &[PathBuf],
    repo: Option<&dyn RepositoryBackend>,
    group: &GroupTopology,
) -> Result<(LocalArtifact, RecoverLevel, Vec<String>), RecoveryError> {
    let mut log = Vec::new();
    let entry = catalog.versions.get(&id.version).cloned().unwrap_or_default();
    let ra = entry.ranks.get(&id.rank).cloned().unwrap_or_default();
    let expect = ra.digest;
    let mut note = |level: RecoverLevel, outcome: String| {
        let line = recover_line(id, level, &outcome);
        info!("{line}");
        log.push(line);
    };
    let skip_reason = |s: &Source| match s.state {
        Availability::Absent => "skip:absent".to_string(),
        _ => format!("skip:{}", sanitize(s.reason.as_deref().unwrap_or("invalid"))),
    };

    // L1: use in place.
    if let (true, Some(path)) = (ra.l1.is_valid(), ra.l1.path.clone()) {
        let src = check_local(&path, id, expect);
        if src.is_valid() {
            note(RecoverLevel::L1, "ok".into());
            let byte_length = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            let tier_index = tiers.iter().position(|t| path.starts_with(t)).unwrap_or(0);
            return Ok((LocalArtifact { path, ckpt: id.clone(), byte_length, tier_index }, RecoverLevel::L1, log));
        }
        note(RecoverLevel::L1, format!("fail:{}", sanitize(src.reason.as_deref().unwrap_or("stale"))));
    } else {
        note(RecoverLevel::L1, skip_reason(&ra.l1));
    }

    // Partner copy.
    if let (true, Some(path)) = (ra.partner.is_valid(), ra.partner.path.clone()) {
        let result = std::fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| checked(&b, id, expect).map(|h| (b, h)))
            .and_then(|(b, h)| install(&b, &h, id, tiers, group, false));
        match result {
            Ok(art) => {
                note(RecoverLevel::Partner, "ok".into());
                return Ok((art, RecoverLevel::Partner, log));
            }
            Err(e) => note(RecoverLevel::Partner, format!("fail:{}", sanitize(&e))),
        }
    } else {
        note(RecoverLevel::Partner, skip_reason(&ra.partner));
    }

    // XOR decode from the other members' local copies.
    match group.redundancy {
        Redundancy::Xor { group_size } => match decode_member(id, &entry, group_size) {
            Ok(bytes) => match checked(&bytes, id, expect).and_then(|h| install(&bytes, &h, id, tiers, group, false)) {
                Ok(art) => {
                    note(RecoverLevel::Xor, "ok".into());
                    return Ok((art, RecoverLevel::Xor, log));
                }
                Err(e) => note(RecoverLevel::Xor, format!("fail:{}", sanitize(&e))),
            },
            Err(e) => note(RecoverLevel::Xor, e),
        },
        _ => note(RecoverLevel::Xor, "skip:not_configured".into()),
    }

    // Repository.
    match (repo, ra.l3.is_valid()) {
        (Some(repo), true) => {
            let result = repo
                .get(&data_key(id))
                .map_err(|e| e.to_string())
                .and_then(|b| b.ok_or_else(|| "object missing".to_string()))
                .and_then(|b| checked(&b, id, expect).map(|h| (b, h)))
                .and_then(|(b, h)| install(&b, &h, id, tiers, group, true));
            match result {
                Ok(art) => {
                    note(RecoverLevel::L3, "ok".into());
                    return Ok((art, RecoverLevel::L3, log));
                }
                Err(e) => note(RecoverLevel::L3, format!("fail:{}", sanitize(&e))),
            }
        }
        (None, _) => note(RecoverLevel::L3, "skip:no_repository".into()),
        (Some(_), false) => note(RecoverLevel::L3, skip_reason(&ra.l3)),
    }

    Err(RecoveryError::Unrecoverable { id: id.clone(), detail: "every level failed".into(), log })
}

fn decode_member(id: &CheckpointId, entry: &VersionEntry, group_size: u32) -> Result<Vec<u8>, String> {
    let group = XorGroup::of_rank(id.rank, group_size);
    let parity_src = entry.parity.get(&group.index).filter(|s| s.is_valid()).ok_or("skip:no_valid_parity")?;
    let parity_path = parity_src.path.as_ref().ok_or("skip:no_valid_parity")?;
    let mut survivors = Vec::new();
    for r in group.member_ranks.iter().filter(|&&r| r != id.rank) {
        let path = entry
            .ranks
            .get(r)
            .and_then(|ra| ra.local_source())
            .ok_or_else(|| format!("skip:member_r{r}_also_missing"))?;
        survivors.push(std::fs::read(path).map_err(|e| format!("fail:{}", sanitize(&e.to_string())))?);
    }
    let parity = std::fs::read(parity_path)
        .map_err(|e| e.to_string())
        .and_then(|b| ParityBlock::parse(&b).map_err(|e| e.to_string()))
        .map_err(|e| format!("fail:{}", sanitize(&e)))?;
    let refs: Vec<&[u8]> = survivors.iter().map(Vec::as_slice).collect();
    let pos = group.position(id.rank).expect("rank belongs to its group");
    xor_decode(&refs, &parity, pos).map_err(|e| format!("fail:{}", sanitize(&e.to_string())))
}
