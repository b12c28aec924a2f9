//! Shared data model: levels, region descriptors, checkpoint identities,
//! manifests and pipeline outcomes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid checkpoint name {0:?}")]
    InvalidName(String),
    #[error("zero-sized region {0}")]
    ZeroSize(u32),
    #[error("level ordering violated: {0}")]
    LevelOrder(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::InvalidName(_) => "INVALID_NAME",
            ModelError::ZeroSize(_) => "ZERO_SIZE",
            ModelError::LevelOrder(_) => "LEVEL_ORDER",
            ModelError::MalformedManifest(_) => "MALFORMED",
            ModelError::Io(_) => "IO_ERROR",
        }
    }
}

/// Resilience level of a checkpoint copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    L1Local,
    L2Partner,
    L2Xor,
    L3Repository,
}

impl Level {
    /// Resilience strength: L1 < L2 (partner and XOR tie) < L3.
    pub fn strength(self) -> u8 {
        match self {
            Level::L1Local => 1,
            Level::L2Partner | Level::L2Xor => 2,
            Level::L3Repository => 3,
        }
    }

    pub fn cmp_strength(self, other: Level) -> std::cmp::Ordering {
        self.strength().cmp(&other.strength())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LevelStatus {
    Absent,
    InProgress,
    Complete,
    Failed,
}

impl LevelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelStatus::Absent => "ABSENT",
            LevelStatus::InProgress => "IN_PROGRESS",
            LevelStatus::Complete => "COMPLETE",
            LevelStatus::Failed => "FAILED",
        }
    }
}

impl fmt::Display for LevelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionDescriptor {
    pub region_id: u32,
    pub element_count: u64,
    pub element_size: u64,
}

impl RegionDescriptor {
    pub fn new(region_id: u32, element_count: u64, element_size: u64) -> Result<Self, ModelError> {
        if element_count == 0 || element_size == 0 {
            return Err(ModelError::ZeroSize(region_id));
        }
        Ok(Self { region_id, element_count, element_size })
    }

    pub fn byte_length(&self) -> u64 {
        self.element_count * self.element_size
    }
}

/// Identity of one rank's share of a named, versioned checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CheckpointId {
    pub name: String,
    pub version: u32,
    pub rank: u32,
}

pub fn validate_name(name: &str) -> Result<(), ModelError> {
    let ok = (1..=128).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidName(name.to_string()))
    }
}

impl CheckpointId {
    pub fn new(name: impl Into<String>, version: u32, rank: u32) -> Result<Self, ModelError> {
        let name = name.into();
        validate_name(&name)?;
        Ok(Self { name, version, rank })
    }

    /// Stem shared by the artifact and manifest files: `<name>-v<version>-r<rank>`.
    pub fn stem(&self) -> String {
        format!("{}-v{}-r{}", self.name, self.version, self.rank)
    }

    pub fn artifact_file_name(&self) -> String {
        format!("{}.ckpt", self.stem())
    }

    pub fn manifest_file_name(&self) -> String {
        format!("{}.manifest", self.stem())
    }

    /// Parses `<name>-v<version>-r<rank>` (without extension).
    pub fn parse_stem(stem: &str) -> Option<Self> {
        let (rest, rank) = stem.rsplit_once("-r")?;
        let (name, version) = rest.rsplit_once("-v")?;
        let id = CheckpointId {
            name: name.to_string(),
            version: version.parse().ok()?,
            rank: rank.parse().ok()?,
        };
        validate_name(&id.name).ok()?;
        Some(id)
    }
}

impl fmt::Display for CheckpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} v{} r{}", self.name, self.version, self.rank)
    }
}

/// SHA-256 content digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("digest must be 64 hex digits"))
    }
}

/// SHA-256 over the concatenation of `payloads`, in order.
pub fn manifest_digest<I, B>(payloads: I) -> Digest
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for p in payloads {
        hasher.update(p.as_ref());
    }
    Digest(hasher.finalize().into())
}

/// Per-level status as recorded in a manifest. L2 covers both partner and
/// XOR redundancy since only one of them is active per configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStatuses {
    pub l1: LevelStatus,
    pub l2: LevelStatus,
    pub l3: LevelStatus,
}

impl Default for LevelStatuses {
    fn default() -> Self {
        Self { l1: LevelStatus::Absent, l2: LevelStatus::Absent, l3: LevelStatus::Absent }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointManifest {
    pub id: CheckpointId,
    pub regions: Vec<RegionDescriptor>,
    pub digest: Digest,
    pub levels: LevelStatuses,
    pub created_at: u64,
    pub group_size: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRegionJson {
    id: u32,
    count: u64,
    size: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    name: String,
    version: u32,
    rank: u32,
    group_size: u32,
    created_at: u64,
    regions: Vec<ManifestRegionJson>,
    digest: String,
    levels: BTreeMap<String, LevelStatus>,
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl CheckpointManifest {
    pub fn new(id: CheckpointId, regions: Vec<RegionDescriptor>, digest: Digest, group_size: u32) -> Self {
        Self {
            id,
            regions,
            digest,
            levels: LevelStatuses::default(),
            created_at: now_secs(),
            group_size,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.regions.iter().map(RegionDescriptor::byte_length).sum()
    }

    pub fn status(&self, level: Level) -> LevelStatus {
        match level {
            Level::L1Local => self.levels.l1,
            Level::L2Partner | Level::L2Xor => self.levels.l2,
            Level::L3Repository => self.levels.l3,
        }
    }

    /// Updates one level's status. L2/L3 may only become IN_PROGRESS or
    /// COMPLETE once L1 is COMPLETE.
    pub fn set_status(&mut self, level: Level, status: LevelStatus) -> Result<(), ModelError> {
        let upper = level != Level::L1Local;
        if upper
            && matches!(status, LevelStatus::InProgress | LevelStatus::Complete)
            && self.levels.l1 != LevelStatus::Complete
        {
            return Err(ModelError::LevelOrder(format!(
                "{} set to {status} while L1 is {}",
                match level {
                    Level::L3Repository => "L3",
                    _ => "L2",
                },
                self.levels.l1
            )));
        }
        match level {
            Level::L1Local => self.levels.l1 = status,
            Level::L2Partner | Level::L2Xor => self.levels.l2 = status,
            Level::L3Repository => self.levels.l3 = status,
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = ManifestJson {
            name: self.id.name.clone(),
            version: self.id.version,
            rank: self.id.rank,
            group_size: self.group_size,
            created_at: self.created_at,
            regions: self
                .regions
                .iter()
                .map(|r| ManifestRegionJson { id: r.region_id, count: r.element_count, size: r.element_size })
                .collect(),
            digest: self.digest.to_hex(),
            levels: [("L1", self.levels.l1), ("L2", self.levels.l2), ("L3", self.levels.l3)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ManifestJson =
            serde_json::from_str(text).map_err(|e| ModelError::MalformedManifest(e.to_string()))?;
        let id = CheckpointId::new(doc.name, doc.version, doc.rank)?;
        let regions = doc
            .regions
            .into_iter()
            .map(|r| RegionDescriptor::new(r.id, r.count, r.size))
            .collect::<Result<Vec<_>, _>>()?;
        let digest = Digest::from_hex(&doc.digest)
            .filter(|_| doc.digest.len() == 64 && doc.digest.bytes().all(|b| !b.is_ascii_uppercase()))
            .ok_or_else(|| ModelError::MalformedManifest(format!("bad digest {:?}", doc.digest)))?;
        let level = |k: &str| {
            doc.levels
                .get(k)
                .copied()
                .ok_or_else(|| ModelError::MalformedManifest(format!("missing level {k}")))
        };
        let levels = LevelStatuses { l1: level("L1")?, l2: level("L2")?, l3: level("L3")? };
        if doc.levels.len() != 3 {
            return Err(ModelError::MalformedManifest("unexpected level keys".into()));
        }
        Ok(Self { id, regions, digest, levels, created_at: doc.created_at, group_size: doc.group_size })
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Atomic write (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        crate::fsutil::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeCode {
    Ok,
    Deferred,
    Skipped,
    Failure,
}

/// Result of a pipeline stage or client operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub code: OutcomeCode,
    pub detail: String,
}

impl Outcome {
    pub fn ok(detail: impl Into<String>) -> Self {
        Self { code: OutcomeCode::Ok, detail: detail.into() }
    }
    pub fn deferred(detail: impl Into<String>) -> Self {
        Self { code: OutcomeCode::Deferred, detail: detail.into() }
    }
    pub fn skipped(detail: impl Into<String>) -> Self {
        Self { code: OutcomeCode::Skipped, detail: detail.into() }
    }
    pub fn failure(detail: impl Into<String>) -> Self {
        Self { code: OutcomeCode::Failure, detail: detail.into() }
    }
    pub fn is_ok(&self) -> bool {
        self.code == OutcomeCode::Ok
    }
    pub fn is_skipped(&self) -> bool {
        self.code == OutcomeCode::Skipped
    }
    pub fn is_failure(&self) -> bool {
        self.code == OutcomeCode::Failure
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let code = match self.code {
            OutcomeCode::Ok => "OK",
            OutcomeCode::Deferred => "DEFERRED",
            OutcomeCode::Skipped => "SKIPPED",
            OutcomeCode::Failure => "FAILURE",
        };
        if self.detail.is_empty() {
            f.write_str(code)
        } else {
            write!(f, "{code}: {}", self.detail)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_vectors() {
        let empty: [&[u8]; 0] = [];
        assert_eq!(
            manifest_digest(empty).to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            manifest_digest([b"abc"]).to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(manifest_digest([&b"ab"[..], &b"c"[..]]), manifest_digest([b"abc"]));
    }

    #[test]
    fn level_strength_order() {
        assert!(Level::L1Local.strength() < Level::L2Partner.strength());
        assert_eq!(Level::L2Partner.cmp_strength(Level::L2Xor), std::cmp::Ordering::Equal);
        assert!(Level::L2Xor.strength() < Level::L3Repository.strength());
    }

    #[test]
    fn names() {
        assert!(CheckpointId::new("hacc_1.x-y", 1, 0).is_ok());
        assert!(CheckpointId::new("", 1, 0).is_err());
        assert!(CheckpointId::new("a/b", 1, 0).is_err());
        assert!(CheckpointId::new("x".repeat(129), 1, 0).is_err());
        let id = CheckpointId::new("my-app-v2", 17, 3).unwrap();
        assert_eq!(CheckpointId::parse_stem(&id.stem()), Some(id));
    }

    #[test]
    fn region_zero_size() {
        assert!(matches!(RegionDescriptor::new(1, 0, 8), Err(ModelError::ZeroSize(1))));
        assert!(matches!(RegionDescriptor::new(1, 8, 0), Err(ModelError::ZeroSize(1))));
        assert_eq!(RegionDescriptor::new(0, 256, 4).unwrap().byte_length(), 1024);
    }

    #[test]
    fn manifest_json_shape_and_round_trip() {
        let id = CheckpointId::new("hacc", 2, 1).unwrap();
        let mut m = CheckpointManifest::new(
            id,
            vec![RegionDescriptor::new(0, 4, 8).unwrap()],
            manifest_digest([b"abc"]),
            4,
        );
        m.set_status(Level::L1Local, LevelStatus::Complete).unwrap();
        let text = m.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["created_at", "digest", "group_size", "levels", "name", "rank", "regions", "version"]);
        assert_eq!(v["levels"]["L1"], "COMPLETE");
        assert_eq!(v["levels"]["L3"], "ABSENT");
        assert_eq!(v["regions"][0]["count"], 4);
        assert_eq!(CheckpointManifest::from_json(&text).unwrap(), m);
    }

    #[test]
    fn upper_levels_require_l1() {
        let id = CheckpointId::new("a", 1, 0).unwrap();
        let mut m = CheckpointManifest::new(id, vec![], manifest_digest([b""]), 1);
        assert!(m.set_status(Level::L3Repository, LevelStatus::InProgress).is_err());
        assert!(m.set_status(Level::L2Xor, LevelStatus::Failed).is_ok());
        m.set_status(Level::L1Local, LevelStatus::Complete).unwrap();
        m.set_status(Level::L3Repository, LevelStatus::Complete).unwrap();
        assert_eq!(m.status(Level::L3Repository), LevelStatus::Complete);
    }
}
