//! Resilience levels: tiered node-local writes (L1), partner copies and XOR
//! parity (L2), and flushes to an external repository (L3), plus the
//! pipeline stages that drive them.

pub mod flush;
pub mod format;
pub mod kv;
pub mod layout;
pub mod local;
pub mod partner;
pub mod repo;
pub mod stages;
pub mod xor;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::{CheckpointId, ModelError};

pub use flush::{flush, RetryPolicy};
pub use format::{read_header, verify_artifact, ArtifactHeader};
pub use local::write_local;
pub use partner::partner_replicate;
pub use repo::{repo_open, RepositoryBackend};
pub use xor::{xor_decode, xor_encode, ParityBlock};

#[derive(Debug, Error)]
pub enum ResilienceError {
    #[error("no scratch tier could hold the artifact: {0}")]
    NoTierFits(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("partner distance maps rank onto itself")]
    SelfPartner,
    #[error("empty group")]
    EmptyGroup,
    #[error("{missing} members missing, XOR recovers at most one")]
    TooManyMissing { missing: usize },
    #[error("repository unavailable: {0}")]
    RepoUnavailable(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
    #[error("unknown locator scheme in {0:?}")]
    UnknownScheme(String),
    #[error("store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("no regions to write")]
    EmptyRegions,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ResilienceError {
    pub fn code(&self) -> &'static str {
        match self {
            ResilienceError::NoTierFits(_) => "NO_TIER_FITS",
            ResilienceError::Io(_) => "IO_ERROR",
            ResilienceError::Malformed(_) => "MALFORMED",
            ResilienceError::SelfPartner => "SELF_PARTNER",
            ResilienceError::EmptyGroup => "EMPTY_GROUP",
            ResilienceError::TooManyMissing { .. } => "TOO_MANY_MISSING",
            ResilienceError::RepoUnavailable(_) => "REPO_UNAVAILABLE",
            ResilienceError::VerifyFailed(_) => "VERIFY_FAILED",
            ResilienceError::UnknownScheme(_) => "UNKNOWN_SCHEME",
            ResilienceError::StoreCorrupt(_) => "STORE_CORRUPT",
            ResilienceError::InvalidKey(_) => "INVALID_KEY",
            ResilienceError::EmptyRegions => "EMPTY_REGIONS",
            ResilienceError::Model(e) => e.code(),
        }
    }
}

/// A checkpoint file on node-local scratch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalArtifact {
    pub path: PathBuf,
    pub ckpt: CheckpointId,
    pub byte_length: u64,
    pub tier_index: usize,
}

impl LocalArtifact {
    pub fn manifest_path(&self) -> PathBuf {
        self.path.with_extension("manifest")
    }
}
