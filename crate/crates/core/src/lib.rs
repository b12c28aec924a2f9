//! Multi-level checkpoint-restart runtime: data model, configuration, the
//! priority pipeline, resilience levels, recovery, interval optimization and
//! the backend wire format.

pub mod config;
pub mod fsutil;
pub mod interval;
pub mod model;
pub mod pipeline;
pub mod recovery;
pub mod resilience;
pub mod wire;

pub use config::{Config, ConfigError, Mode, Redundancy};
pub use model::{
    manifest_digest, CheckpointId, CheckpointManifest, Digest, Level, LevelStatus, Outcome, OutcomeCode,
    RegionDescriptor,
};
