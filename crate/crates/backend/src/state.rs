//! Completion watermarks, persisted as `backend.state`:
//! `{"watermarks": {name: {rank: version}}}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use mlckpt_core::fsutil::write_atomic;

pub const STATE_FILE: &str = "backend.state";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Watermarks {
    pub watermarks: BTreeMap<String, BTreeMap<u32, u32>>,
}

impl Watermarks {
    /// Raises the (name, rank) watermark to `version`. Returns false if it
    /// was already there or higher.
    pub fn raise(&mut self, name: &str, rank: u32, version: u32) -> bool {
        let slot = self.watermarks.entry(name.to_string()).or_default().entry(rank).or_insert(0);
        if version > *slot {
            *slot = version;
            true
        } else {
            false
        }
    }

    pub fn get(&self, name: &str, rank: u32) -> Option<u32> {
        self.watermarks.get(name)?.get(&rank).copied()
    }

    /// Minimum over ranks `0..num_ranks`; None unless every rank has one.
    pub fn group(&self, name: &str, num_ranks: u32) -> Option<u32> {
        let per_rank = self.watermarks.get(name)?;
        (0..num_ranks).map(|r| per_rank.get(&r).copied()).min().flatten()
    }
}

/// Outcome of loading the state file.
#[derive(Debug, PartialEq, Eq)]
pub enum Loaded {
    Fresh,
    Resumed,
    /// The file existed but did not parse; the backend starts empty.
    Corrupt(String),
}

pub struct StateStore {
    path: PathBuf,
    current: Watermarks,
}

impl StateStore {
    pub fn open(scratch0: &Path) -> (Self, Loaded) {
        let path = scratch0.join(STATE_FILE);
        let (current, loaded) = match std::fs::read(&path) {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (Watermarks::default(), Loaded::Fresh),
            Err(e) => (Watermarks::default(), Loaded::Corrupt(e.to_string())),
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(w) => (w, Loaded::Resumed),
                Err(e) => (Watermarks::default(), Loaded::Corrupt(e.to_string())),
            },
        };
        if let Loaded::Corrupt(detail) = &loaded {
            warn!("STATE_CORRUPT: {}: {detail}; starting with empty watermarks", path.display());
        }
        (Self { path, current }, loaded)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn watermarks(&self) -> &Watermarks {
        &self.current
    }

    /// Raises and persists. Write failures are logged; the in-memory value
    /// still advances.
    pub fn raise(&mut self, name: &str, rank: u32, version: u32) -> bool {
        if !self.current.raise(name, rank, version) {
            return false;
        }
        let json = serde_json::to_vec_pretty(&self.current).expect("watermarks serialize");
        if let Err(e) = write_atomic(&self.path, &json) {
            warn!("cannot persist {}: {e}", self.path.display());
        }
        true
    }
}
