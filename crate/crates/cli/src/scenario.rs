//! Synthetic application script for `run`.
//!
//! ```json
//! {"num_ranks": 4, "iterations": 3, "cadence": 1,
//!  "regions": {"count": 2, "sizes": [4096, 100], "seed": 7},
//!  "damage": [{"after_version": 2, "action": "delete_l1", "rank": 2}],
//!  "mode": "sync", "name": "app"}
//! ```
//!
//! Iteration `i` (1-based) checkpoints version `i` when `i % cadence == 0`.
//! Damage applies once version `after_version` has finished on every rank.

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use mlckpt_core::config::Mode;
use mlckpt_core::model::validate_name;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub count: u32,
    /// One size for every region, or one per region.
    pub sizes: Vec<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    DeleteL1 { rank: u32 },
    CorruptL1 { rank: u32 },
    DeletePartner { rank: u32 },
    CorruptRepo { rank: u32 },
    KillBackend,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::DeleteL1 { .. } => "delete_l1",
            Action::CorruptL1 { .. } => "corrupt_l1",
            Action::DeletePartner { .. } => "delete_partner",
            Action::CorruptRepo { .. } => "corrupt_repo",
            Action::KillBackend => "kill_backend",
        }
    }

    pub fn rank(&self) -> Option<u32> {
        match *self {
            Action::DeleteL1 { rank }
            | Action::CorruptL1 { rank }
            | Action::DeletePartner { rank }
            | Action::CorruptRepo { rank } => Some(rank),
            Action::KillBackend => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Damage {
    pub after_version: u32,
    #[serde(flatten)]
    pub action: Action,
}

fn default_cadence() -> u32 {
    1
}

fn default_name() -> String {
    "app".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunScenario {
    pub num_ranks: u32,
    pub regions: RegionSpec,
    pub iterations: u32,
    #[serde(default = "default_cadence")]
    pub cadence: u32,
    #[serde(default)]
    pub damage: Vec<Damage>,
    /// Overrides the config file's mode.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default = "default_name")]
    pub name: String,
}

fn invalid(detail: impl Into<String>) -> CliError {
    CliError::new("INVALID_SCENARIO", detail)
}

impl RunScenario {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let s: RunScenario = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_error(&path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        validate_name(&self.name).map_err(|e| invalid(e.to_string()))?;
        if self.num_ranks == 0 || self.iterations == 0 || self.cadence == 0 {
            return Err(invalid("num_ranks, iterations and cadence must be >= 1"));
        }
        let r = &self.regions;
        if r.count == 0 || !(r.sizes.len() == 1 || r.sizes.len() == r.count as usize) {
            return Err(invalid("regions.sizes must hold 1 or regions.count entries"));
        }
        if r.sizes.contains(&0) {
            return Err(invalid("region sizes must be >= 1"));
        }
        let versions = self.versions();
        for d in &self.damage {
            if !versions.contains(&d.after_version) {
                return Err(invalid(format!("damage after v{} which is never checkpointed", d.after_version)));
            }
            if d.action.rank().is_some_and(|rank| rank >= self.num_ranks) {
                return Err(invalid(format!("{} targets rank outside 0..{}", d.action.name(), self.num_ranks)));
            }
        }
        Ok(())
    }

    pub fn region_sizes(&self) -> Vec<u64> {
        let r = &self.regions;
        if r.sizes.len() == 1 {
            vec![r.sizes[0]; r.count as usize]
        } else {
            r.sizes.clone()
        }
    }

    pub fn versions(&self) -> Vec<u32> {
        (1..=self.iterations).filter(|i| i % self.cadence == 0).collect()
    }

    /// Versions grouped into phases separated by damage points.
    pub fn phases(&self) -> Vec<Vec<u32>> {
        let cuts: std::collections::BTreeSet<u32> = self.damage.iter().map(|d| d.after_version).collect();
        let mut phases = vec![Vec::new()];
        for v in self.versions() {
            phases.last_mut().unwrap().push(v);
            if cuts.contains(&v) {
                phases.push(Vec::new());
            }
        }
        if phases.last().is_some_and(Vec::is_empty) {
            phases.pop();
        }
        phases
    }

    /// Damage applied after the given phase.
    pub fn damage_after(&self, phase: &[u32]) -> Vec<Damage> {
        let last = phase.last().copied();
        self.damage.iter().copied().filter(|d| Some(d.after_version) == last).collect()
    }
}

/// Deterministic content of one region at one version.
pub fn fill_pattern(seed: u64, rank: u32, region: u32, version: u32, len: usize) -> Vec<u8> {
    let mix = seed
        ^ (u64::from(rank)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (u64::from(region)).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (u64::from(version)).wrapping_mul(0x1656_67b1_9e37_79f9);
    let mut out = vec![0u8; len];
    StdRng::seed_from_u64(mix).fill_bytes(&mut out);
    out
}
