//! INI-style `key = value` configuration.
//!
//! ```text
//! # comment
//! scratch = /dev/shm/ckpt, /tmp/ckpt
//! persistent = file:///var/ckpt
//! mode = async
//! xor_group_size = 4
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsutil::normalize_path;
use crate::interval::{LevelParams, LevelSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("{key}: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("missing required key {0}")]
    MissingRequired(&'static str),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::MalformedLine { .. } => "MALFORMED_LINE",
            ConfigError::InvalidValue { .. } => "INVALID_VALUE",
            ConfigError::MissingRequired(_) => "MISSING_REQUIRED",
        }
    }
}

fn invalid(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.to_string(), detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        }
    }
}

/// Level-2 redundancy scheme. Partner and XOR are mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redundancy {
    None,
    Partner { distance: u32 },
    Xor { group_size: u32 },
}

/// Per-level cost/MTBF settings used to derive checkpoint cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSettings {
    /// `(cost, mtbf)` for levels 1..=n, contiguous from level 1.
    pub levels: Vec<(f64, f64)>,
    pub recovery_cost: f64,
}

impl IntervalSettings {
    pub fn to_level_params(&self) -> LevelParams {
        LevelParams {
            levels: self
                .levels
                .iter()
                .map(|&(cost, mtbf)| LevelSpec { cost, mtbf, recovery: self.recovery_cost })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub scratch_tiers: Vec<PathBuf>,
    pub persistent: String,
    pub mode: Mode,
    pub redundancy: Redundancy,
    pub interval: Option<IntervalSettings>,
    pub backend_endpoint: PathBuf,
    pub max_versions_retained: u32,
}

pub const DEFAULT_MAX_VERSIONS: u32 = 2;

const KEYS: &[&str] = &[
    "scratch",
    "persistent",
    "mode",
    "partner_distance",
    "xor_group_size",
    "backend_endpoint",
    "max_versions_retained",
    "level1_cost",
    "level2_cost",
    "level3_cost",
    "level1_mtbf",
    "level2_mtbf",
    "level3_mtbf",
    "recovery_cost",
];

fn parse_u32(key: &str, value: &str) -> Result<u32, ConfigError> {
    value.parse::<u32>().map_err(|e| invalid(key, format!("{value:?}: {e}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = value.parse::<f64>().map_err(|e| invalid(key, format!("{value:?}: {e}")))?;
    if v.is_nan() || v <= 0.0 {
        return Err(invalid(key, "must be > 0"));
    }
    Ok(v)
}

/// Normalizes the path part of a `file://` or `kv://` locator, keeping any
/// `?query` suffix.
pub fn normalize_locator(locator: &str) -> Result<String, ConfigError> {
    let (scheme, rest) = locator
        .split_once("://")
        .ok_or_else(|| invalid("persistent", format!("{locator:?} has no scheme")))?;
    if scheme != "file" && scheme != "kv" {
        return Err(invalid("persistent", format!("unknown scheme {scheme:?}")));
    }
    let (path, query) = match rest.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (rest, None),
    };
    if path.is_empty() {
        return Err(invalid("persistent", "empty path"));
    }
    let mut out = format!("{scheme}://{}", normalize_path(Path::new(path)).display());
    if let Some(q) = query {
        out.push('?');
        out.push_str(q);
    }
    Ok(out)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut seen = HashSet::new();
        let mut scratch = None;
        let mut persistent = None;
        let mut mode = Mode::Sync;
        let mut partner = None;
        let mut xor = None;
        let mut endpoint = None;
        let mut max_versions = DEFAULT_MAX_VERSIONS;
        let mut costs: [Option<f64>; 3] = [None; 3];
        let mut mtbfs: [Option<f64>; 3] = [None; 3];
        let mut recovery = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |detail: String| ConfigError::MalformedLine { line: line_no, detail };
            let (key, value) =
                line.split_once('=').ok_or_else(|| malformed(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(malformed(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(malformed(format!("duplicate key {key:?}")));
            }
            if value.is_empty() {
                return Err(invalid(key, "empty value"));
            }
            match key {
                "scratch" => {
                    let tiers: Vec<PathBuf> = value
                        .split(',')
                        .map(str::trim)
                        .map(|p| {
                            if p.is_empty() {
                                Err(invalid(key, "empty tier path"))
                            } else {
                                Ok(normalize_path(Path::new(p)))
                            }
                        })
                        .collect::<Result<_, _>>()?;
                    scratch = Some(tiers);
                }
                "persistent" => persistent = Some(normalize_locator(value)?),
                "mode" => {
                    mode = match value {
                        "sync" => Mode::Sync,
                        "async" => Mode::Async,
                        other => return Err(invalid(key, format!("expected sync|async, got {other:?}"))),
                    }
                }
                "partner_distance" => {
                    let d = parse_u32(key, value)?;
                    if d < 1 {
                        return Err(invalid(key, "must be >= 1"));
                    }
                    partner = Some(d);
                }
                "xor_group_size" => {
                    let k = parse_u32(key, value)?;
                    if k < 2 {
                        return Err(invalid(key, "must be >= 2"));
                    }
                    xor = Some(k);
                }
                "backend_endpoint" => endpoint = Some(normalize_path(Path::new(value))),
                "max_versions_retained" => {
                    let n = parse_u32(key, value)?;
                    if n < 1 {
                        return Err(invalid(key, "must be >= 1"));
                    }
                    max_versions = n;
                }
                "recovery_cost" => {
                    let v = value.parse::<f64>().map_err(|e| invalid(key, e.to_string()))?;
                    if v.is_nan() || v < 0.0 || v.is_infinite() {
                        return Err(invalid(key, "must be finite and >= 0"));
                    }
                    recovery = Some(v);
                }
                k => {
                    let lvl = (k.as_bytes()[5] - b'1') as usize;
                    if k.ends_with("_cost") {
                        let v = parse_f64(k, value)?;
                        if v.is_infinite() {
                            return Err(invalid(k, "must be finite"));
                        }
                        costs[lvl] = Some(v);
                    } else {
                        mtbfs[lvl] = Some(parse_f64(k, value)?);
                    }
                }
            }
        }

        let scratch_tiers = scratch.ok_or(ConfigError::MissingRequired("scratch"))?;
        let persistent = persistent.ok_or(ConfigError::MissingRequired("persistent"))?;
        let redundancy = match (partner, xor) {
            (Some(_), Some(_)) => {
                return Err(invalid("xor_group_size", "partner_distance and xor_group_size are mutually exclusive"))
            }
            (Some(distance), None) => Redundancy::Partner { distance },
            (None, Some(group_size)) => Redundancy::Xor { group_size },
            (None, None) => Redundancy::None,
        };

        let mut levels = Vec::new();
        let mut ended = false;
        for i in 0..3 {
            match (costs[i], mtbfs[i]) {
                (Some(c), Some(m)) if !ended => levels.push((c, m)),
                (None, None) => ended = true,
                (Some(_), Some(_)) => {
                    return Err(invalid(&format!("level{}_cost", i + 1), "levels must be contiguous from level1"))
                }
                (Some(_), None) => return Err(invalid(&format!("level{}_mtbf", i + 1), "missing matching mtbf")),
                (None, Some(_)) => return Err(invalid(&format!("level{}_cost", i + 1), "missing matching cost")),
            }
        }
        let interval = if levels.is_empty() {
            if recovery.is_some() {
                return Err(invalid("recovery_cost", "given without level parameters"));
            }
            None
        } else {
            Some(IntervalSettings { levels, recovery_cost: recovery.unwrap_or(0.0) })
        };

        let backend_endpoint = endpoint.unwrap_or_else(|| scratch_tiers[0].join("backend.sock"));
        Ok(Config {
            scratch_tiers,
            persistent,
            mode,
            redundancy,
            interval,
            backend_endpoint,
            max_versions_retained: max_versions,
        })
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Renders the canonical textual form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let tiers: Vec<String> = self.scratch_tiers.iter().map(|p| p.display().to_string()).collect();
        let _ = writeln!(out, "scratch = {}", tiers.join(", "));
        let _ = writeln!(out, "persistent = {}", self.persistent);
        let _ = writeln!(out, "mode = {}", self.mode.as_str());
        match self.redundancy {
            Redundancy::None => {}
            Redundancy::Partner { distance } => {
                let _ = writeln!(out, "partner_distance = {distance}");
            }
            Redundancy::Xor { group_size } => {
                let _ = writeln!(out, "xor_group_size = {group_size}");
            }
        }
        let _ = writeln!(out, "backend_endpoint = {}", self.backend_endpoint.display());
        let _ = writeln!(out, "max_versions_retained = {}", self.max_versions_retained);
        if let Some(iv) = &self.interval {
            for (i, (c, m)) in iv.levels.iter().enumerate() {
                let _ = writeln!(out, "level{}_cost = {c}", i + 1);
                let _ = writeln!(out, "level{}_mtbf = {m}", i + 1);
            }
            let _ = writeln!(out, "recovery_cost = {}", iv.recovery_cost);
        }
        out
    }

    /// Checks the invariants that depend on the job's rank count.
    pub fn validate_for_ranks(&self, num_ranks: u32) -> Result<(), ConfigError> {
        match self.redundancy {
            Redundancy::Partner { distance } if distance >= num_ranks => Err(invalid(
                "partner_distance",
                format!("distance {distance} must be < number of ranks {num_ranks}"),
            )),
            Redundancy::Xor { group_size } if !num_ranks.is_multiple_of(group_size) => Err(invalid(
                "xor_group_size",
                format!("group size {group_size} does not divide number of ranks {num_ranks}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn repository_locator(&self) -> &str {
        &self.persistent
    }
}
