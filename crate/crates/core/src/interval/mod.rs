//! Checkpoint interval selection: the Young/Daly closed form, a
//! discrete-event failure simulator, grid search over it, and a regression
//! surrogate that prunes the grid.

pub mod optimize;
pub mod sim;
pub mod surrogate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optimize::{optimize_interval, GridPoint, Optimum};
pub use sim::{simulate, SimResult};
pub use surrogate::{fit_surrogate, guided_search, GuidedResult, Sample, Surrogate};

#[derive(Debug, Error, PartialEq)]
pub enum IntervalError {
    #[error("non-positive input: {0}")]
    NonpositiveInput(String),
    #[error("{0} samples, at least {min} needed", min = surrogate::MIN_SAMPLES)]
    InsufficientSamples(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl IntervalError {
    pub fn code(&self) -> &'static str {
        match self {
            IntervalError::NonpositiveInput(_) => "NONPOSITIVE_INPUT",
            IntervalError::InsufficientSamples(_) => "INSUFFICIENT_SAMPLES",
            IntervalError::InvalidSchedule(_) => "INVALID_SCHEDULE",
            IntervalError::InvalidScenario(_) => "INVALID_SCENARIO",
        }
    }
}

/// One resilience level: checkpoint cost `C`, mean time between failures
/// that need this level or above `M`, and recovery cost `R`, all seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub cost: f64,
    #[serde(with = "mtbf_serde")]
    pub mtbf: f64,
    #[serde(default)]
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub levels: Vec<LevelSpec>,
}

impl LevelParams {
    pub fn single(cost: f64, mtbf: f64, recovery: f64) -> Self {
        Self { levels: vec![LevelSpec { cost, mtbf, recovery }] }
    }

    /// Hard errors for non-positive values; warnings for costs that fall
    /// with level.
    pub fn validate(&self) -> Result<Vec<String>, IntervalError> {
        if self.levels.is_empty() {
            return Err(IntervalError::InvalidScenario("no levels".into()));
        }
        let mut warnings = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            if !positive(l.cost) || !positive(l.mtbf) || l.recovery.is_nan() || l.recovery < 0.0 || !l.cost.is_finite() {
                return Err(IntervalError::NonpositiveInput(format!("level {}: {l:?}", i + 1)));
            }
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            if w[1].cost < w[0].cost {
                warnings.push(format!("level {} cost {} below level {} cost {}", i + 2, w[1].cost, i + 1, w[0].cost));
            }
        }
        Ok(warnings)
    }
}

/// Compute interval `T` and, per level, every how many boundaries that
/// level is checkpointed (counted from the start of the run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub interval: f64,
    pub cadence: Vec<u32>,
}

impl Schedule {
    pub fn new(interval: f64, cadence: Vec<u32>) -> Self {
        Self { interval, cadence }
    }

    /// Every level at every boundary.
    pub fn every_boundary(interval: f64, levels: usize) -> Self {
        Self { interval, cadence: vec![1; levels] }
    }

    pub fn validate(&self, levels: usize) -> Result<(), IntervalError> {
        if !positive(self.interval) || !self.interval.is_finite() {
            return Err(IntervalError::InvalidSchedule(format!("interval {}", self.interval)));
        }
        if self.cadence.len() != levels || self.cadence.contains(&0) {
            return Err(IntervalError::InvalidSchedule(format!("cadence {:?} for {levels} levels", self.cadence)));
        }
        Ok(())
    }
}

/// False for NaN.
fn positive(x: f64) -> bool {
    x > 0.0
}

pub fn young_daly(cost: f64, mtbf: f64) -> Result<f64, IntervalError> {
    if !positive(cost) || !positive(mtbf) {
        return Err(IntervalError::NonpositiveInput(format!("C={cost}, M={mtbf}")));
    }
    Ok((2.0 * cost * mtbf).sqrt())
}

/// Interval-search scenario as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub levels: Vec<LevelSpec>,
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub reps: u32,
    pub seed: u64,
    /// Defaults to 1 for every level.
    #[serde(default)]
    pub cadence: Option<Vec<u32>>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, IntervalError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| IntervalError::InvalidScenario(e.to_string()))?;
        s.params().validate()?;
        if !positive(s.horizon) {
            return Err(IntervalError::NonpositiveInput(format!("horizon {}", s.horizon)));
        }
        if s.grid.is_empty() || s.reps == 0 {
            return Err(IntervalError::InvalidScenario("grid must be non-empty and reps >= 1".into()));
        }
        for &t in &s.grid {
            Schedule::new(t, s.cadence()).validate(s.levels.len())?;
        }
        Ok(s)
    }

    pub fn params(&self) -> LevelParams {
        LevelParams { levels: self.levels.clone() }
    }

    pub fn cadence(&self) -> Vec<u32> {
        self.cadence.clone().unwrap_or_else(|| vec![1; self.levels.len()])
    }

    pub fn run(&self) -> Optimum {
        optimize_interval(&self.params(), &self.cadence(), self.horizon, &self.grid, self.reps, self.seed)
    }
}

/// CSV rows `T,mean_eff,stderr`, header included.
pub fn render_csv(points: &[GridPoint]) -> String {
    let mut out = String::from("T,mean_eff,stderr\n");
    for p in points {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.interval, p.mean, p.stderr));
    }
    out
}

/// `mtbf` accepts a number, `null`, or `"inf"`; infinity is written as
/// `"inf"`.
mod mtbf_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
        Null(()),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(n),
            Raw::Null(()) => Ok(f64::INFINITY),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad mtbf {s:?}"))),
        }
    }
}
