use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sim::simulate;
use super::{LevelParams, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub interval: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub interval: f64,
    pub mean: f64,
    /// In the order evaluated.
    pub points: Vec<GridPoint>,
    pub simulator_calls: u64,
}

/// Mean and standard error of efficiency over seeds
/// `base_seed..base_seed + reps`.
pub fn evaluate(
    params: &LevelParams,
    cadence: &[u32],
    horizon: f64,
    interval: f64,
    reps: u32,
    base_seed: u64,
) -> GridPoint {
    let schedule = Schedule::new(interval, cadence.to_vec());
    let effs: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|i| simulate(params, &schedule, horizon, base_seed.wrapping_add(i)).efficiency)
        .collect();
    let n = effs.len() as f64;
    let mean = effs.iter().sum::<f64>() / n;
    let stderr = if effs.len() > 1 {
        (effs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    GridPoint { interval, mean, stderr }
}

/// Best of `points` by mean; equal means go to the smaller interval.
pub fn best_point(points: &[GridPoint]) -> Option<&GridPoint> {
    points.iter().fold(None, |best: Option<&GridPoint>, p| match best {
        Some(b) if b.mean > p.mean || (b.mean == p.mean && b.interval <= p.interval) => Some(b),
        _ => Some(p),
    })
}

/// Grid search with common random numbers: every grid point sees the same
/// seeds. `grid` must be non-empty and `reps >= 1`.
pub fn optimize_interval(
    params: &LevelParams,
    cadence: &[u32],
    horizon: f64,
    grid: &[f64],
    reps: u32,
    base_seed: u64,
) -> Optimum {
    let points: Vec<GridPoint> =
        grid.iter().map(|&t| evaluate(params, cadence, horizon, t, reps, base_seed)).collect();
    let best = best_point(&points).expect("non-empty grid").clone();
    Optimum { interval: best.interval, mean: best.mean, simulator_calls: grid.len() as u64 * reps as u64, points }
}

/// Distance in grid positions between two grid values (grid sorted
/// ascending); `None` if either is off-grid.
pub fn grid_steps(grid: &[f64], a: f64, b: f64) -> Option<usize> {
    let ia = grid.iter().position(|&g| g == a)?;
    let ib = grid.iter().position(|&g| g == b)?;
    Some(ia.abs_diff(ib))
}
