//! Least-squares efficiency surrogate.
//!
//! Features of (params, cadence, T), with `u = ln T` and
//! `K_i = min_{m >= i} k_m` the effective spacing of checkpoints that
//! survive a level-i failure:
//!
//! ```text
//! u, u^2, u^3,
//! a = sum C_i / (k_i T)        checkpoint overhead
//! b = sum K_i T / (2 M_i)      expected rework
//! c = sum R_i / M_i            recovery overhead
//! a * b
//! ```
//!
//! Columns are standardized and constant ones dropped before an SVD solve
//! with an intercept. A rank-deficient system falls back to predicting the
//! efficiency of the nearest training sample in standardized feature space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::optimize::{best_point, evaluate, GridPoint};
use super::{IntervalError, LevelParams};

pub const MIN_SAMPLES: usize = 10;
const NUM_FEATURES: usize = 7;
const RANK_TOL: f64 = 1e-10;
const MIN_PREDICTION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub params: LevelParams,
    pub cadence: Vec<u32>,
    pub interval: f64,
    pub efficiency: f64,
}

pub fn features(params: &LevelParams, cadence: &[u32], interval: f64) -> [f64; NUM_FEATURES] {
    let u = interval.ln();
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (i, l) in params.levels.iter().enumerate() {
        let k = cadence.get(i).copied().unwrap_or(1).max(1) as f64;
        let eff_k = cadence.get(i..).and_then(|s| s.iter().copied().min()).unwrap_or(1).max(1) as f64;
        a += l.cost / (k * interval);
        if l.mtbf.is_finite() {
            b += eff_k * interval / (2.0 * l.mtbf);
            c += l.recovery / l.mtbf;
        }
    }
    [u, u * u, u * u * u, a, b, c, a * b]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Model {
    Linear { intercept: f64, coef: Vec<f64> },
    Nearest { points: Vec<Vec<f64>>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    keep: Vec<usize>,
    means: Vec<f64>,
    stds: Vec<f64>,
    model: Model,
}

impl Surrogate {
    pub fn is_degenerate(&self) -> bool {
        matches!(self.model, Model::Nearest { .. })
    }

    fn standardize(&self, f: &[f64; NUM_FEATURES]) -> Vec<f64> {
        self.keep.iter().enumerate().map(|(j, &col)| (f[col] - self.means[j]) / self.stds[j]).collect()
    }

    pub fn predict(&self, params: &LevelParams, cadence: &[u32], interval: f64) -> f64 {
        let x = self.standardize(&features(params, cadence, interval));
        let raw = match &self.model {
            Model::Linear { intercept, coef } => intercept + x.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>(),
            Model::Nearest { points, values } => {
                let dist = |p: &Vec<f64>| p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let (i, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist(p)))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
                values[i]
            }
        };
        if raw.is_nan() {
            MIN_PREDICTION
        } else {
            raw.clamp(MIN_PREDICTION, 1.0)
        }
    }
}

pub fn fit_surrogate(samples: &[Sample]) -> Result<Surrogate, IntervalError> {
    if samples.len() < MIN_SAMPLES {
        return Err(IntervalError::InsufficientSamples(samples.len()));
    }
    let raw: Vec<[f64; NUM_FEATURES]> =
        samples.iter().map(|s| features(&s.params, &s.cadence, s.interval)).collect();
    let n = samples.len() as f64;
    let mut keep = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for col in 0..NUM_FEATURES {
        let mean = raw.iter().map(|r| r[col]).sum::<f64>() / n;
        let std = (raw.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std.is_finite() && std > 1e-12 * (1.0 + mean.abs()) {
            keep.push(col);
            means.push(mean);
            stds.push(std);
        }
    }
    let mut sur = Surrogate { keep, means, stds, model: Model::Linear { intercept: 0.0, coef: vec![] } };
    let rows: Vec<Vec<f64>> = raw.iter().map(|r| sur.standardize(r)).collect();
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.efficiency));
    let p = sur.keep.len() + 1;
    let x = DMatrix::from_fn(samples.len(), p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });

    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let solved = if min_sv > RANK_TOL * max_sv { svd.solve(&y, RANK_TOL * max_sv).ok() } else { None };
    sur.model = match solved {
        Some(beta) if beta.iter().all(|b| b.is_finite()) => {
            Model::Linear { intercept: beta[0], coef: beta.iter().skip(1).copied().collect() }
        }
        _ => Model::Nearest { points: rows, values: samples.iter().map(|s| s.efficiency).collect() },
    };
    Ok(sur)
}

/// Simulates `params` at every grid point and returns one sample per point.
pub fn collect_samples(
    params: &LevelParams,
    cadence: &[u32],
    horizon: f64,
    grid: &[f64],
    reps: u32,
    base_seed: u64,
) -> Vec<Sample> {
    grid.iter()
        .map(|&t| Sample {
            params: params.clone(),
            cadence: cadence.to_vec(),
            interval: t,
            efficiency: evaluate(params, cadence, horizon, t, reps, base_seed).mean,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedResult {
    pub interval: f64,
    pub mean: f64,
    pub predicted: Vec<f64>,
    pub evaluated: Vec<GridPoint>,
    pub simulator_calls: u64,
}

/// Ranks the whole grid by prediction, then simulates only the best
/// `ceil(fraction * grid.len())` points with the same seeds a full grid
/// search would use.
#[allow(clippy::too_many_arguments)]
pub fn guided_search(
    surrogate: &Surrogate,
    params: &LevelParams,
    cadence: &[u32],
    horizon: f64,
    grid: &[f64],
    reps: u32,
    base_seed: u64,
    fraction: f64,
) -> GuidedResult {
    let predicted: Vec<f64> = grid.iter().map(|&t| surrogate.predict(params, cadence, t)).collect();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| predicted[j].total_cmp(&predicted[i]).then(grid[i].total_cmp(&grid[j])));
    let top = ((fraction * grid.len() as f64).ceil() as usize).clamp(1, grid.len());
    let evaluated: Vec<GridPoint> =
        order[..top].iter().map(|&i| evaluate(params, cadence, horizon, grid[i], reps, base_seed)).collect();
    let best = best_point(&evaluated).expect("at least one point").clone();
    GuidedResult {
        interval: best.interval,
        mean: best.mean,
        predicted,
        simulator_calls: top as u64 * reps as u64,
        evaluated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::LevelSpec;

    fn params(c: f64, m: f64) -> LevelParams {
        LevelParams::single(c, m, c)
    }

    #[test]
    fn too_few_samples() {
        let s: Vec<Sample> = (0..5)
            .map(|i| Sample { params: params(1.0, 100.0), cadence: vec![1], interval: 10.0 + i as f64, efficiency: 0.5 })
            .collect();
        assert_eq!(fit_surrogate(&s).unwrap_err().code(), "INSUFFICIENT_SAMPLES");
    }

    #[test]
    fn constant_data_predicts_constant() {
        let s: Vec<Sample> = (0..12)
            .map(|i| Sample {
                params: params(1.0 + i as f64 % 3.0, 100.0 * (1 + i % 4) as f64),
                cadence: vec![1],
                interval: 5.0 * (1 + i) as f64,
                efficiency: 0.73,
            })
            .collect();
        let sur = fit_surrogate(&s).unwrap();
        for t in [1.0, 17.0, 300.0] {
            assert!((sur.predict(&params(2.0, 150.0), &[1], t) - 0.73).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_falls_back_to_nearest() {
        // One interval only: every T-derived column is constant or collinear.
        let s: Vec<Sample> = (0..10)
            .map(|i| Sample {
                params: params(1.0, 100.0 + i as f64),
                cadence: vec![1],
                interval: 50.0,
                efficiency: 0.1 + 0.05 * i as f64,
            })
            .collect();
        let sur = fit_surrogate(&s).unwrap();
        assert!(sur.is_degenerate());
        assert!((sur.predict(&params(1.0, 104.0), &[1], 50.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn predictions_clamped() {
        let s: Vec<Sample> = (0..10)
            .map(|i| Sample {
                params: params(1.0, 100.0),
                cadence: vec![1],
                interval: (i + 1) as f64 * 10.0,
                efficiency: 2.0 - 0.01 * i as f64,
            })
            .collect();
        let sur = fit_surrogate(&s).unwrap();
        let p = sur.predict(&params(1.0, 100.0), &[1], 20.0);
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn effective_cadence_feature() {
        let p = LevelParams {
            levels: vec![
                LevelSpec { cost: 1.0, mtbf: 100.0, recovery: 0.0 },
                LevelSpec { cost: 4.0, mtbf: 1000.0, recovery: 0.0 },
            ],
        };
        let f = features(&p, &[2, 1], 10.0);
        // K_1 = min(2, 1) = 1, K_2 = 1.
        assert!((f[4] - (10.0 / 200.0 + 10.0 / 2000.0)).abs() < 1e-12);
        assert!((f[3] - (1.0 / 20.0 + 4.0 / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn guided_matches_full_grid_on_easy_case() {
        let grid: Vec<f64> = (0..10).map(|i| 25.0 * 2f64.powf(i as f64 / 2.0)).collect();
        let mut samples = Vec::new();
        for (i, &(c, m)) in [(5.0, 1000.0), (10.0, 3000.0), (20.0, 8000.0), (8.0, 1500.0)].iter().enumerate() {
            samples.extend(collect_samples(&params(c, m), &[1], 20_000.0, &grid, 10, 100 + i as u64));
        }
        let sur = fit_surrogate(&samples).unwrap();
        let target = params(10.0, 2000.0);
        let full = crate::interval::optimize_interval(&target, &[1], 20_000.0, &grid, 40, 1);
        let guided = guided_search(&sur, &target, &[1], 20_000.0, &grid, 40, 1, 0.2);
        assert_eq!(guided.simulator_calls, 2 * 40);
        let steps = crate::interval::optimize::grid_steps(&grid, full.interval, guided.interval).unwrap();
        assert!(steps <= 1, "full {} guided {}", full.interval, guided.interval);
    }
}
