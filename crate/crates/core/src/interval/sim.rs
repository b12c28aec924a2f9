//! Discrete-event failure simulator.
//!
//! Model:
//! - Work proceeds in segments of `T` useful seconds; the last segment is
//!   shortened to end exactly at the horizon. Boundaries are numbered
//!   j = 1, 2, ... by position in the useful work, so a rollback replays the
//!   same numbering.
//! - At boundary j every level i with `j % k_i == 0` is checkpointed and
//!   `C_i` is paid for each. The final boundary is checkpointed as well. A
//!   checkpoint phase is never interrupted: a failure striking during it
//!   takes effect once it has been committed. The same holds for recovery.
//! - Level-i failures form a Poisson process of rate `1/M_i` in wall time.
//!   One rolls work back to the newest checkpoint held at level >= i (or the
//!   start), destroys every checkpoint below level i, and costs `R_i`.
//!
//! Randomness: xoshiro256** seeded through SplitMix64 from the run seed.
//! Initial failure times are drawn for levels in order, skipping levels with
//! infinite MTBF; after a level-i failure only level i draws again, from the
//! failure instant. A draw is `-M ln(1 - u)` with `u = (x >> 11) * 2^-53`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::{LevelParams, Schedule};

/// Stop after this many wall seconds per useful second; the run is reported
/// as incomplete.
const MAX_STRETCH: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub efficiency: f64,
    pub completed_work: f64,
    pub total_time: f64,
    pub failures_seen: Vec<u64>,
    pub checkpoints_taken: Vec<u64>,
    pub seed: u64,
}

pub fn unit_draw(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn exp_draw(rng: &mut Xoshiro256StarStar, mean: f64) -> f64 {
    -mean * (1.0 - unit_draw(rng)).ln()
}

/// `params` and `schedule` are assumed valid (see their `validate`).
pub fn simulate(params: &LevelParams, schedule: &Schedule, horizon_work: f64, seed: u64) -> SimResult {
    let levels = &params.levels;
    let n = levels.len();
    let t_seg = schedule.interval;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut next_fail: Vec<f64> = levels
        .iter()
        .map(|l| if l.mtbf.is_finite() { exp_draw(&mut rng, l.mtbf) } else { f64::INFINITY })
        .collect();
    // Useful work covered by the newest checkpoint at each level.
    let mut saved = vec![0.0f64; n];
    let mut failures = vec![0u64; n];
    let mut taken = vec![0u64; n];
    let mut now = 0.0f64;
    let mut work = 0.0f64;
    let mut boundary: u64 = 0;
    let limit = horizon_work * MAX_STRETCH;

    while work < horizon_work {
        if now > limit {
            break;
        }
        let seg = t_seg.min(horizon_work - work);
        let (lvl, at) = next_fail
            .iter()
            .copied()
            .enumerate()
            .fold((usize::MAX, f64::INFINITY), |best, (i, f)| if f < best.1 { (i, f) } else { best });
        if lvl != usize::MAX && at < now + seg {
            // Pending failures from an atomic phase strike at its end.
            let strike = at.max(now);
            failures[lvl] += 1;
            let restore = saved[lvl..].iter().copied().fold(0.0, f64::max);
            for s in &mut saved[..lvl] {
                *s = 0.0;
            }
            work = restore;
            boundary = (restore / t_seg).round() as u64;
            next_fail[lvl] = at + exp_draw(&mut rng, levels[lvl].mtbf);
            now = strike + levels[lvl].recovery;
            continue;
        }
        now += seg;
        work += seg;
        boundary += 1;
        let last = work >= horizon_work;
        for (i, l) in levels.iter().enumerate() {
            if last || boundary.is_multiple_of(schedule.cadence[i] as u64) {
                now += l.cost;
                saved[i] = work;
                taken[i] += 1;
            }
        }
    }
    SimResult {
        efficiency: if now > 0.0 { work / now } else { 1.0 },
        completed_work: work,
        total_time: now,
        failures_seen: failures,
        checkpoints_taken: taken,
        seed,
    }
}
