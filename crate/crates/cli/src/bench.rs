//! `bench`: blocking time of `checkpoint()` in SYNC and ASYNC mode under
//! injected repository put latency.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mlckpt_backend::{BackendOptions, BackendThread};
use mlckpt_client::{ClientHandle, ClientOptions, Region};
use mlckpt_core::config::{Config, Mode};
use mlckpt_core::resilience::repo::{repo_open, LatencyRepository, RepositoryBackend};

use crate::{io_error, CliError};

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub size: u64,
    pub reps: u32,
    pub latencies_ms: Vec<u64>,
    pub ranks: u32,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub mode: Mode,
    pub latency_ms: u64,
    /// Slowest rank per rep.
    pub samples: Vec<Duration>,
}

impl BenchRow {
    pub fn mean_ms(&self) -> f64 {
        self.samples.iter().map(|d| d.as_secs_f64() * 1000.0).sum::<f64>() / self.samples.len().max(1) as f64
    }

    fn min_ms(&self) -> f64 {
        self.samples.iter().map(|d| d.as_secs_f64() * 1000.0).fold(f64::INFINITY, f64::min)
    }

    fn max_ms(&self) -> f64 {
        self.samples.iter().map(|d| d.as_secs_f64() * 1000.0).fold(0.0, f64::max)
    }
}

/// Spread of ASYNC means across latencies, and SYNC growth over the
/// zero-latency baseline per latency.
pub fn summarize(rows: &[BenchRow]) -> (f64, Vec<(u64, f64)>) {
    let means = |mode: Mode| rows.iter().filter(move |r| r.mode == mode).map(|r| (r.latency_ms, r.mean_ms()));
    let async_means: Vec<f64> = means(Mode::Async).map(|(_, m)| m).collect();
    let spread = async_means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - async_means.iter().copied().fold(f64::INFINITY, f64::min);
    let sync: Vec<(u64, f64)> = means(Mode::Sync).collect();
    let base = sync.iter().min_by_key(|(l, _)| *l).map(|(_, m)| *m).unwrap_or(0.0);
    let growth = sync.iter().map(|&(l, m)| (l, m - base)).collect();
    (if async_means.is_empty() { 0.0 } else { spread }, growth)
}

fn run_ranks(
    config: &Config,
    spec: &BenchSpec,
    name: &str,
    repo: Arc<dyn RepositoryBackend>,
) -> Result<Vec<Duration>, CliError> {
    let job = format!("bench{}-{name}", std::process::id());
    let threads: Vec<_> = (0..spec.ranks)
        .map(|rank| {
            let config = config.clone();
            let opts = ClientOptions { job_token: Some(job.clone()), repository: Some(repo.clone()), ..ClientOptions::default() };
            let (name, size, reps, ranks) = (name.to_string(), spec.size, spec.reps, spec.ranks);
            std::thread::spawn(move || -> Result<Vec<Duration>, CliError> {
                let mut handle = ClientHandle::init_with(config, rank, ranks, opts)?;
                let region = Region::new((0..size).map(|i| (i as u8).wrapping_mul(31) ^ rank as u8).collect());
                handle.protect(0, region.clone(), size, 1)?;
                let mut samples = Vec::new();
                for v in 1..=reps {
                    region.write()[0] = v as u8;
                    let t = Instant::now();
                    let outcome = handle.checkpoint(&name, v)?;
                    samples.push(t.elapsed());
                    let done = handle.checkpoint_wait();
                    if outcome.is_failure() || done.is_failure() {
                        return Err(CliError::new("CHECKPOINT_FAILED", format!("{name} v{v}: {outcome} / {done}")));
                    }
                }
                handle.finalize(true);
                Ok(samples)
            })
        })
        .collect();
    let mut worst = vec![Duration::ZERO; spec.reps as usize];
    for t in threads {
        let samples = t.join().map_err(|_| CliError::new("CHECKPOINT_FAILED", "rank thread panicked"))??;
        for (w, s) in worst.iter_mut().zip(samples) {
            *w = (*w).max(s);
        }
    }
    Ok(worst)
}

pub fn measure(config: &Config, spec: &BenchSpec) -> Result<Vec<BenchRow>, CliError> {
    if spec.size == 0 || spec.reps == 0 || spec.ranks == 0 {
        return Err(CliError::usage("--size, --reps and --ranks must be >= 1"));
    }
    config.validate_for_ranks(spec.ranks)?;
    let base = repo_open(config.repository_locator()).map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let mut rows = Vec::new();
    for mode in [Mode::Sync, Mode::Async] {
        for &latency_ms in &spec.latencies_ms {
            let repo: Arc<dyn RepositoryBackend> =
                Arc::new(LatencyRepository::new(base.clone(), Duration::from_millis(latency_ms)));
            let mut config = config.clone();
            config.mode = mode;
            let name = format!("bench-{}-l{latency_ms}", mode.as_str());
            log::info!("bench {name}");
            let samples = match mode {
                Mode::Sync => run_ranks(&config, spec, &name, repo)?,
                Mode::Async => {
                    let opts = BackendOptions { repository: Some(repo.clone()), ..BackendOptions::default() };
                    let backend = BackendThread::spawn(&config, opts)?;
                    let samples = run_ranks(&config, spec, &name, repo);
                    backend.shutdown()?;
                    samples?
                }
            };
            rows.push(BenchRow { mode, latency_ms, samples });
        }
    }
    Ok(rows)
}

/// `bench --config F --size BYTES --reps K`.
pub fn bench(config: &Config, spec: &BenchSpec, out: &mut impl Write) -> Result<(), CliError> {
    let rows = measure(config, spec)?;
    let io = |e| io_error("stdout", e);
    for r in &rows {
        writeln!(
            out,
            "BENCH mode={} latency_ms={} reps={} size={} mean_ms={:.3} min_ms={:.3} max_ms={:.3}",
            r.mode.as_str().to_uppercase(),
            r.latency_ms,
            r.samples.len(),
            spec.size,
            r.mean_ms(),
            r.min_ms(),
            r.max_ms()
        )
        .map_err(io)?;
    }
    let (spread, growth) = summarize(&rows);
    writeln!(out, "ASYNC_SPREAD_MS {spread:.3}").map_err(io)?;
    for (latency, g) in &growth {
        writeln!(out, "SYNC_GROWTH_MS latency={latency} growth={g:.3}").map_err(io)?;
    }
    let growth_ok = growth.iter().all(|&(l, g)| g >= l as f64);
    writeln!(out, "BOUND async_spread_lt_200ms={} sync_growth_ge_latency={growth_ok}", spread < 200.0).map_err(io)?;
    Ok(())
}
