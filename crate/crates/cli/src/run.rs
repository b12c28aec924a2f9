//! `run`: drives a scenario with one child process per rank.
//!
//! The supervisor splits the scenario's versions into phases at damage
//! points. Each phase is a fresh set of rank processes; every phase after
//! the first starts by restarting from the newest restorable version.
//! Between phases the supervisor applies the damage, and in ASYNC mode may
//! SIGKILL and relaunch the backend.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use mlckpt_client::{ClientHandle, Region};
use mlckpt_core::config::{Config, Mode, Redundancy};
use mlckpt_core::model::{CheckpointId, OutcomeCode};
use mlckpt_core::pipeline::GroupTopology;
use mlckpt_core::resilience::flush::data_key;
use mlckpt_core::resilience::layout;
use mlckpt_core::resilience::partner::partner_of;
use mlckpt_core::resilience::repo::repo_open;

use crate::catalog::query_watermarks;
use crate::scenario::{fill_pattern, Action, Damage, RunScenario};
use crate::{io_error, load_config, ms, CliError};

const BACKEND_START: Duration = Duration::from_secs(10);

/// One rank's result for one version, sent to the supervisor as a
/// `RANKREPORT <json>` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: u32,
    pub version: u32,
    pub outcome: String,
    pub level1_ms: f64,
    pub barrier_ms: f64,
    pub deferred: bool,
    pub l3_complete: bool,
}

fn code_str(code: OutcomeCode) -> &'static str {
    match code {
        OutcomeCode::Ok => "OK",
        OutcomeCode::Deferred => "DEFERRED",
        OutcomeCode::Skipped => "SKIPPED",
        OutcomeCode::Failure => "FAILURE",
    }
}

fn effective_mode(config: &Config, scenario: &RunScenario) -> Mode {
    scenario.mode.unwrap_or(config.mode)
}

fn group(config: &Config, scenario: &RunScenario) -> GroupTopology {
    GroupTopology { num_ranks: scenario.num_ranks, redundancy: config.redundancy }
}

/// Body of the hidden `rank` subcommand.
pub fn run_rank(
    config_path: &Path,
    scenario_path: &Path,
    rank: u32,
    phase: usize,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let mut config = load_config(config_path)?;
    let scenario = RunScenario::load(scenario_path)?;
    config.mode = effective_mode(&config, &scenario);
    let phases = scenario.phases();
    let versions = phases
        .get(phase)
        .ok_or_else(|| CliError::usage(format!("phase {phase} outside 0..{}", phases.len())))?;
    let mut handle = ClientHandle::init(config.clone(), rank, scenario.num_ranks)?;
    let sizes = scenario.region_sizes();
    let regions: Vec<Region> = sizes.iter().map(|&s| Region::zeroed(s as usize)).collect();
    for (i, region) in regions.iter().enumerate() {
        handle.protect(i as u32, region.clone(), sizes[i], 1)?;
    }
    let seed = scenario.regions.seed;
    let name = &scenario.name;
    let w = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| io_error("stdout", e));

    if phase > 0 {
        match handle.restart_test(name, None) {
            Some(v) => {
                let level = handle
                    .catalog(name)
                    .best_level(v, rank, &group(&config, &scenario))
                    .map(|l| l.as_str())
                    .unwrap_or("?");
                handle.restart(name, v)?;
                for (i, region) in regions.iter().enumerate() {
                    if region.to_vec() != fill_pattern(seed, rank, i as u32, v, sizes[i] as usize) {
                        return Err(CliError::new("DIGEST_MISMATCH", format!("rank {rank} region {i} after restart")));
                    }
                }
                w(out, format!("RESTART rank={rank} version={v} level={level} verified=true"))?;
            }
            None => w(out, format!("RESTART rank={rank} version=NONE"))?,
        }
    }

    for &v in versions {
        for (i, region) in regions.iter().enumerate() {
            *region.write() = fill_pattern(seed, rank, i as u32, v, sizes[i] as usize);
        }
        let outcome = handle.checkpoint(name, v)?;
        let timing = handle.last_timing();
        let deferred = outcome.code == OutcomeCode::Deferred;
        let final_outcome = if deferred { handle.checkpoint_wait() } else { outcome.clone() };
        let l3_complete = final_outcome.is_ok()
            && handle
                .last_ticket()
                .is_some_and(|t| t.per_module.iter().any(|e| e.module_id == "flush" && e.outcome.is_ok()));
        let report = RankReport {
            rank,
            version: v,
            outcome: if final_outcome.is_failure() { format!("FAILURE {}", final_outcome.detail) } else { code_str(outcome.code).into() },
            level1_ms: timing.level1.as_secs_f64() * 1000.0,
            barrier_ms: timing.barrier.as_secs_f64() * 1000.0,
            deferred,
            l3_complete,
        };
        let json = serde_json::to_string(&report).expect("report serializes");
        w(out, format!("RANKREPORT {json}"))?;
    }
    handle.finalize(true);
    Ok(())
}

struct BackendChild {
    child: Option<Child>,
    endpoint: PathBuf,
}

impl BackendChild {
    fn reachable(endpoint: &Path) -> bool {
        UnixStream::connect(endpoint).is_ok()
    }

    fn launch(exe: &Path, config_path: &Path, endpoint: &Path) -> Result<Child, CliError> {
        let mut child = Command::new(exe)
            .arg("backend")
            .arg("--config")
            .arg(config_path)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| io_error("spawn backend", e))?;
        let start = Instant::now();
        while !Self::reachable(endpoint) {
            if let Ok(Some(status)) = child.try_wait() {
                return Err(CliError::new("BACKEND_UNREACHABLE", format!("backend exited with {status}")));
            }
            if start.elapsed() > BACKEND_START {
                let _ = child.kill();
                return Err(CliError::new("BACKEND_UNREACHABLE", "backend did not come up"));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Ok(child)
    }

    fn shutdown(&mut self) {
        let Some(mut child) = self.child.take() else { return };
        if let Ok(mut s) = UnixStream::connect(&self.endpoint) {
            let _ = mlckpt_core::wire::write_message(
                &mut s,
                &mlckpt_core::wire::WireMessage::new(mlckpt_core::wire::SHUTDOWN, 0, 1),
            );
            let _ = mlckpt_core::wire::read_message(&mut s);
        }
        let _ = child.wait();
    }
}

impl Drop for BackendChild {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn flip_byte(path: &Path, offset_from_end: u64) -> Result<(), CliError> {
    let mut bytes = std::fs::read(path).map_err(|e| io_error(&path.display().to_string(), e))?;
    let n = bytes.len() as u64;
    if n == 0 {
        return Err(CliError::new("DAMAGE_FAILED", format!("{} is empty", path.display())));
    }
    let i = (n - 1 - offset_from_end.min(n - 1)) as usize;
    bytes[i] ^= 0xff;
    std::fs::write(path, bytes).map_err(|e| io_error(&path.display().to_string(), e))
}

fn remove_all(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut gone = Vec::new();
    for p in paths {
        match std::fs::remove_file(p) {
            Ok(()) => gone.push(p.clone()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_error(&p.display().to_string(), e)),
        }
    }
    Ok(gone)
}

fn show(paths: &[PathBuf]) -> String {
    if paths.is_empty() {
        "NONE".into()
    } else {
        paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Applies one file-level damage action and describes what it touched.
pub fn apply_damage(config: &Config, scenario: &RunScenario, damage: &Damage) -> Result<String, CliError> {
    let tiers = &config.scratch_tiers;
    let Some(rank) = damage.action.rank() else {
        return Err(CliError::new("DAMAGE_FAILED", "backend actions are handled by the supervisor"));
    };
    let id = CheckpointId::new(&scenario.name, damage.after_version, rank)
        .map_err(|e| CliError::new("INVALID_NAME", e.to_string()))?;
    let touched = match damage.action {
        Action::DeleteL1 { .. } => {
            let paths: Vec<PathBuf> = tiers
                .iter()
                .flat_map(|t| {
                    let p = layout::l1_path(t, &id);
                    [p.with_extension("manifest"), p]
                })
                .collect();
            show(&remove_all(&paths)?)
        }
        Action::CorruptL1 { .. } => {
            let (_, path) = layout::find_l1(tiers, &id)
                .ok_or_else(|| CliError::new("DAMAGE_FAILED", format!("no L1 artifact for {id}")))?;
            flip_byte(&path, 0)?;
            path.display().to_string()
        }
        Action::DeletePartner { .. } => {
            let Redundancy::Partner { distance } = config.redundancy else {
                return Err(CliError::new("DAMAGE_FAILED", "delete_partner needs partner redundancy"));
            };
            let holder = partner_of(rank, scenario.num_ranks, distance)
                .map_err(|e| CliError::new(e.code(), e.to_string()))?;
            let paths: Vec<PathBuf> = tiers.iter().map(|t| layout::partner_path(t, holder, &id)).collect();
            show(&remove_all(&paths)?)
        }
        Action::CorruptRepo { .. } => {
            let repo = repo_open(config.repository_locator()).map_err(|e| CliError::new(e.code(), e.to_string()))?;
            let key = data_key(&id);
            let mut bytes = repo
                .get(&key)
                .map_err(|e| CliError::new(e.code(), e.to_string()))?
                .ok_or_else(|| CliError::new("DAMAGE_FAILED", format!("repository has no {key}")))?;
            let last = bytes.len() - 1;
            bytes[last] ^= 0xff;
            repo.put(&key, &bytes).map_err(|e| CliError::new(e.code(), e.to_string()))?;
            key
        }
        Action::KillBackend => unreachable!("no rank"),
    };
    Ok(touched)
}

fn spawn_rank(exe: &Path, config_path: &Path, scenario_path: &Path, rank: u32, phase: usize, job: &str) -> Result<Child, CliError> {
    Command::new(exe)
        .arg("rank")
        .arg("--config")
        .arg(config_path)
        .arg("--scenario")
        .arg(scenario_path)
        .arg("--rank")
        .arg(rank.to_string())
        .arg("--phase")
        .arg(phase.to_string())
        .env("MLCKPT_JOB", job)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| io_error("spawn rank", e))
}

/// Output lines of every rank, in rank order.
fn run_phase(exe: &Path, config_path: &Path, scenario_path: &Path, scenario: &RunScenario, phase: usize) -> Result<Vec<Vec<String>>, CliError> {
    let nanos = std::time::SystemTime::UNIX_EPOCH.elapsed().unwrap_or_default().as_nanos();
    let job = format!("run{}-{nanos}-{phase}", std::process::id());
    let mut children = Vec::new();
    for rank in 0..scenario.num_ranks {
        children.push(spawn_rank(exe, config_path, scenario_path, rank, phase, &job)?);
    }
    let readers: Vec<_> = children
        .iter_mut()
        .map(|c| {
            let stdout = c.stdout.take().expect("piped");
            std::thread::spawn(move || BufReader::new(stdout).lines().map_while(Result::ok).collect::<Vec<String>>())
        })
        .collect();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (rank, (mut child, reader)) in children.into_iter().zip(readers).enumerate() {
        let status = child.wait().map_err(|e| io_error("wait rank", e))?;
        lines.push(reader.join().unwrap_or_default());
        if !status.success() {
            failed.push(format!("rank {rank}: {status}"));
        }
    }
    if !failed.is_empty() {
        return Err(CliError::new("RANK_FAILED", format!("phase {phase}: {}", failed.join(", "))));
    }
    Ok(lines)
}

fn watermark_line(endpoint: &Path, name: &str, num_ranks: u32, when: &str) -> String {
    match query_watermarks(endpoint, name, num_ranks) {
        Some((ranks, group)) => format!(
            "WATERMARK when={when} name={name} group={} ranks={}",
            group.map_or("NONE".into(), |v| v.to_string()),
            ranks.iter().map(|(r, v)| format!("{r}:{v}")).collect::<Vec<_>>().join(",")
        ),
        None => format!("WATERMARK when={when} name={name} unreachable"),
    }
}

/// `run --config F --scenario S`.
pub fn run(config_path: &Path, scenario_path: &Path, out: &mut impl Write) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let scenario = RunScenario::load(scenario_path)?;
    config.validate_for_ranks(scenario.num_ranks)?;
    let mode = effective_mode(&config, &scenario);
    let kills = scenario.damage.iter().any(|d| d.action == Action::KillBackend);
    if mode == Mode::Sync && kills {
        return Err(CliError::new("INVALID_SCENARIO", "kill_backend needs ASYNC mode"));
    }
    let exe = std::env::current_exe().map_err(|e| io_error("current_exe", e))?;
    let endpoint = config.backend_endpoint.clone();
    let mut backend = BackendChild { child: None, endpoint: endpoint.clone() };
    if mode == Mode::Async {
        if BackendChild::reachable(&endpoint) {
            if kills {
                return Err(CliError::new("ENDPOINT_BUSY", "kill_backend needs a backend owned by this run"));
            }
        } else {
            backend.child = Some(BackendChild::launch(&exe, config_path, &endpoint)?);
        }
    }
    let w = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| io_error("stdout", e));
    w(out, format!("RUN name={} mode={} ranks={} versions={}", scenario.name, mode.as_str(), scenario.num_ranks, scenario.versions().len()))?;

    let phases = scenario.phases();
    for (p, versions) in phases.iter().enumerate() {
        let lines = run_phase(&exe, config_path, scenario_path, &scenario, p)?;
        let mut reports: BTreeMap<u32, Vec<RankReport>> = BTreeMap::new();
        for line in lines.iter().flatten() {
            if let Some(json) = line.strip_prefix("RANKREPORT ") {
                let r: RankReport = serde_json::from_str(json)
                    .map_err(|e| CliError::new("RANK_FAILED", format!("bad report {json:?}: {e}")))?;
                reports.entry(r.version).or_default().push(r);
            } else if line.starts_with("RESTART ") {
                w(out, line.clone())?;
            }
        }
        for &v in versions {
            let rs = reports.get(&v).map(Vec::as_slice).unwrap_or_default();
            if rs.len() != scenario.num_ranks as usize {
                return Err(CliError::new("RANK_FAILED", format!("v{v}: {} of {} ranks reported", rs.len(), scenario.num_ranks)));
            }
            let outcome = rs
                .iter()
                .find(|r| r.outcome.starts_with("FAILURE"))
                .map_or_else(|| rs[0].outcome.clone(), |r| format!("FAILURE(rank={})", r.rank));
            let max = |f: fn(&RankReport) -> f64| rs.iter().map(f).fold(0.0, f64::max);
            w(
                out,
                format!(
                    "VERSION {v} outcome={} level1={:.3} barrier={:.3} deferred={} l3_complete={}",
                    outcome.split_whitespace().next().unwrap_or_default(),
                    max(|r| r.level1_ms),
                    max(|r| r.barrier_ms),
                    rs.iter().all(|r| r.deferred),
                    rs.iter().all(|r| r.l3_complete),
                ),
            )?;
        }
        for d in scenario.damage_after(versions) {
            if d.action == Action::KillBackend {
                w(out, watermark_line(&endpoint, &scenario.name, scenario.num_ranks, "before_kill"))?;
                let mut child = backend.child.take().expect("run owns the backend");
                let t = Instant::now();
                let killed = child.kill();
                let _ = child.wait();
                killed.map_err(|e| io_error("kill backend", e))?;
                backend.child = Some(BackendChild::launch(&exe, config_path, &endpoint)?);
                w(out, format!("DAMAGE after_version={} action=kill_backend restart_ms={}", d.after_version, ms(t.elapsed())))?;
                w(out, watermark_line(&endpoint, &scenario.name, scenario.num_ranks, "after_restart"))?;
            } else {
                let touched = apply_damage(&config, &scenario, &d)?;
                w(
                    out,
                    format!(
                        "DAMAGE after_version={} action={} rank={} touched={touched}",
                        d.after_version,
                        d.action.name(),
                        d.action.rank().unwrap_or_default()
                    ),
                )?;
            }
        }
    }
    if mode == Mode::Async {
        w(out, watermark_line(&endpoint, &scenario.name, scenario.num_ranks, "final"))?;
        backend.shutdown();
    }
    let catalog = mlckpt_core::recovery::discover(
        &scenario.name,
        &config.scratch_tiers,
        repo_open(config.repository_locator()).ok().as_deref(),
        &group(&config, &scenario),
    );
    let latest = mlckpt_core::recovery::latest_restorable(&catalog, &group(&config, &scenario), None);
    w(out, format!("LATEST_RESTORABLE {}", latest.map_or("NONE".into(), |v| v.to_string())))?;
    Ok(())
}
