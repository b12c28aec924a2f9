//! The built-in pipeline stages and their default priorities.
//!
//! The L1 artifact itself is written by the client, which owns the region
//! buffers. `local-write` confirms it is in place; every later stage reads it
//! from scratch. Only the owning rank's pipeline rewrites its manifest.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use log::{debug, warn};

use super::flush::{flush, RetryPolicy};
use super::format::verify_artifact;
use super::partner::{partner_of, partner_replicate};
use super::repo::{repo_open, RepositoryBackend};
use super::xor::{xor_protect, XorGroup};
use super::{layout, LocalArtifact, ResilienceError};
use crate::config::{Config, Redundancy};
use crate::fsutil::DEFAULT_QUANTUM;
use crate::model::{CheckpointId, CheckpointManifest, Level, LevelStatus, Outcome};
use crate::pipeline::{Command, CommandKind, Engine, PipelineError, PipelineModule, TraceEntry};

pub const INTERVAL_GATE: (&str, i32) = ("interval-gate", 5);
pub const LOCAL_WRITE: (&str, i32) = ("local-write", 10);
pub const CHECKSUM: (&str, i32) = ("checksum", 20);
pub const PARTNER: (&str, i32) = ("partner", 30);
pub const XOR: (&str, i32) = ("xor", 30);
pub const FLUSH: (&str, i32) = ("flush", 40);
pub const PRUNE: (&str, i32) = ("prune", 50);

/// Modules whose SKIPPED outcome means "no fresh, due artifact": later
/// stages pass too.
const GATES: [&str; 3] = [INTERVAL_GATE.0, LOCAL_WRITE.0, CHECKSUM.0];

/// Shared state handed to every built-in stage.
pub struct ModuleContext {
    pub tiers: Vec<PathBuf>,
    pub repo_locator: String,
    pub retry: RetryPolicy,
    pub quantum: usize,
    pub max_versions_retained: u32,
    repo: Mutex<Option<Arc<dyn RepositoryBackend>>>,
}

impl ModuleContext {
    pub fn new(tiers: Vec<PathBuf>, repo_locator: impl Into<String>) -> Self {
        Self {
            tiers,
            repo_locator: repo_locator.into(),
            retry: RetryPolicy::default(),
            quantum: DEFAULT_QUANTUM,
            max_versions_retained: crate::config::DEFAULT_MAX_VERSIONS,
            repo: Mutex::new(None),
        }
    }

    pub fn from_config(config: &Config) -> Self {
        let mut ctx = Self::new(config.scratch_tiers.clone(), config.repository_locator());
        ctx.max_versions_retained = config.max_versions_retained;
        ctx
    }

    /// Uses `repo` instead of opening the locator.
    pub fn with_repository(self, repo: Arc<dyn RepositoryBackend>) -> Self {
        *self.repo.lock().unwrap() = Some(repo);
        self
    }

    /// Opened on first use so a bad repository fails the flush stage, not
    /// engine construction.
    pub fn repository(&self) -> Result<Arc<dyn RepositoryBackend>, ResilienceError> {
        let mut slot = self.repo.lock().unwrap();
        if let Some(r) = slot.as_ref() {
            return Ok(Arc::clone(r));
        }
        let r = repo_open(&self.repo_locator)?;
        *slot = Some(Arc::clone(&r));
        Ok(r)
    }

    fn artifact(&self, cmd: &Command) -> Option<LocalArtifact> {
        let path = cmd
            .payload_paths
            .first()
            .filter(|p| p.is_file())
            .cloned()
            .or_else(|| layout::find_l1(&self.tiers, &cmd.ckpt).map(|(_, p)| p))?;
        let tier_index = self.tiers.iter().position(|t| path.starts_with(t)).unwrap_or(0);
        let byte_length = std::fs::metadata(&path).ok()?.len();
        Some(LocalArtifact { path, ckpt: cmd.ckpt.clone(), byte_length, tier_index })
    }
}

fn failure(e: &ResilienceError) -> Outcome {
    Outcome::failure(format!("{}: {e}", e.code()))
}

fn gated(trace: &[TraceEntry]) -> Option<&str> {
    trace
        .iter()
        .find(|t| GATES.contains(&t.module_id.as_str()) && t.outcome.is_skipped())
        .map(|t| t.module_id.as_str())
}

/// Records a level transition in the artifact's manifest.
fn mark(art: &LocalArtifact, level: Level, status: LevelStatus) -> Result<CheckpointManifest, ResilienceError> {
    let path = art.manifest_path();
    let mut m = CheckpointManifest::read(&path)?;
    m.set_status(level, status)?;
    m.write(&path)?;
    Ok(m)
}

pub struct LocalWriteStage(pub Arc<ModuleContext>);

impl PipelineModule for LocalWriteStage {
    fn handle(&self, cmd: &Command, _trace: &[TraceEntry]) -> Outcome {
        match (cmd.kind, self.0.artifact(cmd)) {
            (CommandKind::Checkpoint | CommandKind::FlushOnly | CommandKind::Validate, Some(a)) => {
                Outcome::ok(a.path.display().to_string())
            }
            (CommandKind::Checkpoint, None) => Outcome::failure(format!("L1 artifact of {} missing", cmd.ckpt)),
            (_, None) => Outcome::skipped("no L1 artifact"),
            (CommandKind::Restart, Some(_)) => Outcome::skipped("restart"),
        }
    }
}

pub struct ChecksumStage(pub Arc<ModuleContext>);

impl PipelineModule for ChecksumStage {
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome {
        if cmd.kind == CommandKind::Restart {
            return Outcome::skipped("restart");
        }
        if let Some(g) = gated(trace) {
            return Outcome::skipped(format!("gated by {g}"));
        }
        let Some(art) = self.0.artifact(cmd) else {
            return Outcome::failure(format!("L1 artifact of {} missing", cmd.ckpt));
        };
        match verify_artifact(&art.path) {
            Ok(true) => Outcome::ok("digest verified"),
            Ok(false) => Outcome::failure(format!("VERIFY_FAILED: digest mismatch in {}", art.path.display())),
            Err(e) => failure(&e),
        }
    }
}

pub struct PartnerStage(pub Arc<ModuleContext>);

impl PipelineModule for PartnerStage {
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome {
        let Redundancy::Partner { distance } = cmd.group.redundancy else {
            return Outcome::skipped("partner mode not configured");
        };
        if cmd.kind != CommandKind::Checkpoint {
            return Outcome::skipped("not a checkpoint");
        }
        if let Some(g) = gated(trace) {
            return Outcome::skipped(format!("gated by {g}"));
        }
        let Some(art) = self.0.artifact(cmd) else {
            return Outcome::failure(format!("L1 artifact of {} missing", cmd.ckpt));
        };
        let run = || {
            mark(&art, Level::L2Partner, LevelStatus::InProgress)?;
            let copy = partner_replicate(&art, cmd.group.num_ranks, distance, &self.0.tiers, self.0.quantum)?;
            mark(&art, Level::L2Partner, LevelStatus::Complete)?;
            Ok::<_, ResilienceError>(copy)
        };
        match run() {
            Ok(copy) => Outcome::ok(copy.display().to_string()),
            Err(e) => {
                let _ = mark(&art, Level::L2Partner, LevelStatus::Failed);
                failure(&e)
            }
        }
    }
}

pub struct XorStage(pub Arc<ModuleContext>);

impl PipelineModule for XorStage {
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome {
        let Redundancy::Xor { group_size } = cmd.group.redundancy else {
            return Outcome::skipped("xor mode not configured");
        };
        if cmd.kind != CommandKind::Checkpoint {
            return Outcome::skipped("not a checkpoint");
        }
        if let Some(g) = gated(trace) {
            return Outcome::skipped(format!("gated by {g}"));
        }
        let Some(art) = self.0.artifact(cmd) else {
            return Outcome::failure(format!("L1 artifact of {} missing", cmd.ckpt));
        };
        let run = || {
            mark(&art, Level::L2Xor, LevelStatus::InProgress)?;
            let parity = xor_protect(&cmd.ckpt, group_size, &self.0.tiers, self.0.quantum)?;
            mark(&art, Level::L2Xor, LevelStatus::Complete)?;
            Ok::<_, ResilienceError>(parity)
        };
        match run() {
            Ok(parity) => Outcome::ok(parity.display().to_string()),
            Err(e) => {
                let _ = mark(&art, Level::L2Xor, LevelStatus::Failed);
                failure(&e)
            }
        }
    }
}

pub struct FlushStage(pub Arc<ModuleContext>);

impl PipelineModule for FlushStage {
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome {
        if !matches!(cmd.kind, CommandKind::Checkpoint | CommandKind::FlushOnly) {
            return Outcome::skipped("nothing to flush");
        }
        if let Some(g) = gated(trace) {
            return Outcome::skipped(format!("gated by {g}"));
        }
        let Some(art) = self.0.artifact(cmd) else {
            return Outcome::failure(format!("L1 artifact of {} missing", cmd.ckpt));
        };
        let run = || {
            let manifest = mark(&art, Level::L3Repository, LevelStatus::InProgress)?;
            let repo = self.0.repository()?;
            let report = flush(&art, &manifest, repo.as_ref(), &self.0.retry, self.0.quantum)?;
            mark(&art, Level::L3Repository, LevelStatus::Complete)?;
            Ok::<_, ResilienceError>(report)
        };
        match run() {
            Ok(report) => Outcome::ok(format!("{} attempt(s), {} bytes", report.attempts, report.bytes)),
            Err(e) => {
                let _ = mark(&art, Level::L3Repository, LevelStatus::Failed);
                failure(&e)
            }
        }
    }
}

/// Passes only every `every`-th version, so downstream stages run at that
/// cadence. Not registered by default.
pub struct IntervalGate {
    pub every: u32,
}

impl PipelineModule for IntervalGate {
    fn handle(&self, cmd: &Command, _trace: &[TraceEntry]) -> Outcome {
        if self.every <= 1 || cmd.ckpt.version.is_multiple_of(self.every) {
            Outcome::ok("due")
        } else {
            Outcome::skipped(format!("version {} not a multiple of {}", cmd.ckpt.version, self.every))
        }
    }
}

/// Keeps the newest `max_versions_retained` versions of this rank's name on
/// scratch, removing older L1 files, the partner copies of them, and parity
/// files this rank holds. Repository objects are never touched.
pub struct PruneStage(pub Arc<ModuleContext>);

impl PruneStage {
    fn local_versions(&self, id: &CheckpointId) -> BTreeSet<u32> {
        let mut versions = BTreeSet::new();
        for tier in &self.0.tiers {
            let Ok(entries) = std::fs::read_dir(layout::rank_dir(tier, id.rank)) else { continue };
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                let Some(stem) = name.strip_suffix(".ckpt").or_else(|| name.strip_suffix(".manifest")) else {
                    continue;
                };
                if let Some(found) = CheckpointId::parse_stem(stem) {
                    if found.name == id.name && found.rank == id.rank {
                        versions.insert(found.version);
                    }
                }
            }
        }
        versions
    }
}

impl PipelineModule for PruneStage {
    fn handle(&self, cmd: &Command, _trace: &[TraceEntry]) -> Outcome {
        if cmd.kind != CommandKind::Checkpoint {
            return Outcome::skipped("not a checkpoint");
        }
        let keep = self.0.max_versions_retained.max(1) as usize;
        let versions = self.local_versions(&cmd.ckpt);
        let doomed: Vec<u32> =
            versions.iter().copied().filter(|&v| v < cmd.ckpt.version).rev().skip(keep - 1).collect();
        for &v in &doomed {
            let old = CheckpointId { version: v, ..cmd.ckpt.clone() };
            for tier in &self.0.tiers {
                let l1 = layout::l1_path(tier, &old);
                let mut victims = vec![l1.with_extension("manifest"), l1];
                match cmd.group.redundancy {
                    Redundancy::Partner { distance } => {
                        if let Ok(holder) = partner_of(old.rank, cmd.group.num_ranks, distance) {
                            let p = layout::partner_path(tier, holder, &old);
                            victims.push(p.with_extension("manifest"));
                            victims.push(p);
                        }
                    }
                    Redundancy::Xor { group_size } => {
                        let g = XorGroup::of_rank(old.rank, group_size);
                        if g.parity_holder == old.rank {
                            victims.push(g.parity_path(tier, &old.name, v));
                        }
                    }
                    Redundancy::None => {}
                }
                for p in victims {
                    match std::fs::remove_file(&p) {
                        Ok(()) => debug!("pruned {}", p.display()),
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                        Err(e) => warn!("prune {}: {e}", p.display()),
                    }
                }
            }
        }
        if doomed.is_empty() {
            Outcome::ok("nothing to prune")
        } else {
            Outcome::ok(format!("pruned versions {doomed:?}"))
        }
    }
}

/// Registers checksum, the configured L2 stage, flush and prune; with
/// `with_local_write` also the L1 confirmation stage.
pub fn register_default_modules(
    engine: &Engine,
    ctx: &Arc<ModuleContext>,
    redundancy: Redundancy,
    with_local_write: bool,
) -> Result<(), PipelineError> {
    if with_local_write {
        engine.register_module(LOCAL_WRITE.0, LOCAL_WRITE.1, LocalWriteStage(Arc::clone(ctx)))?;
    }
    engine.register_module(CHECKSUM.0, CHECKSUM.1, ChecksumStage(Arc::clone(ctx)))?;
    match redundancy {
        Redundancy::Partner { .. } => engine.register_module(PARTNER.0, PARTNER.1, PartnerStage(Arc::clone(ctx)))?,
        Redundancy::Xor { .. } => engine.register_module(XOR.0, XOR.1, XorStage(Arc::clone(ctx)))?,
        Redundancy::None => {}
    }
    engine.register_module(FLUSH.0, FLUSH.1, FlushStage(Arc::clone(ctx)))?;
    engine.register_module(PRUNE.0, PRUNE.1, PruneStage(Arc::clone(ctx)))?;
    Ok(())
}
