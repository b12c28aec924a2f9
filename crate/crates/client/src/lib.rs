//! Application-facing checkpoint API. One [`ClientHandle`] per rank.
//!
//! In SYNC mode the handle runs the whole pipeline in-process and
//! synchronizes ranks through marker files on scratch. In ASYNC mode it
//! writes L1, meets the other ranks at the backend's barrier, and leaves
//! the remaining levels to the backend.

pub mod barrier;
pub mod conn;
pub mod region;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use mlckpt_core::config::{Config, Mode};
use mlckpt_core::model::{manifest_digest, CheckpointId, Outcome, RegionDescriptor};
use mlckpt_core::pipeline::{Command, CommandKind, Engine, GroupTopology, Ticket, TicketStatus};
use mlckpt_core::recovery::{self, RecoverLevel, VersionCatalog};
use mlckpt_core::resilience::format::{read_header, split_payloads};
use mlckpt_core::resilience::repo::RepositoryBackend;
use mlckpt_core::resilience::stages::{register_default_modules, ModuleContext};
use mlckpt_core::resilience::{layout, write_local};
use mlckpt_core::wire::{self, WireError, WireMessage};

use barrier::{BarrierResult, FileBarrier};
use conn::BackendConn;
pub use region::Region;

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);
const STATUS_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("BAD_RANK: rank {rank} outside 0..{num_ranks}")]
    BadRank { rank: u32, num_ranks: u32 },
    #[error("SCRATCH_UNWRITABLE: {0}")]
    ScratchUnwritable(String),
    #[error("BACKEND_UNREACHABLE: {0}")]
    BackendUnreachable(String),
    #[error("{code}: {detail}")]
    BackendRejected { code: String, detail: String },
    #[error("INVALID_VALUE: {0}")]
    Config(String),
    #[error("ZERO_SIZE: region {0} has zero elements or zero element size")]
    ZeroSize(u32),
    #[error("BUFFER_TOO_SMALL: region {region_id} buffer has {have} bytes, needs {need}")]
    BufferTooSmall { region_id: u32, have: usize, need: u64 },
    #[error("STALE_VERSION: {name} v{version} is not above v{last}")]
    StaleVersion { name: String, version: u32, last: u32 },
    #[error("EMPTY_REGISTRY: no protected regions")]
    EmptyRegistry,
    #[error("INVALID_NAME: {0}")]
    InvalidName(String),
    #[error("VERSION_UNRECOVERABLE: {0}")]
    VersionUnrecoverable(String),
    #[error("REGION_MISMATCH: regions {0:?} unprotected or too small")]
    RegionMismatch(Vec<u32>),
    #[error("DIGEST_MISMATCH: {0}")]
    DigestMismatch(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::BadRank { .. } => "BAD_RANK",
            ClientError::ScratchUnwritable(_) => "SCRATCH_UNWRITABLE",
            ClientError::BackendUnreachable(_) => "BACKEND_UNREACHABLE",
            ClientError::BackendRejected { code, .. } => code,
            ClientError::Config(_) => "INVALID_VALUE",
            ClientError::ZeroSize(_) => "ZERO_SIZE",
            ClientError::BufferTooSmall { .. } => "BUFFER_TOO_SMALL",
            ClientError::StaleVersion { .. } => "STALE_VERSION",
            ClientError::EmptyRegistry => "EMPTY_REGISTRY",
            ClientError::InvalidName(_) => "INVALID_NAME",
            ClientError::VersionUnrecoverable(_) => "VERSION_UNRECOVERABLE",
            ClientError::RegionMismatch(_) => "REGION_MISMATCH",
            ClientError::DigestMismatch(_) => "DIGEST_MISMATCH",
        }
    }
}

#[derive(Clone)]
pub struct ClientOptions {
    /// Distinguishes this job's SYNC barrier markers from earlier runs.
    /// Defaults to `$MLCKPT_JOB`, else the parent process id.
    pub job_token: Option<String>,
    pub barrier_timeout: Duration,
    /// Replaces the configured repository for in-process flushes.
    pub repository: Option<Arc<dyn RepositoryBackend>>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self { job_token: None, barrier_timeout: DEFAULT_BARRIER_TIMEOUT, repository: None }
    }
}

/// Wall-clock split of the most recent `checkpoint` call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointTiming {
    pub level1: Duration,
    pub barrier: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
struct Pending {
    ticket_id: u64,
    ckpt: CheckpointId,
}

pub struct ClientHandle {
    rank: u32,
    num_ranks: u32,
    config: Config,
    registry: BTreeMap<u32, (RegionDescriptor, Region)>,
    versions: BTreeMap<String, u32>,
    pending: Option<Pending>,
    conn: Option<BackendConn>,
    engine: Option<Arc<Engine>>,
    ctx: Arc<ModuleContext>,
    barrier: FileBarrier,
    timing: CheckpointTiming,
    last_ticket: Option<Ticket>,
}

fn default_job_token() -> String {
    std::env::var("MLCKPT_JOB").unwrap_or_else(|_| format!("p{}", std::os::unix::process::parent_id()))
}

impl ClientHandle {
    pub fn init(config: Config, rank: u32, num_ranks: u32) -> Result<Self, ClientError> {
        Self::init_with(config, rank, num_ranks, ClientOptions::default())
    }

    pub fn init_with(config: Config, rank: u32, num_ranks: u32, opts: ClientOptions) -> Result<Self, ClientError> {
        if rank >= num_ranks {
            return Err(ClientError::BadRank { rank, num_ranks });
        }
        config.validate_for_ranks(num_ranks).map_err(|e| ClientError::Config(e.to_string()))?;
        let mut made = 0;
        let mut errors = Vec::new();
        for tier in &config.scratch_tiers {
            match std::fs::create_dir_all(layout::rank_dir(tier, rank)) {
                Ok(()) => made += 1,
                Err(e) => errors.push(format!("{}: {e}", tier.display())),
            }
        }
        if made == 0 {
            return Err(ClientError::ScratchUnwritable(errors.join("; ")));
        }
        let mut ctx = ModuleContext::from_config(&config);
        if let Some(repo) = opts.repository.clone() {
            ctx = ctx.with_repository(repo);
        }
        let ctx = Arc::new(ctx);
        let job = opts.job_token.clone().unwrap_or_else(default_job_token);
        let barrier = FileBarrier::new(&config.scratch_tiers[0], job, opts.barrier_timeout);

        let mut handle = Self {
            rank,
            num_ranks,
            registry: BTreeMap::new(),
            versions: BTreeMap::new(),
            pending: None,
            conn: None,
            engine: None,
            ctx,
            barrier,
            timing: CheckpointTiming::default(),
            last_ticket: None,
            config,
        };
        match handle.config.mode {
            Mode::Sync => {
                let engine = Engine::new();
                register_default_modules(&engine, &handle.ctx, handle.config.redundancy, true)
                    .expect("built-in modules have distinct ids and priorities");
                handle.engine = Some(Arc::new(engine));
            }
            Mode::Async => handle.reconnect()?,
        }
        Ok(handle)
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn num_ranks(&self) -> u32 {
        self.num_ranks
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// The in-process engine (SYNC mode only), e.g. to toggle modules.
    pub fn engine(&self) -> Option<&Arc<Engine>> {
        self.engine.as_ref()
    }

    pub fn last_timing(&self) -> CheckpointTiming {
        self.timing
    }

    /// The last terminal ticket of this rank's own pipeline.
    pub fn last_ticket(&self) -> Option<&Ticket> {
        self.last_ticket.as_ref()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    fn group(&self) -> GroupTopology {
        GroupTopology { num_ranks: self.num_ranks, redundancy: self.config.redundancy }
    }

    /// (Re)opens the backend connection and performs the HELLO exchange.
    /// Work pending on a lost backend is forgotten.
    pub fn reconnect(&mut self) -> Result<(), ClientError> {
        self.conn = None;
        self.pending = None;
        let endpoint = &self.config.backend_endpoint;
        let mut conn = BackendConn::connect(endpoint, self.rank)
            .map_err(|e| ClientError::BackendUnreachable(format!("{}: {e}", endpoint.display())))?;
        let hello = conn.message(wire::HELLO).with("num_ranks", self.num_ranks).with("mode", "async");
        let reply = conn.call(hello).map_err(|e| ClientError::BackendUnreachable(e.to_string()))?;
        if let Some((code, detail)) = reply.error_parts() {
            return Err(ClientError::BackendRejected { code: code.into(), detail: detail.into() });
        }
        if reply.kind != wire::HELLO_ACK {
            return Err(ClientError::BackendUnreachable(format!("unexpected {} to HELLO", reply.kind)));
        }
        self.conn = Some(conn);
        Ok(())
    }

    /// Registers (or rebinds) a region. `buffer` must hold at least
    /// `element_count * element_size` bytes.
    pub fn protect(
        &mut self,
        region_id: u32,
        buffer: Region,
        element_count: u64,
        element_size: u64,
    ) -> Result<Outcome, ClientError> {
        let desc =
            RegionDescriptor::new(region_id, element_count, element_size).map_err(|_| ClientError::ZeroSize(region_id))?;
        let have = buffer.len();
        if (have as u64) < desc.byte_length() {
            return Err(ClientError::BufferTooSmall { region_id, have, need: desc.byte_length() });
        }
        self.registry.insert(region_id, (desc, buffer));
        Ok(Outcome::ok(format!("region {region_id}: {} bytes", desc.byte_length())))
    }

    pub fn unprotect(&mut self, region_id: u32) -> bool {
        self.registry.remove(&region_id).is_some()
    }

    pub fn regions(&self) -> Vec<RegionDescriptor> {
        self.registry.values().map(|(d, _)| *d).collect()
    }

    /// Collective checkpoint. SYNC: OK once every level completed here and
    /// on every rank. ASYNC: DEFERRED once L1 is on scratch everywhere.
    /// Pipeline and barrier failures come back as a FAILURE outcome.
    pub fn checkpoint(&mut self, name: &str, version: u32) -> Result<Outcome, ClientError> {
        let id = CheckpointId::new(name, version, self.rank).map_err(|e| ClientError::InvalidName(e.to_string()))?;
        if self.registry.is_empty() {
            return Err(ClientError::EmptyRegistry);
        }
        if let Some(&last) = self.versions.get(name) {
            if version <= last {
                return Err(ClientError::StaleVersion { name: name.into(), version, last });
            }
        }
        let wait = self.checkpoint_wait();
        if wait.is_failure() {
            warn!("previous checkpoint failed: {}", wait.detail);
        }
        self.versions.insert(name.to_string(), version);

        let start = Instant::now();
        let l1 = self.write_l1(&id);
        let level1 = start.elapsed();
        if let Err(e) = &l1 {
            warn!("L1 write of {id} failed: {e}");
        }
        let outcome = match self.config.mode {
            Mode::Sync => self.checkpoint_sync(&id, l1.as_ref().ok().cloned()),
            Mode::Async => self.checkpoint_async(&id, l1.as_ref().ok().cloned(), start + level1),
        };
        self.timing.level1 = level1;
        self.timing.total = start.elapsed();
        Ok(outcome)
    }

    fn write_l1(&self, id: &CheckpointId) -> Result<PathBuf, String> {
        let guards: Vec<_> = self.registry.values().map(|(d, r)| (*d, r.read())).collect();
        let regions: Vec<(RegionDescriptor, &[u8])> =
            guards.iter().map(|(d, g)| (*d, &g[..d.byte_length() as usize])).collect();
        write_local(&regions, id, &self.config.scratch_tiers, self.num_ranks)
            .map(|a| a.path)
            .map_err(|e| format!("{}: {e}", e.code()))
    }

    fn file_barrier(&mut self, id: &CheckpointId, phase: &str, ok: bool) -> Result<(), String> {
        let t = Instant::now();
        let result = self.barrier.wait(&id.name, id.version, phase, self.rank, self.num_ranks, ok);
        self.timing.barrier += t.elapsed();
        match result {
            Ok(BarrierResult::Released { failed }) if failed.is_empty() => Ok(()),
            Ok(BarrierResult::Released { failed }) => Err(format!("ranks {failed:?} failed {phase}")),
            Ok(BarrierResult::TimedOut { missing }) => Err(format!("BARRIER_TIMEOUT: ranks {missing:?} missing")),
            Err(e) => Err(format!("barrier: {e}")),
        }
    }

    fn checkpoint_sync(&mut self, id: &CheckpointId, l1: Option<PathBuf>) -> Outcome {
        self.timing.barrier = Duration::ZERO;
        let l1_ok = l1.is_some();
        if let Err(e) = self.file_barrier(id, "l1", l1_ok) {
            return Outcome::failure(if l1_ok { e } else { format!("local-write: {id} not written") });
        }
        let cmd = Command {
            kind: CommandKind::Checkpoint,
            ckpt: id.clone(),
            payload_paths: l1.into_iter().collect(),
            group: self.group(),
        };
        let engine = self.engine.as_ref().expect("SYNC handle has an engine");
        let own = match engine.run_pipeline(&cmd) {
            Ok(ticket) => {
                let summary = ticket.summary();
                self.last_ticket = Some(ticket);
                summary
            }
            Err(e) => Outcome::failure(format!("{}: {e}", e.code())),
        };
        match self.file_barrier(id, "done", own.is_ok()) {
            Ok(()) => own,
            Err(_) if own.is_failure() => own,
            Err(e) => Outcome::failure(e),
        }
    }

    fn checkpoint_async(&mut self, id: &CheckpointId, l1: Option<PathBuf>, l1_done: Instant) -> Outcome {
        let group = self.group();
        let Some(conn) = self.conn.as_mut() else {
            return Outcome::failure("backend lost");
        };
        let msg = conn
            .message(wire::BARRIER)
            .with("name", &id.name)
            .with("version", id.version)
            .with("ok", l1.is_some());
        let reply = conn.call(msg);
        self.timing.barrier = l1_done.elapsed();
        let reply = match reply {
            Ok(r) => r,
            Err(e) => return self.lost(e),
        };
        if let Some((code, detail)) = reply.error_parts() {
            return Outcome::failure(format!("{code}: {detail}"));
        }
        if !reply.field::<bool>("all_ok").unwrap_or(false) {
            let failed: Vec<u32> = reply.field("failed").unwrap_or_default();
            return Outcome::failure(format!("local-write: ranks {failed:?} failed L1"));
        }
        let cmd = Command {
            kind: CommandKind::Checkpoint,
            ckpt: id.clone(),
            payload_paths: l1.into_iter().collect(),
            group,
        };
        let msg = conn.message(wire::CKPT_SUBMIT).with("command", &cmd);
        match conn.call(msg) {
            Ok(r) if r.is_error() => {
                let (code, detail) = r.error_parts().unwrap_or_default();
                Outcome::failure(format!("{code}: {detail}"))
            }
            Ok(r) => match r.field::<u64>("ticket_id") {
                Ok(ticket_id) => {
                    self.pending = Some(Pending { ticket_id, ckpt: id.clone() });
                    Outcome::deferred(format!("ticket {ticket_id}"))
                }
                Err(e) => Outcome::failure(e.to_string()),
            },
            Err(e) => self.lost(e),
        }
    }

    fn lost(&mut self, e: WireError) -> Outcome {
        warn!("rank {}: backend connection lost: {e}", self.rank);
        self.conn = None;
        self.pending = None;
        Outcome::failure("backend lost")
    }

    /// Blocks until the in-flight ASYNC checkpoint (if any) is terminal.
    pub fn checkpoint_wait(&mut self) -> Outcome {
        let Some(pending) = self.pending.clone() else {
            return Outcome::ok("nothing pending");
        };
        loop {
            let Some(conn) = self.conn.as_mut() else {
                self.pending = None;
                return Outcome::failure("backend lost");
            };
            let msg = conn.message(wire::STATUS_QUERY).with("ticket_id", pending.ticket_id);
            let reply = match conn.call(msg) {
                Ok(r) => r,
                Err(e) => return self.lost(e),
            };
            if let Some((code, detail)) = reply.error_parts() {
                self.pending = None;
                return Outcome::failure(format!("{code}: {detail}"));
            }
            match reply.field::<Ticket>("ticket") {
                Ok(t) if t.status.is_terminal() => {
                    self.pending = None;
                    let outcome = t.summary();
                    info!("rank {}: {} finished: {outcome}", self.rank, pending.ckpt);
                    self.last_ticket = Some(t);
                    return outcome;
                }
                Ok(_) => std::thread::sleep(STATUS_POLL),
                Err(e) => {
                    self.pending = None;
                    return Outcome::failure(e.to_string());
                }
            }
        }
    }

    /// Status of the in-flight ticket without waiting.
    pub fn poll_pending(&mut self) -> Option<TicketStatus> {
        let pending = self.pending.clone()?;
        let conn = self.conn.as_mut()?;
        let msg = conn.message(wire::STATUS_QUERY).with("ticket_id", pending.ticket_id);
        conn.call(msg).ok()?.field::<Ticket>("ticket").ok().map(|t| t.status)
    }

    fn repository(&self) -> Option<Arc<dyn RepositoryBackend>> {
        match self.ctx.repository() {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("repository {} unavailable: {e}", self.config.persistent);
                None
            }
        }
    }

    pub fn catalog(&self, name: &str) -> VersionCatalog {
        let repo = self.repository();
        recovery::discover(name, &self.config.scratch_tiers, repo.as_deref(), &self.group())
    }

    /// Newest version no greater than `max_version` that every rank can
    /// restore from some level.
    pub fn restart_test(&self, name: &str, max_version: Option<u32>) -> Option<u32> {
        recovery::latest_restorable(&self.catalog(name), &self.group(), max_version)
    }

    /// Loads `version` into the protected regions, running the recovery
    /// cascade if L1 is unusable.
    pub fn restart(&mut self, name: &str, version: u32) -> Result<Outcome, ClientError> {
        let id = CheckpointId::new(name, version, self.rank).map_err(|e| ClientError::InvalidName(e.to_string()))?;
        let catalog = self.catalog(name);
        let repo = self.repository();
        let (artifact, level, log) =
            recovery::materialize(&id, &catalog, &self.config.scratch_tiers, repo.as_deref(), &self.group())
                .map_err(|e| ClientError::VersionUnrecoverable(format!("{e}; {}", e.log().join("; "))))?;
        for line in &log {
            info!("{line}");
        }
        let header = read_header(&artifact.path).map_err(|e| ClientError::VersionUnrecoverable(e.to_string()))?;
        let mismatched: Vec<u32> = header
            .regions
            .iter()
            .filter(|d| match self.registry.get(&d.region_id) {
                Some((_, buf)) => (buf.len() as u64) < d.byte_length(),
                None => true,
            })
            .map(|d| d.region_id)
            .collect();
        if !mismatched.is_empty() {
            return Err(ClientError::RegionMismatch(mismatched));
        }
        let bytes = std::fs::read(&artifact.path).map_err(|e| ClientError::VersionUnrecoverable(e.to_string()))?;
        let payloads = split_payloads(&header, &bytes);
        for (d, payload) in header.regions.iter().zip(&payloads) {
            let (_, buf) = &self.registry[&d.region_id];
            buf.write()[..payload.len()].copy_from_slice(payload);
        }
        let loaded: Vec<Vec<u8>> = header
            .regions
            .iter()
            .map(|d| self.registry[&d.region_id].1.read()[..d.byte_length() as usize].to_vec())
            .collect();
        let digest = manifest_digest(&loaded);
        if digest != header.digest {
            return Err(ClientError::DigestMismatch(format!("loaded {digest}, artifact {}", header.digest)));
        }
        let last = self.versions.entry(name.to_string()).or_insert(version);
        *last = (*last).max(version);
        Ok(Outcome::ok(format!("restored {id} from {}", level_label(level))))
    }

    /// Detaches. `drain` waits for the in-flight checkpoint first; without
    /// it the backend finishes the work on its own.
    pub fn finalize(mut self, drain: bool) -> Outcome {
        let outcome = if drain { self.checkpoint_wait() } else { Outcome::ok("detached") };
        self.conn = None;
        outcome
    }

    /// Sends SHUTDOWN to the backend.
    pub fn shutdown_backend(&mut self) -> Result<(), ClientError> {
        let conn = self.conn.as_mut().ok_or_else(|| ClientError::BackendUnreachable("not connected".into()))?;
        let msg = conn.message(wire::SHUTDOWN);
        conn.call(msg).map_err(|e| ClientError::BackendUnreachable(e.to_string()))?;
        self.conn = None;
        Ok(())
    }

    /// Sends a raw request on the backend connection.
    pub fn backend_call(&mut self, kind: &str, body: serde_json::Map<String, serde_json::Value>) -> Option<WireMessage> {
        let conn = self.conn.as_mut()?;
        let mut msg = conn.message(kind);
        msg.body = body;
        conn.call(msg).ok()
    }
}

fn level_label(level: RecoverLevel) -> &'static str {
    level.as_str()
}
