//! Priority-ordered module pipeline.
//!
//! Modules are triggered one after another in ascending priority. Each handler
//! sees the outcomes of the modules that ran before it and may pass
//! (`SKIPPED`) without aborting; a `FAILURE` aborts the remainder.
//!
//! [`Engine::run_pipeline`] runs a command inline. [`AsyncEngine`] queues
//! commands and runs them on per-rank workers, FIFO within a rank.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Redundancy;
use crate::model::{CheckpointId, Outcome};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("module {0:?} already registered")]
    DuplicateId(String),
    #[error("priority {priority} already taken by {holder:?}")]
    DuplicatePriority { priority: i32, holder: String },
    #[error("unknown module {0:?}")]
    UnknownModule(String),
    #[error("unknown ticket {0}")]
    UnknownTicket(u64),
    #[error("no enabled modules")]
    NoEnabledModules,
    #[error("engine is shutting down")]
    ShuttingDown,
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::DuplicateId(_) => "DUPLICATE_ID",
            PipelineError::DuplicatePriority { .. } => "DUPLICATE_PRIORITY",
            PipelineError::UnknownModule(_) => "UNKNOWN_MODULE",
            PipelineError::UnknownTicket(_) => "UNKNOWN_TICKET",
            PipelineError::NoEnabledModules => "NO_ENABLED_MODULES",
            PipelineError::ShuttingDown => "SHUTTING_DOWN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    Checkpoint,
    Restart,
    FlushOnly,
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTopology {
    pub num_ranks: u32,
    pub redundancy: Redundancy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub kind: CommandKind,
    pub ckpt: CheckpointId,
    pub payload_paths: Vec<PathBuf>,
    pub group: GroupTopology,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub module_id: String,
    pub outcome: Outcome,
}

/// A pipeline stage. Implemented for plain closures as well.
pub trait PipelineModule: Send + Sync {
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome;
}

impl<F> PipelineModule for F
where
    F: Fn(&Command, &[TraceEntry]) -> Outcome + Send + Sync,
{
    fn handle(&self, cmd: &Command, trace: &[TraceEntry]) -> Outcome {
        self(cmd, trace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl TicketStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TicketStatus::Done | TicketStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: u64,
    pub rank: u32,
    pub status: TicketStatus,
    pub per_module: Vec<TraceEntry>,
    pub failed_module: Option<String>,
    /// Microseconds since the Unix epoch.
    pub submitted_us: u64,
    pub started_us: Option<u64>,
    pub finished_us: Option<u64>,
}

impl Ticket {
    fn new(ticket_id: u64, rank: u32) -> Self {
        Self {
            ticket_id,
            rank,
            status: TicketStatus::Queued,
            per_module: Vec::new(),
            failed_module: None,
            submitted_us: now_us(),
            started_us: None,
            finished_us: None,
        }
    }

    pub fn outcome_of(&self, module_id: &str) -> Option<&Outcome> {
        self.per_module.iter().find(|e| e.module_id == module_id).map(|e| &e.outcome)
    }

    /// `OK` when done, `FAILURE` naming the failing module otherwise.
    pub fn summary(&self) -> Outcome {
        match self.status {
            TicketStatus::Done => Outcome::ok(format!("ticket {}", self.ticket_id)),
            TicketStatus::Failed => {
                let module = self.failed_module.clone().unwrap_or_default();
                let detail = self.outcome_of(&module).map(|o| o.detail.clone()).unwrap_or_default();
                Outcome::failure(format!("{module}: {detail}"))
            }
            s => Outcome::deferred(format!("ticket {} {s:?}", self.ticket_id)),
        }
    }
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

struct ModuleEntry {
    module_id: String,
    priority: i32,
    enabled: bool,
    handler: Arc<dyn PipelineModule>,
}

/// Enabled modules frozen at submission time, ascending priority.
#[derive(Clone)]
pub struct Snapshot(Vec<(String, Arc<dyn PipelineModule>)>);

impl Snapshot {
    pub fn module_ids(&self) -> Vec<&str> {
        self.0.iter().map(|(id, _)| id.as_str()).collect()
    }
}

#[derive(Default)]
pub struct Engine {
    modules: RwLock<Vec<ModuleEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleInfo {
    pub module_id: String,
    pub priority: i32,
    pub enabled: bool,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_module(
        &self,
        module_id: &str,
        priority: i32,
        handler: impl PipelineModule + 'static,
    ) -> Result<(), PipelineError> {
        self.register_arc(module_id, priority, Arc::new(handler))
    }

    pub fn register_arc(
        &self,
        module_id: &str,
        priority: i32,
        handler: Arc<dyn PipelineModule>,
    ) -> Result<(), PipelineError> {
        let mut modules = self.modules.write().unwrap();
        if modules.iter().any(|m| m.module_id == module_id) {
            return Err(PipelineError::DuplicateId(module_id.to_string()));
        }
        if let Some(m) = modules.iter().find(|m| m.priority == priority) {
            return Err(PipelineError::DuplicatePriority { priority, holder: m.module_id.clone() });
        }
        let pos = modules.partition_point(|m| m.priority < priority);
        modules.insert(pos, ModuleEntry { module_id: module_id.to_string(), priority, enabled: true, handler });
        Ok(())
    }

    pub fn set_enabled(&self, module_id: &str, enabled: bool) -> Result<(), PipelineError> {
        let mut modules = self.modules.write().unwrap();
        let m = modules
            .iter_mut()
            .find(|m| m.module_id == module_id)
            .ok_or_else(|| PipelineError::UnknownModule(module_id.to_string()))?;
        m.enabled = enabled;
        Ok(())
    }

    pub fn modules(&self) -> Vec<ModuleInfo> {
        self.modules
            .read()
            .unwrap()
            .iter()
            .map(|m| ModuleInfo { module_id: m.module_id.clone(), priority: m.priority, enabled: m.enabled })
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(
            self.modules
                .read()
                .unwrap()
                .iter()
                .filter(|m| m.enabled)
                .map(|m| (m.module_id.clone(), Arc::clone(&m.handler)))
                .collect(),
        )
    }

    /// Runs `cmd` through the currently enabled modules and returns the
    /// terminal ticket.
    pub fn run_pipeline(&self, cmd: &Command) -> Result<Ticket, PipelineError> {
        let snapshot = self.snapshot();
        if snapshot.0.is_empty() {
            return Err(PipelineError::NoEnabledModules);
        }
        let mut ticket = Ticket::new(0, cmd.ckpt.rank);
        execute(&snapshot, cmd, &mut ticket);
        Ok(ticket)
    }
}

fn execute(snapshot: &Snapshot, cmd: &Command, ticket: &mut Ticket) {
    ticket.status = TicketStatus::Running;
    ticket.started_us = Some(now_us());
    for (id, handler) in &snapshot.0 {
        let outcome = handler.handle(cmd, &ticket.per_module);
        let failed = outcome.is_failure();
        ticket.per_module.push(TraceEntry { module_id: id.clone(), outcome });
        if failed {
            ticket.failed_module = Some(id.clone());
            break;
        }
    }
    ticket.status = if ticket.failed_module.is_some() { TicketStatus::Failed } else { TicketStatus::Done };
    ticket.finished_us = Some(now_us());
}

type CompletionHook = Arc<dyn Fn(&Command, &Ticket) + Send + Sync>;
type WorkerSetup = Arc<dyn Fn() + Send + Sync>;

struct Job {
    ticket_id: u64,
    cmd: Command,
    snapshot: Snapshot,
}

#[derive(Default)]
struct RankQueue {
    pending: VecDeque<Job>,
    worker_active: bool,
}

#[derive(Default)]
struct AsyncState {
    next_id: u64,
    tickets: HashMap<u64, Ticket>,
    queues: HashMap<u32, RankQueue>,
    shutting_down: bool,
}

struct AsyncInner {
    engine: Arc<Engine>,
    state: Mutex<AsyncState>,
    changed: Condvar,
    on_complete: Option<CompletionHook>,
    worker_setup: Option<WorkerSetup>,
}

/// Queue-backed engine: `submit` returns immediately, pipelines run on
/// per-rank worker threads.
#[derive(Clone)]
pub struct AsyncEngine {
    inner: Arc<AsyncInner>,
}

pub struct AsyncEngineBuilder {
    engine: Arc<Engine>,
    on_complete: Option<CompletionHook>,
    worker_setup: Option<WorkerSetup>,
}

impl AsyncEngineBuilder {
    /// Called on the worker thread after each terminal ticket.
    pub fn on_complete(mut self, hook: impl Fn(&Command, &Ticket) + Send + Sync + 'static) -> Self {
        self.on_complete = Some(Arc::new(hook));
        self
    }

    /// Called once at the start of each worker thread.
    pub fn worker_setup(mut self, setup: impl Fn() + Send + Sync + 'static) -> Self {
        self.worker_setup = Some(Arc::new(setup));
        self
    }

    pub fn build(self) -> AsyncEngine {
        AsyncEngine {
            inner: Arc::new(AsyncInner {
                engine: self.engine,
                state: Mutex::new(AsyncState { next_id: 1, ..Default::default() }),
                changed: Condvar::new(),
                on_complete: self.on_complete,
                worker_setup: self.worker_setup,
            }),
        }
    }
}

impl AsyncEngine {
    pub fn builder(engine: Arc<Engine>) -> AsyncEngineBuilder {
        AsyncEngineBuilder { engine, on_complete: None, worker_setup: None }
    }

    pub fn new(engine: Arc<Engine>) -> Self {
        Self::builder(engine).build()
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.inner.engine
    }

    pub fn submit(&self, cmd: Command) -> Result<Ticket, PipelineError> {
        let snapshot = self.inner.engine.snapshot();
        if snapshot.0.is_empty() {
            return Err(PipelineError::NoEnabledModules);
        }
        let rank = cmd.ckpt.rank;
        let mut st = self.inner.state.lock().unwrap();
        if st.shutting_down {
            return Err(PipelineError::ShuttingDown);
        }
        let ticket_id = st.next_id;
        st.next_id += 1;
        let ticket = Ticket::new(ticket_id, rank);
        st.tickets.insert(ticket_id, ticket.clone());
        let queue = st.queues.entry(rank).or_default();
        queue.pending.push_back(Job { ticket_id, cmd, snapshot });
        if !queue.worker_active {
            queue.worker_active = true;
            let inner = Arc::clone(&self.inner);
            std::thread::Builder::new()
                .name(format!("pipeline-r{rank}"))
                .spawn(move || worker(inner, rank))
                .expect("spawn pipeline worker");
        }
        Ok(ticket)
    }

    pub fn poll(&self, ticket_id: u64) -> Result<Ticket, PipelineError> {
        self.inner
            .state
            .lock()
            .unwrap()
            .tickets
            .get(&ticket_id)
            .cloned()
            .ok_or(PipelineError::UnknownTicket(ticket_id))
    }

    /// Blocks until the ticket is terminal or `timeout` elapses; returns the
    /// latest snapshot either way.
    pub fn wait(&self, ticket_id: u64, timeout: Duration) -> Result<Ticket, PipelineError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock().unwrap();
        loop {
            let t = st.tickets.get(&ticket_id).ok_or(PipelineError::UnknownTicket(ticket_id))?;
            let now = Instant::now();
            if t.status.is_terminal() || now >= deadline {
                return Ok(t.clone());
            }
            st = self.inner.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    /// Blocks until no work is queued or running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock().unwrap();
        loop {
            if st.queues.values().all(|q| !q.worker_active) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.inner.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    /// Rejects further submissions; queued work still runs.
    pub fn close(&self) {
        self.inner.state.lock().unwrap().shutting_down = true;
    }
}

fn worker(inner: Arc<AsyncInner>, rank: u32) {
    if let Some(setup) = &inner.worker_setup {
        setup();
    }
    loop {
        let job = {
            let mut st = inner.state.lock().unwrap();
            let queue = st.queues.get_mut(&rank).expect("queue exists while worker runs");
            match queue.pending.pop_front() {
                Some(job) => {
                    if let Some(t) = st.tickets.get_mut(&job.ticket_id) {
                        t.status = TicketStatus::Running;
                        t.started_us = Some(now_us());
                    }
                    inner.changed.notify_all();
                    job
                }
                None => {
                    queue.worker_active = false;
                    inner.changed.notify_all();
                    return;
                }
            }
        };
        let mut ticket = inner.state.lock().unwrap().tickets[&job.ticket_id].clone();
        execute(&job.snapshot, &job.cmd, &mut ticket);
        if let Some(hook) = &inner.on_complete {
            hook(&job.cmd, &ticket);
        }
        let mut st = inner.state.lock().unwrap();
        st.tickets.insert(job.ticket_id, ticket);
        inner.changed.notify_all();
    }
}

/// Asks the OS for the lowest scheduling priority an unprivileged thread can
/// get. Returns whether the request was accepted.
pub fn lower_current_thread_priority() -> bool {
    #[cfg(target_os = "linux")]
    unsafe {
        let tid = libc::syscall(libc::SYS_gettid) as libc::id_t;
        libc::setpriority(libc::PRIO_PROCESS, tid, 19) == 0
    }
    #[cfg(all(unix, not(target_os = "linux")))]
    unsafe {
        libc::setpriority(libc::PRIO_PROCESS, 0, 19) == 0
    }
    #[cfg(not(unix))]
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutcomeCode;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn cmd(rank: u32) -> Command {
        Command {
            kind: CommandKind::Checkpoint,
            ckpt: CheckpointId::new("t", 1, rank).unwrap(),
            payload_paths: vec![PathBuf::from("/x")],
            group: GroupTopology { num_ranks: 4, redundancy: Redundancy::None },
        }
    }

    fn ok_module(tag: &'static str) -> impl PipelineModule {
        move |_: &Command, _: &[TraceEntry]| Outcome::ok(tag)
    }

    fn ids(t: &Ticket) -> Vec<&str> {
        t.per_module.iter().map(|e| e.module_id.as_str()).collect()
    }

    #[test]
    fn custom_module_runs_by_priority() {
        let e = Engine::new();
        e.register_module("local", 10, ok_module("l")).unwrap();
        e.register_module("flush", 30, ok_module("f")).unwrap();
        e.register_module("compress", 15, ok_module("c")).unwrap();
        let t = e.run_pipeline(&cmd(0)).unwrap();
        assert_eq!(t.status, TicketStatus::Done);
        assert_eq!(ids(&t), ["local", "compress", "flush"]);
    }

    #[test]
    fn duplicates_rejected() {
        let e = Engine::new();
        e.register_module("a", 10, ok_module("a")).unwrap();
        assert_eq!(e.register_module("a", 11, ok_module("a")), Err(PipelineError::DuplicateId("a".into())));
        assert!(matches!(e.register_module("b", 10, ok_module("b")), Err(PipelineError::DuplicatePriority { .. })));
    }

    #[test]
    fn enable_disable() {
        let e = Engine::new();
        e.register_module("local", 10, ok_module("l")).unwrap();
        e.register_module("xor", 30, ok_module("x")).unwrap();
        e.set_enabled("xor", false).unwrap();
        assert_eq!(ids(&e.run_pipeline(&cmd(0)).unwrap()), ["local"]);
        e.set_enabled("xor", true).unwrap();
        assert_eq!(ids(&e.run_pipeline(&cmd(0)).unwrap()), ["local", "xor"]);
        assert_eq!(e.set_enabled("nope", true), Err(PipelineError::UnknownModule("nope".into())));
        e.set_enabled("local", false).unwrap();
        e.set_enabled("xor", false).unwrap();
        assert_eq!(e.run_pipeline(&cmd(0)).unwrap_err(), PipelineError::NoEnabledModules);
    }

    #[test]
    fn failure_aborts() {
        let e = Engine::new();
        let flush_calls = Arc::new(AtomicUsize::new(0));
        let fc = Arc::clone(&flush_calls);
        e.register_module("local", 10, ok_module("l")).unwrap();
        e.register_module("checksum", 20, |_: &Command, _: &[TraceEntry]| Outcome::failure("digest"))
            .unwrap();
        e.register_module("flush", 30, move |_: &Command, _: &[TraceEntry]| {
            fc.fetch_add(1, Ordering::SeqCst);
            Outcome::ok("")
        })
        .unwrap();
        let t = e.run_pipeline(&cmd(0)).unwrap();
        assert_eq!(t.status, TicketStatus::Failed);
        assert_eq!(t.failed_module.as_deref(), Some("checksum"));
        assert_eq!(flush_calls.load(Ordering::SeqCst), 0);
        assert_eq!(ids(&t), ["local", "checksum"]);
        assert_eq!(t.summary().code, OutcomeCode::Failure);
        assert!(t.summary().detail.starts_with("checksum"));
    }

    #[test]
    fn gate_skips_downstream() {
        let e = Engine::new();
        e.register_module("interval-gate", 5, |_: &Command, _: &[TraceEntry]| Outcome::skipped("not due"))
            .unwrap();
        e.register_module("local", 10, ok_module("l")).unwrap();
        e.register_module("flush", 40, |_: &Command, trace: &[TraceEntry]| {
            let gated = trace.iter().any(|t| t.module_id == "interval-gate" && t.outcome.is_skipped());
            if gated {
                Outcome::skipped("gated by interval-gate")
            } else {
                Outcome::ok("flushed")
            }
        })
        .unwrap();
        let t = e.run_pipeline(&cmd(0)).unwrap();
        assert_eq!(t.status, TicketStatus::Done);
        assert_eq!(t.outcome_of("local").unwrap().code, OutcomeCode::Ok);
        assert_eq!(t.outcome_of("flush").unwrap(), &Outcome::skipped("gated by interval-gate"));
    }

    #[test]
    fn async_submit_poll() {
        let e = Arc::new(Engine::new());
        let gate = Arc::new((Mutex::new(false), Condvar::new()));
        let g = Arc::clone(&gate);
        e.register_module("slow", 10, move |_: &Command, _: &[TraceEntry]| {
            let (m, c) = &*g;
            let mut open = m.lock().unwrap();
            while !*open {
                open = c.wait(open).unwrap();
            }
            Outcome::ok("")
        })
        .unwrap();
        let ae = AsyncEngine::new(e);
        let t = ae.submit(cmd(0)).unwrap();
        assert_eq!(t.status, TicketStatus::Queued);
        let snap = ae.poll(t.ticket_id).unwrap();
        assert!(matches!(snap.status, TicketStatus::Queued | TicketStatus::Running));
        {
            let (m, c) = &*gate;
            *m.lock().unwrap() = true;
            c.notify_all();
        }
        let done = ae.wait(t.ticket_id, Duration::from_secs(5)).unwrap();
        assert_eq!(done.status, TicketStatus::Done);
        assert_eq!(ids(&done), ["slow"]);
        assert_eq!(ae.poll(999), Err(PipelineError::UnknownTicket(999)));
        assert!(ae.wait_idle(Duration::from_secs(5)));
    }

    #[test]
    fn async_fifo_per_rank() {
        let e = Arc::new(Engine::new());
        e.register_module("work", 10, |_: &Command, _: &[TraceEntry]| {
            std::thread::sleep(Duration::from_millis(3));
            Outcome::ok("")
        })
        .unwrap();
        let ae = AsyncEngine::new(e);
        let mut per_rank: HashMap<u32, Vec<u64>> = HashMap::new();
        for i in 0..12 {
            let r = i % 3;
            per_rank.entry(r).or_default().push(ae.submit(cmd(r)).unwrap().ticket_id);
        }
        assert!(ae.wait_idle(Duration::from_secs(10)));
        for ids in per_rank.values() {
            for w in ids.windows(2) {
                let a = ae.poll(w[0]).unwrap();
                let b = ae.poll(w[1]).unwrap();
                assert!(a.finished_us.unwrap() <= b.started_us.unwrap());
            }
        }
    }

    #[test]
    fn disable_after_submit_does_not_affect_queued() {
        let e = Arc::new(Engine::new());
        let hold = Arc::new(Mutex::new(()));
        let guard = hold.lock().unwrap();
        let h = Arc::clone(&hold);
        e.register_module("a", 10, move |_: &Command, _: &[TraceEntry]| {
            drop(h.lock().unwrap());
            Outcome::ok("")
        })
        .unwrap();
        e.register_module("b", 20, ok_module("b")).unwrap();
        let ae = AsyncEngine::new(Arc::clone(&e));
        let t1 = ae.submit(cmd(0)).unwrap();
        e.set_enabled("b", false).unwrap();
        let t2 = ae.submit(cmd(0)).unwrap();
        drop(guard);
        assert_eq!(ids(&ae.wait(t1.ticket_id, Duration::from_secs(5)).unwrap()), ["a", "b"]);
        assert_eq!(ids(&ae.wait(t2.ticket_id, Duration::from_secs(5)).unwrap()), ["a"]);
    }
}
