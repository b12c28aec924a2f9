use std::os::unix::net::UnixListener as StdListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use log::{debug, info, warn};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::UnixStream;
use tokio::sync::{mpsc, Notify};

use mlckpt_core::config::Config;
use mlckpt_core::pipeline::{
    lower_current_thread_priority, AsyncEngine, Command, Engine, PipelineError, TicketStatus,
};
use mlckpt_core::resilience::stages::{register_default_modules, ModuleContext, FLUSH};
use mlckpt_core::wire::{self, encode_frame, WireMessage, MAX_FRAME};

use crate::barrier::{BarrierHub, BarrierReply};
use crate::state::StateStore;
use crate::{bind_endpoint, BackendError, BackendOptions};

struct Membership {
    num_ranks: Option<u32>,
    sessions: usize,
}

struct Shared {
    engine: AsyncEngine,
    barriers: BarrierHub,
    state: Arc<Mutex<StateStore>>,
    members: Mutex<Membership>,
    shutdown: Notify,
}

pub struct Backend {
    listener: StdListener,
    endpoint: PathBuf,
    engine: AsyncEngine,
    state: Arc<Mutex<StateStore>>,
    opts: BackendOptions,
}

impl Backend {
    pub fn bind(config: &Config, opts: BackendOptions) -> Result<Self, BackendError> {
        let listener = bind_endpoint(&config.backend_endpoint)?;
        std::fs::create_dir_all(&config.scratch_tiers[0])?;
        let (state, _) = StateStore::open(&config.scratch_tiers[0]);
        let state = Arc::new(Mutex::new(state));

        let mut ctx = ModuleContext::from_config(config);
        if let Some(repo) = opts.repository.clone() {
            ctx = ctx.with_repository(repo);
        }
        let ctx = Arc::new(ctx);
        let engine = Engine::new();
        register_default_modules(&engine, &ctx, config.redundancy, false)
            .expect("built-in modules have distinct ids and priorities");
        let hook_state = Arc::clone(&state);
        let mut builder = AsyncEngine::builder(Arc::new(engine)).on_complete(move |cmd: &Command, ticket| {
            let flushed = ticket.status == TicketStatus::Done && ticket.outcome_of(FLUSH.0).is_some_and(|o| o.is_ok());
            if flushed {
                let id = &cmd.ckpt;
                hook_state.lock().unwrap().raise(&id.name, id.rank, id.version);
            }
        });
        if opts.lower_priority {
            builder = builder.worker_setup(|| {
                if !lower_current_thread_priority() {
                    debug!("scheduling priority request refused");
                }
            });
        }
        Ok(Self { listener, endpoint: config.backend_endpoint.clone(), engine: builder.build(), state, opts })
    }

    pub fn run(self) -> Result<(), BackendError> {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let endpoint = self.endpoint.clone();
        let result = rt.block_on(self.serve());
        let _ = std::fs::remove_file(&endpoint);
        result
    }

    async fn serve(self) -> Result<(), BackendError> {
        self.listener.set_nonblocking(true)?;
        let listener = tokio::net::UnixListener::from_std(self.listener)?;
        info!("backend listening on {}", self.endpoint.display());
        let shared = Arc::new(Shared {
            engine: self.engine,
            barriers: BarrierHub::new(self.opts.barrier_timeout),
            state: self.state,
            members: Mutex::new(Membership { num_ranks: None, sessions: 0 }),
            shutdown: Notify::new(),
        });
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        tokio::spawn(connection(stream, Arc::clone(&shared)));
                    }
                    Err(e) => warn!("accept: {e}"),
                },
                _ = shared.shutdown.notified() => break,
            }
        }
        info!("shutting down; draining queued pipelines");
        shared.engine.close();
        let engine = shared.engine.clone();
        let drain = self.opts.drain_timeout;
        let drained = tokio::task::spawn_blocking(move || engine.wait_idle(drain)).await.unwrap_or(false);
        if !drained {
            warn!("pipelines still running at exit");
        }
        Ok(())
    }
}

#[derive(Default)]
struct Session {
    rank: Option<u32>,
    last_seq: Option<u64>,
}

async fn connection(stream: UnixStream, shared: Arc<Shared>) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<WireMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if wr.write_all(&encode_frame(&msg.to_json())).await.is_err() {
                break;
            }
        }
    });
    let mut session = Session::default();
    loop {
        let mut len = [0u8; 4];
        if rd.read_exact(&mut len).await.is_err() {
            break;
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_FRAME {
            // The stream cannot be resynchronized past an unread frame.
            let _ = tx.send(WireMessage::error(0, 0, "FRAME_TOO_LARGE", format!("{len} bytes exceeds {MAX_FRAME}")));
            break;
        }
        let mut buf = vec![0u8; len as usize];
        if rd.read_exact(&mut buf).await.is_err() {
            break;
        }
        let msg = match WireMessage::from_json(&buf) {
            Ok(m) => m,
            Err(e) => {
                let (rank, seq) = salvage_ids(&buf);
                let _ = tx.send(WireMessage::error(rank, seq, "BAD_MESSAGE", e.to_string()));
                continue;
            }
        };
        if let Some(reply) = handle(msg, &shared, &tx, &mut session) {
            let _ = tx.send(reply);
        }
    }
    if session.rank.is_some() {
        shared.members.lock().unwrap().sessions -= 1;
    }
    drop(tx);
    let _ = writer.await;
}

/// Best-effort rank/seq from a frame that failed validation, so the error
/// reply can still be matched.
fn salvage_ids(buf: &[u8]) -> (u32, u64) {
    let v: Value = serde_json::from_slice(buf).unwrap_or(Value::Null);
    let rank = v.get("rank").and_then(Value::as_u64).and_then(|r| u32::try_from(r).ok()).unwrap_or(0);
    let seq = v.get("seq").and_then(Value::as_u64).unwrap_or(0);
    (rank, seq)
}

fn pipeline_error(msg: &WireMessage, e: PipelineError) -> WireMessage {
    WireMessage::error(msg.rank, msg.seq, e.code(), e.to_string())
}

/// Returns the immediate reply, or None when a spawned task will answer.
fn handle(
    msg: WireMessage,
    shared: &Arc<Shared>,
    tx: &mpsc::UnboundedSender<WireMessage>,
    session: &mut Session,
) -> Option<WireMessage> {
    let err = |code: &str, detail: String| Some(WireMessage::error(msg.rank, msg.seq, code, detail));
    if let Some(last) = session.last_seq {
        if msg.seq <= last {
            return err("BAD_SEQ", format!("seq {} not above {last}", msg.seq));
        }
    }
    session.last_seq = Some(msg.seq);
    let reply = |kind: &str| WireMessage::new(kind, msg.rank, msg.seq);

    match msg.kind.as_str() {
        wire::HELLO => {
            let num_ranks: u32 = match msg.field("num_ranks") {
                Ok(n) if n >= 1 => n,
                Ok(_) => return err("BAD_MESSAGE", "num_ranks must be >= 1".into()),
                Err(e) => return err(e.code(), e.to_string()),
            };
            if msg.rank >= num_ranks {
                return err("BAD_RANK", format!("rank {} outside 0..{num_ranks}", msg.rank));
            }
            let mut members = shared.members.lock().unwrap();
            let others = members.sessions - usize::from(session.rank.is_some());
            match members.num_ranks {
                Some(n) if n != num_ranks && others > 0 => {
                    return err("RANK_MISMATCH", format!("job has {n} ranks, HELLO says {num_ranks}"));
                }
                _ => members.num_ranks = Some(num_ranks),
            }
            if session.rank.is_none() {
                members.sessions += 1;
            }
            session.rank = Some(msg.rank);
            Some(reply(wire::HELLO_ACK).with("num_ranks", num_ranks).with("mode", "async"))
        }
        wire::BARRIER => {
            let Some(num_ranks) = joined(shared, session) else {
                return err("NO_HELLO", "BARRIER before HELLO".into());
            };
            if msg.rank >= num_ranks {
                return err("BAD_RANK", format!("rank {} outside 0..{num_ranks}", msg.rank));
            }
            let name = match msg.field::<String>("name") {
                Ok(n) => n,
                Err(e) => return err(e.code(), e.to_string()),
            };
            let version = match msg.field::<u32>("version") {
                Ok(v) => v,
                Err(e) => return err(e.code(), e.to_string()),
            };
            let ok = match msg.opt_field::<bool>("ok") {
                Ok(ok) => ok.unwrap_or(true),
                Err(e) => return err(e.code(), e.to_string()),
            };
            let rx = match shared.barriers.arrive(&name, version, msg.rank, num_ranks, ok) {
                Ok(rx) => rx,
                Err(_) => {
                    return err("DUPLICATE_BARRIER", format!("rank {} already arrived at {name} v{version}", msg.rank))
                }
            };
            let tx = tx.clone();
            let (rank, seq) = (msg.rank, msg.seq);
            tokio::spawn(async move {
                let out = match rx.await {
                    Ok(BarrierReply::Released { failed }) => WireMessage::new(wire::BARRIER_RELEASE, rank, seq)
                        .with("name", &name)
                        .with("version", version)
                        .with("all_ok", failed.is_empty())
                        .with("failed", failed),
                    Ok(BarrierReply::TimedOut { missing }) => {
                        WireMessage::error(rank, seq, "BARRIER_TIMEOUT", format!("ranks {missing:?} missing"))
                            .with("missing", missing)
                    }
                    Err(_) => WireMessage::error(rank, seq, "BARRIER_TIMEOUT", "barrier dropped"),
                };
                let _ = tx.send(out);
            });
            None
        }
        wire::CKPT_SUBMIT => {
            let Some(num_ranks) = joined(shared, session) else {
                return err("NO_HELLO", "CKPT_SUBMIT before HELLO".into());
            };
            let cmd: Command = match msg.field("command") {
                Ok(c) => c,
                Err(e) => return err(e.code(), e.to_string()),
            };
            if cmd.ckpt.rank >= num_ranks || cmd.group.num_ranks != num_ranks {
                return err("BAD_RANK", format!("command for rank {} of {}", cmd.ckpt.rank, cmd.group.num_ranks));
            }
            if let Err(e) = mlckpt_core::model::validate_name(&cmd.ckpt.name) {
                return err("INVALID_NAME", e.to_string());
            }
            match shared.engine.submit(cmd) {
                Ok(t) => Some(reply(wire::CKPT_ACK).with("ticket_id", t.ticket_id).with("status", t.status)),
                Err(e) => Some(pipeline_error(&msg, e)),
            }
        }
        wire::STATUS_QUERY => {
            if let Some(v) = msg.body.get("ticket_id") {
                let Some(id) = v.as_u64() else {
                    return err("BAD_MESSAGE", "ticket_id must be an unsigned integer".into());
                };
                return match shared.engine.poll(id) {
                    Ok(t) => Some(reply(wire::STATUS_REPLY).with("ticket", t)),
                    Err(e) => Some(pipeline_error(&msg, e)),
                };
            }
            let num_ranks = shared.members.lock().unwrap().num_ranks;
            let state = shared.state.lock().unwrap();
            let marks = state.watermarks();
            if let Some(v) = msg.body.get("name") {
                let Some(name) = v.as_str() else {
                    return err("BAD_MESSAGE", "name must be a string".into());
                };
                let per_rank = marks.watermarks.get(name).cloned().unwrap_or_default();
                let group = num_ranks.and_then(|n| marks.group(name, n));
                return Some(reply(wire::STATUS_REPLY).with("name", name).with("watermarks", per_rank).with("group_watermark", group));
            }
            Some(
                reply(wire::STATUS_REPLY)
                    .with("num_ranks", num_ranks)
                    .with("watermarks", json!(marks.watermarks))
                    .with("open_barriers", shared.barriers.open_count()),
            )
        }
        wire::SHUTDOWN => {
            shared.shutdown.notify_one();
            Some(reply(wire::STATUS_REPLY).with("shutting_down", true))
        }
        other => err("UNKNOWN_TYPE", format!("cannot handle {other:?}")),
    }
}

fn joined(shared: &Shared, session: &Session) -> Option<u32> {
    session.rank?;
    shared.members.lock().unwrap().num_ranks
}
