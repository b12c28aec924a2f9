use std::os::unix::net::UnixStream;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mlckpt_backend::{BackendError, BackendOptions, BackendThread, StateStore};
use mlckpt_core::config::Config;
use mlckpt_core::model::{CheckpointId, RegionDescriptor};
use mlckpt_core::pipeline::{Command, CommandKind, GroupTopology, Ticket, TicketStatus};
use mlckpt_core::resilience::repo::{FaultInjectingRepository, FileRepository, RepositoryBackend};
use mlckpt_core::resilience::write_local;
use mlckpt_core::wire::{self, WireMessage};

fn config(root: &Path, group: &str) -> Config {
    let group = if group.is_empty() { "xor_group_size = 2" } else { group };
    let text = format!(
        "scratch = {0}/s0, {0}/s1\npersistent = file://{0}/repo\nmode = async\n{group}\n\
         backend_endpoint = {0}/be.sock\n",
        root.display()
    );
    Config::parse(&text).unwrap()
}

fn opts() -> BackendOptions {
    BackendOptions { barrier_timeout: Duration::from_millis(300), ..Default::default() }
}

struct Conn {
    s: UnixStream,
    rank: u32,
    seq: u64,
}

impl Conn {
    fn open(cfg: &Config, rank: u32) -> Self {
        let s = UnixStream::connect(&cfg.backend_endpoint).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        Self { s, rank, seq: 0 }
    }

    fn msg(&mut self, kind: &str) -> WireMessage {
        self.seq += 1;
        WireMessage::new(kind, self.rank, self.seq)
    }

    fn call(&mut self, m: WireMessage) -> WireMessage {
        wire::write_message(&mut self.s, &m).unwrap();
        let r = wire::read_message(&mut self.s).unwrap().expect("reply");
        assert_eq!(r.seq, m.seq);
        r
    }

    fn hello(&mut self, num_ranks: u32) -> WireMessage {
        let m = self.msg(wire::HELLO).with("num_ranks", num_ranks);
        self.call(m)
    }
}

fn write_l1(cfg: &Config, name: &str, version: u32, rank: u32, k: u32) -> Command {
    let id = CheckpointId::new(name, version, rank).unwrap();
    let data: Vec<u8> = (0..1000u32).map(|i| (i * 7 + rank * 13 + version) as u8).collect();
    let art = write_local(&[(RegionDescriptor::new(0, 1000, 1).unwrap(), &data)], &id, &cfg.scratch_tiers, k).unwrap();
    Command {
        kind: CommandKind::Checkpoint,
        ckpt: id,
        payload_paths: vec![art.path],
        group: GroupTopology { num_ranks: k, redundancy: cfg.redundancy },
    }
}

fn wait_ticket(conn: &mut Conn, id: u64) -> Ticket {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let m = conn.msg(wire::STATUS_QUERY).with("ticket_id", id);
        let t: Ticket = conn.call(m).field("ticket").unwrap();
        if t.status.is_terminal() || Instant::now() > deadline {
            return t;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn hello_ack_and_endpoint_busy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let be = BackendThread::spawn(&cfg, opts()).unwrap();
    let mut c = Conn::open(&cfg, 0);
    let ack = c.hello(4);
    assert_eq!(ack.kind, wire::HELLO_ACK);
    assert_eq!(ack.field::<u32>("num_ranks").unwrap(), 4);
    assert_eq!(ack.str_field("mode"), Some("async"));

    match BackendThread::spawn(&cfg, opts()) {
        Err(e @ BackendError::EndpointBusy(_)) => assert_eq!(e.code(), "ENDPOINT_BUSY"),
        other => panic!("expected ENDPOINT_BUSY, got {:?}", other.err()),
    }
    be.shutdown().unwrap();
    assert!(!cfg.backend_endpoint.exists());
}

#[test]
fn stale_socket_file_is_replaced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    drop(std::os::unix::net::UnixListener::bind(&cfg.backend_endpoint).unwrap());
    assert!(cfg.backend_endpoint.exists());
    let be = BackendThread::spawn(&cfg, opts()).unwrap();
    assert_eq!(Conn::open(&cfg, 0).hello(1).kind, wire::HELLO_ACK);
    be.shutdown().unwrap();
}

#[test]
fn unknown_type_keeps_connection_open() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let _be = BackendThread::spawn(&cfg, opts()).unwrap();
    let mut c = Conn::open(&cfg, 0);
    let m = c.msg("FROBNICATE");
    let r = c.call(m);
    assert_eq!(r.error_parts().unwrap().0, "UNKNOWN_TYPE");
    let m = c.msg(wire::BARRIER).with("name", "x").with("version", 1);
    assert_eq!(c.call(m).error_parts().unwrap().0, "NO_HELLO");
    assert_eq!(c.hello(1).kind, wire::HELLO_ACK);
    // Missing mandatory field: still answered, with the salvaged seq.
    wire::write_message(&mut c.s, &WireMessage::new(wire::HELLO, 0, 99)).unwrap();
    let r = wire::read_message(&mut c.s).unwrap().unwrap();
    assert_eq!((r.seq, r.error_parts().unwrap().0), (99, "BAD_MESSAGE"));
    let raw = br#"{"type":"HELLO","seq":100}"#;
    std::io::Write::write_all(&mut c.s, &wire::encode_frame(raw)).unwrap();
    let r = wire::read_message(&mut c.s).unwrap().unwrap();
    assert_eq!((r.seq, r.error_parts().unwrap().0), (100, "BAD_MESSAGE"));
}

#[test]
fn barrier_release_timeout_and_duplicate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let _be = BackendThread::spawn(&cfg, opts()).unwrap();
    let threads: Vec<_> = (0..4u32)
        .map(|r| {
            let cfg = cfg.clone();
            std::thread::spawn(move || {
                let mut c = Conn::open(&cfg, r);
                c.hello(4);
                std::thread::sleep(Duration::from_millis(15 * r as u64));
                let sent = Instant::now();
                let m = c.msg(wire::BARRIER).with("name", "b").with("version", 1).with("ok", true);
                let rel = c.call(m);
                (rel, sent)
            })
        })
        .collect();
    let results: Vec<_> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    let last_arrival = results.iter().map(|(_, sent)| *sent).max().unwrap();
    for (rel, _) in &results {
        assert_eq!(rel.kind, wire::BARRIER_RELEASE);
        assert!(rel.field::<bool>("all_ok").unwrap());
    }
    assert!(last_arrival.elapsed() < Duration::from_secs(5));

    // 3 of 4 arrive.
    let threads: Vec<_> = (0..3u32)
        .map(|r| {
            let cfg = cfg.clone();
            std::thread::spawn(move || {
                let mut c = Conn::open(&cfg, r);
                c.hello(4);
                let m = c.msg(wire::BARRIER).with("name", "b").with("version", 2);
                c.call(m)
            })
        })
        .collect();
    for t in threads {
        let r = t.join().unwrap();
        assert_eq!(r.error_parts().unwrap().0, "BARRIER_TIMEOUT");
        assert_eq!(r.field::<Vec<u32>>("missing").unwrap(), vec![3]);
    }

    let mut c = Conn::open(&cfg, 1);
    c.hello(4);
    let m = c.msg(wire::BARRIER).with("name", "b").with("version", 1);
    assert_eq!(c.call(m).error_parts().unwrap().0, "DUPLICATE_BARRIER");
}

#[test]
fn submitted_pipeline_runs_and_raises_watermark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let be = BackendThread::spawn(&cfg, opts()).unwrap();
    let mut conns: Vec<Conn> = (0..2).map(|r| Conn::open(&cfg, r)).collect();
    let mut tickets = Vec::new();
    for c in conns.iter_mut() {
        c.hello(2);
    }
    for v in 1..=2 {
        for (r, c) in conns.iter_mut().enumerate() {
            let cmd = write_l1(&cfg, "wm", v, r as u32, 2);
            let m = c.msg(wire::CKPT_SUBMIT).with("command", &cmd);
            let ack = c.call(m);
            assert_eq!(ack.kind, wire::CKPT_ACK, "{ack:?}");
            tickets.push((r, ack.field::<u64>("ticket_id").unwrap()));
        }
    }
    let mut done = Vec::new();
    for (r, id) in &tickets {
        let t = wait_ticket(&mut conns[*r], *id);
        assert_eq!(t.status, TicketStatus::Done, "{t:?}");
        let trace: Vec<&str> = t.per_module.iter().map(|e| e.module_id.as_str()).collect();
        assert_eq!(trace, ["checksum", "xor", "flush", "prune"]);
        done.push((*r, t));
    }
    // FIFO per rank: v1 finishes before v2 starts.
    for r in 0..2 {
        let mine: Vec<&Ticket> = done.iter().filter(|(rr, _)| *rr == r).map(|(_, t)| t).collect();
        assert!(mine[0].finished_us.unwrap() <= mine[1].started_us.unwrap());
    }
    let m = conns[0].msg(wire::STATUS_QUERY).with("name", "wm");
    let st = conns[0].call(m);
    assert_eq!(st.field::<Option<u32>>("group_watermark").unwrap(), Some(2));
    drop(conns);
    be.shutdown().unwrap();

    // The oracle is the persisted file itself.
    let (store, _) = StateStore::open(&cfg.scratch_tiers[0]);
    assert_eq!(store.watermarks().get("wm", 0), Some(2));
    assert_eq!(store.watermarks().get("wm", 1), Some(2));

    let _be = BackendThread::spawn(&cfg, opts()).unwrap();
    let mut c = Conn::open(&cfg, 0);
    let m = c.msg(wire::STATUS_QUERY).with("name", "wm");
    let st = c.call(m);
    let per_rank: std::collections::BTreeMap<String, u32> = st.field("watermarks").unwrap();
    assert_eq!(per_rank.get("0"), Some(&2));
    assert_eq!(per_rank.get("1"), Some(&2));
}

#[test]
fn offline_repository_fails_at_flush() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "partner_distance = 1");
    let repo = Arc::new(FaultInjectingRepository::new(Arc::new(FileRepository::open(&dir.path().join("r")).unwrap())));
    repo.set_offline(true);
    let o = BackendOptions { repository: Some(repo.clone() as Arc<dyn RepositoryBackend>), ..opts() };
    let _be = BackendThread::spawn(&cfg, o).unwrap();
    let mut c = Conn::open(&cfg, 0);
    c.hello(2);
    let cmd = write_l1(&cfg, "off", 1, 0, 2);
    let m = c.msg(wire::CKPT_SUBMIT).with("command", &cmd);
    let id: u64 = c.call(m).field("ticket_id").unwrap();
    let t = wait_ticket(&mut c, id);
    assert_eq!(t.status, TicketStatus::Failed);
    assert_eq!(t.failed_module.as_deref(), Some("flush"));
    assert_eq!(repo.put_attempts(), 3);
    let trace: Vec<&str> = t.per_module.iter().map(|e| e.module_id.as_str()).collect();
    assert_eq!(trace, ["checksum", "partner", "flush"]);
}
