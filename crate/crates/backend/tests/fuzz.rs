//! Well-framed random messages never take the backend down, and every
//! frame gets exactly one reply carrying its seq.

use std::io::Write;
use std::os::unix::net::UnixStream;
use std::time::Duration;

use proptest::prelude::*;
use serde_json::{json, Map, Value};

use mlckpt_backend::{BackendOptions, BackendThread};
use mlckpt_core::config::Config;
use mlckpt_core::wire::{self, encode_frame};

const CASES: u32 = 10;
const MESSAGES_PER_CASE: usize = 100;

fn kind() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => prop::sample::select(vec![wire::HELLO, wire::CKPT_SUBMIT, wire::BARRIER, wire::STATUS_QUERY]).prop_map(String::from),
        1 => prop::sample::select(vec![wire::HELLO_ACK, wire::CKPT_ACK, wire::BARRIER_RELEASE, wire::STATUS_REPLY, wire::ERROR]).prop_map(String::from),
        1 => "[A-Z_]{0,12}",
    ]
}

fn scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        (0u64..6).prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::from),
        "[a-z0-9_./-]{0,10}".prop_map(Value::from),
    ]
}

fn value() -> impl Strategy<Value = Value> {
    scalar().prop_recursive(2, 8, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            prop::collection::btree_map("[a-z_]{1,8}", inner, 0..4).prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn command(rank: u64, num_ranks: Value, version: Value) -> Value {
    json!({
        "kind": "CHECKPOINT",
        "ckpt": {"name": "fz", "version": version, "rank": rank},
        "payload_paths": ["/nonexistent/fz.ckpt"],
        "group": {"num_ranks": num_ranks, "redundancy": {"xor": {"group_size": 2}}},
    })
}

fn body() -> impl Strategy<Value = Map<String, Value>> {
    let field = prop_oneof![
        (scalar()).prop_map(|v| ("num_ranks".to_string(), v)),
        (scalar()).prop_map(|v| ("name".to_string(), v)),
        (scalar()).prop_map(|v| ("version".to_string(), v)),
        (scalar()).prop_map(|v| ("ok".to_string(), v)),
        (scalar()).prop_map(|v| ("ticket_id".to_string(), v)),
        (0u64..4, scalar(), scalar()).prop_map(|(r, n, v)| ("command".to_string(), command(r, n, v))),
        value().prop_map(|v| ("command".to_string(), v)),
        ("[a-z_]{1,8}", value()),
    ];
    prop::collection::vec(field, 0..4).prop_map(|fields| fields.into_iter().collect())
}

#[derive(Debug, Clone)]
struct Frame {
    kind: String,
    rank: u64,
    seq_step: i64,
    body: Map<String, Value>,
    /// Drop one mandatory field.
    drop_field: Option<usize>,
}

fn frame() -> impl Strategy<Value = Frame> {
    (kind(), prop_oneof![4 => 0u64..4, 1 => any::<u32>().prop_map(u64::from)], prop_oneof![8 => Just(1i64), 1 => Just(0i64)], body(), prop::option::weighted(0.05, 0usize..3))
        .prop_map(|(kind, rank, seq_step, body, drop_field)| Frame { kind, rank, seq_step, body, drop_field })
}

fn config(root: &std::path::Path) -> Config {
    Config::parse(&format!(
        "scratch = {0}/s0\npersistent = file://{0}/repo\nmode = async\nxor_group_size = 2\nbackend_endpoint = {0}/be.sock\n",
        root.display()
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_frames_always_answered(frames in prop::collection::vec(frame(), MESSAGES_PER_CASE)) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let opts = BackendOptions { barrier_timeout: Duration::from_millis(100), ..Default::default() };
        let be = BackendThread::spawn(&cfg, opts).unwrap();
        let mut s = UnixStream::connect(&cfg.backend_endpoint).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();

        let mut seq: u64 = 0;
        let mut outstanding: Vec<u64> = Vec::new();
        for f in &frames {
            seq = seq.saturating_add_signed(f.seq_step);
            let mut obj = f.body.clone();
            obj.insert("type".into(), Value::from(f.kind.clone()));
            obj.insert("rank".into(), Value::from(f.rank));
            obj.insert("seq".into(), Value::from(seq));
            if let Some(i) = f.drop_field {
                obj.remove(["type", "rank", "seq"][i]);
            }
            s.write_all(&encode_frame(&serde_json::to_vec(&Value::Object(obj)).unwrap())).unwrap();
            // The reply to a dropped `seq` comes back as seq 0.
            let expect = if f.drop_field == Some(2) { 0 } else { seq };
            outstanding.push(expect);
            // Read until this frame's reply arrives; barrier replies may lag.
            while outstanding.contains(&expect) {
                let reply = wire::read_message(&mut s).unwrap().expect("backend closed the connection");
                let pos = outstanding.iter().position(|&q| q == reply.seq);
                prop_assert!(pos.is_some(), "unexpected reply seq {} ({reply:?})", reply.seq);
                outstanding.remove(pos.unwrap());
                if outstanding.len() > 8 {
                    break;
                }
            }
        }
        while !outstanding.is_empty() {
            let reply = wire::read_message(&mut s).unwrap().expect("backend closed the connection");
            let pos = outstanding.iter().position(|&q| q == reply.seq);
            prop_assert!(pos.is_some());
            outstanding.remove(pos.unwrap());
        }

        // Still alive for a fresh client.
        let mut c = UnixStream::connect(&cfg.backend_endpoint).unwrap();
        c.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        wire::write_message(&mut c, &wire::WireMessage::new(wire::STATUS_QUERY, 0, 1)).unwrap();
        let r = wire::read_message(&mut c).unwrap().unwrap();
        prop_assert_eq!(r.kind.as_str(), wire::STATUS_REPLY);
        drop((s, c));
        be.shutdown().unwrap();
    }
}
