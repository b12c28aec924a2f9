use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use mlckpt_core::model::{CheckpointId, Outcome};
use mlckpt_core::pipeline::{AsyncEngine, Command, CommandKind, Engine, GroupTopology, TicketStatus, TraceEntry};
use mlckpt_core::Redundancy;

fn cmd() -> Command {
    Command {
        kind: CommandKind::Checkpoint,
        ckpt: CheckpointId::new("p", 1, 0).unwrap(),
        payload_paths: vec![],
        group: GroupTopology { num_ranks: 1, redundancy: Redundancy::None },
    }
}

/// Modules `(id, priority)`; handler records its id and succeeds unless
/// listed in `failing`.
fn build(mods: &[(String, i32)], failing: &[String], calls: &Arc<Mutex<Vec<String>>>) -> Engine {
    let engine = Engine::new();
    for (id, prio) in mods {
        let calls = Arc::clone(calls);
        let me = id.clone();
        let fail = failing.contains(id);
        engine
            .register_module(id, *prio, move |_: &Command, _: &[TraceEntry]| {
                calls.lock().unwrap().push(me.clone());
                if fail {
                    Outcome::failure(format!("{me} broke"))
                } else {
                    Outcome::ok("")
                }
            })
            .unwrap();
    }
    engine
}

fn modules() -> impl Strategy<Value = Vec<(String, i32)>> {
    prop::collection::btree_set(-50i32..100, 1..10)
        .prop_map(|prios| prios.into_iter().map(|p| (format!("m{p}"), p)).collect::<Vec<_>>())
        .prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn trace_is_sorted_by_priority(mods in modules()) {
        let calls = Arc::new(Mutex::new(Vec::new()));
        let engine = build(&mods, &[], &calls);
        let t = engine.run_pipeline(&cmd()).unwrap();
        let mut sorted = mods.clone();
        sorted.sort_by_key(|(_, p)| *p);
        let want: Vec<String> = sorted.iter().map(|(id, _)| id.clone()).collect();
        let got: Vec<String> = t.per_module.iter().map(|e| e.module_id.clone()).collect();
        prop_assert_eq!(&got, &want);
        prop_assert_eq!(&*calls.lock().unwrap(), &want);
        prop_assert_eq!(t.status, TicketStatus::Done);
    }

    #[test]
    fn disable_enable_round_trip(mods in modules(), pick in any::<prop::sample::Index>()) {
        let calls = Arc::new(Mutex::new(Vec::new()));
        let engine = build(&mods, &[], &calls);
        let ids = |t: &mlckpt_core::pipeline::Ticket| t.per_module.iter().map(|e| e.module_id.clone()).collect::<Vec<_>>();
        let full = ids(&engine.run_pipeline(&cmd()).unwrap());
        let victim = pick.get(&mods).0.clone();
        engine.set_enabled(&victim, false).unwrap();
        match engine.run_pipeline(&cmd()) {
            Ok(t) => {
                let want: Vec<String> = full.iter().filter(|id| **id != victim).cloned().collect();
                prop_assert_eq!(ids(&t), want);
            }
            Err(e) => {
                prop_assert_eq!(mods.len(), 1);
                prop_assert_eq!(e.code(), "NO_ENABLED_MODULES");
            }
        }
        engine.set_enabled(&victim, true).unwrap();
        prop_assert_eq!(ids(&engine.run_pipeline(&cmd()).unwrap()), full);
    }

    #[test]
    fn failure_aborts_later_stages(mods in modules(), pick in any::<prop::sample::Index>()) {
        let calls = Arc::new(Mutex::new(Vec::new()));
        let victim = pick.get(&mods).clone();
        let engine = build(&mods, std::slice::from_ref(&victim.0), &calls);
        let t = engine.run_pipeline(&cmd()).unwrap();
        let mut want: Vec<String> = mods.iter().filter(|(_, p)| *p <= victim.1).map(|(id, p)| (p, id)).collect::<std::collections::BTreeMap<_, _>>().into_values().cloned().collect();
        prop_assert_eq!(t.status, TicketStatus::Failed);
        prop_assert_eq!(t.failed_module.as_deref(), Some(victim.0.as_str()));
        prop_assert_eq!(&*calls.lock().unwrap(), &want);
        want.pop();
        prop_assert!(t.per_module[..want.len()].iter().all(|e| e.outcome.is_ok()));
        prop_assert!(t.per_module.last().unwrap().outcome.is_failure());
    }
}

#[test]
fn duplicate_ids_and_priorities_rejected() {
    let e = Engine::new();
    let ok = |_: &Command, _: &[TraceEntry]| Outcome::ok("");
    e.register_module("a", 1, ok).unwrap();
    assert_eq!(e.register_module("a", 2, ok).unwrap_err().code(), "DUPLICATE_ID");
    assert_eq!(e.register_module("b", 1, ok).unwrap_err().code(), "DUPLICATE_PRIORITY");
    assert_eq!(e.set_enabled("zz", false).unwrap_err().code(), "UNKNOWN_MODULE");
}

#[test]
fn async_submission_snapshots_module_set() {
    let calls = Arc::new(Mutex::new(Vec::new()));
    let mods = vec![("a".to_string(), 1), ("b".to_string(), 2)];
    let engine = Arc::new(build(&mods, &[], &calls));
    let gate = Arc::new(Mutex::new(()));
    let held = gate.lock().unwrap();
    let g2 = Arc::clone(&gate);
    engine
        .register_module("slow", 0, move |_: &Command, _: &[TraceEntry]| {
            drop(g2.lock().unwrap());
            Outcome::ok("")
        })
        .unwrap();
    let ae = AsyncEngine::new(Arc::clone(&engine));
    let first = ae.submit(cmd()).unwrap();
    assert_eq!(first.status, TicketStatus::Queued);
    // Disabling after submission does not affect the queued ticket.
    engine.set_enabled("b", false).unwrap();
    let second = ae.submit(cmd()).unwrap();
    drop(held);
    let t1 = ae.wait(first.ticket_id, std::time::Duration::from_secs(10)).unwrap();
    let t2 = ae.wait(second.ticket_id, std::time::Duration::from_secs(10)).unwrap();
    let ids = |t: &mlckpt_core::pipeline::Ticket| t.per_module.iter().map(|e| e.module_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&t1), ["slow", "a", "b"]);
    assert_eq!(ids(&t2), ["slow", "a"]);
    assert!(t1.finished_us.unwrap() <= t2.started_us.unwrap());
    assert!(ae.wait_idle(std::time::Duration::from_secs(5)));
    ae.close();
    assert_eq!(ae.submit(cmd()).unwrap_err().code(), "SHUTTING_DOWN");
}
