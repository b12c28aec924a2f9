//! One put/get/list/delete suite, run against every repository backend with
//! a BTreeMap as the oracle.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use mlckpt_core::resilience::kv::{encode_record, KvRepository};
use mlckpt_core::resilience::repo::{repo_open, FileRepository, LatencyRepository, RepositoryBackend};

#[derive(Debug, Clone)]
enum Op {
    Put(String, Vec<u8>),
    Get(String),
    Delete(String),
    List(String),
}

fn key() -> impl Strategy<Value = String> {
    // Small alphabet so keys collide and share prefixes often.
    prop::collection::vec(prop::sample::select(vec!["a", "b", "ck", "v1", "v2", "r0"]), 1..4).prop_map(|p| p.join("/"))
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (key(), prop::collection::vec(any::<u8>(), 0..64)).prop_map(|(k, v)| Op::Put(k, v)),
        3 => key().prop_map(Op::Get),
        2 => key().prop_map(Op::Delete),
        1 => prop::sample::select(vec!["", "a", "a/", "ck/v1", "b/"]).prop_map(|p| Op::List(p.to_string())),
    ]
}

fn run_contract(repo: &dyn RepositoryBackend, ops: &[Op]) -> Result<(), TestCaseError> {
    let mut oracle: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for op in ops {
        match op {
            Op::Put(k, v) => {
                // A key cannot also be a directory-like prefix in the file
                // backend; skip puts that would collide in either direction.
                let clash = oracle.keys().any(|o| o.starts_with(&format!("{k}/")) || k.starts_with(&format!("{o}/")));
                if clash {
                    continue;
                }
                repo.put(k, v).unwrap();
                oracle.insert(k.clone(), v.clone());
            }
            Op::Get(k) => prop_assert_eq!(repo.get(k).unwrap(), oracle.get(k).cloned()),
            Op::Delete(k) => prop_assert_eq!(repo.delete(k).unwrap(), oracle.remove(k).is_some()),
            Op::List(p) => {
                let want: Vec<String> = oracle.keys().filter(|k| k.starts_with(p.as_str())).cloned().collect();
                prop_assert_eq!(repo.list(p).unwrap(), want);
            }
        }
    }
    prop_assert_eq!(repo.list("").unwrap(), oracle.keys().cloned().collect::<Vec<_>>());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn file_backend_contract(ops in prop::collection::vec(op(), 200)) {
        let dir = tempfile::tempdir().unwrap();
        run_contract(&FileRepository::open(dir.path()).unwrap(), &ops)?;
    }

    #[test]
    fn kv_backend_contract(ops in prop::collection::vec(op(), 200)) {
        let dir = tempfile::tempdir().unwrap();
        run_contract(&KvRepository::open(dir.path()).unwrap(), &ops)?;
    }

    #[test]
    fn kv_state_survives_reopen(ops in prop::collection::vec(op(), 200)) {
        let dir = tempfile::tempdir().unwrap();
        {
            let repo = KvRepository::open(dir.path()).unwrap();
            run_contract(&repo, &ops)?;
        }
        let before: Vec<(String, Option<Vec<u8>>)> = {
            let repo = KvRepository::open(dir.path()).unwrap();
            repo.list("").unwrap().into_iter().map(|k| { let v = repo.get(&k).unwrap(); (k, v) }).collect()
        };
        let repo = KvRepository::open(dir.path()).unwrap();
        for (k, v) in before {
            prop_assert_eq!(repo.get(&k).unwrap(), v);
        }
    }
}

#[test]
fn locators_reach_both_backends() {
    let dir = tempfile::tempdir().unwrap();
    for loc in [format!("file://{}/f", dir.path().display()), format!("kv://{}/k", dir.path().display())] {
        let repo = repo_open(&loc).unwrap();
        repo.put("x/y", b"1").unwrap();
        assert_eq!(repo_open(&loc).unwrap().get("x/y").unwrap(), Some(b"1".to_vec()));
    }
}

#[test]
fn latency_wrapper_delays_puts_only() {
    let dir = tempfile::tempdir().unwrap();
    let inner: Arc<dyn RepositoryBackend> = Arc::new(FileRepository::open(dir.path()).unwrap());
    let repo = LatencyRepository::new(inner, Duration::from_millis(120));
    let t = std::time::Instant::now();
    repo.put("k", b"v").unwrap();
    assert!(t.elapsed() >= Duration::from_millis(120));
    let t = std::time::Instant::now();
    assert_eq!(repo.get("k").unwrap(), Some(b"v".to_vec()));
    assert!(t.elapsed() < Duration::from_millis(100));
    let via_locator = repo_open(&format!("file://{}?put_latency_ms=50", dir.path().display())).unwrap();
    let t = std::time::Instant::now();
    via_locator.put("k2", b"v").unwrap();
    assert!(t.elapsed() >= Duration::from_millis(50));
}

#[test]
fn kv_crash_truncated_final_record_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let log = {
        let repo = KvRepository::open(dir.path()).unwrap();
        for i in 0..20u8 {
            repo.put(&format!("k{i}"), &[i; 33]).unwrap();
        }
        repo.delete("k3").unwrap();
        repo.log_path().to_path_buf()
    };
    let intact_len = std::fs::metadata(&log).unwrap().len();
    // Every proper prefix of one more record is a torn write.
    let record = encode_record("late", Some(&[9u8; 50]));
    for cut in [1, 4, 12, record.len() / 2, record.len() - 1] {
        let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(&record[..cut]).unwrap();
        drop(f);
        let repo = KvRepository::open(dir.path()).unwrap();
        assert_eq!(repo.get("late").unwrap(), None, "cut {cut}");
        assert_eq!(repo.get("k3").unwrap(), None);
        for i in (0..20u8).filter(|&i| i != 3) {
            assert_eq!(repo.get(&format!("k{i}")).unwrap(), Some(vec![i; 33]));
        }
        drop(repo);
        assert_eq!(std::fs::metadata(&log).unwrap().len(), intact_len, "tail truncated at cut {cut}");
    }
    // Writes after recovery land after the intact prefix.
    let repo = KvRepository::open(dir.path()).unwrap();
    repo.put("after", b"ok").unwrap();
    drop(repo);
    assert_eq!(KvRepository::open(dir.path()).unwrap().get("after").unwrap(), Some(b"ok".to_vec()));
}

#[test]
fn kv_flipped_byte_in_complete_record_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let log = {
        let repo = KvRepository::open(dir.path()).unwrap();
        repo.put("a", b"0123456789").unwrap();
        repo.put("b", b"x").unwrap();
        repo.log_path().to_path_buf()
    };
    let mut bytes = std::fs::read(&log).unwrap();
    bytes[4 + 8 + 1 + 3] ^= 0xff;
    std::fs::write(&log, &bytes).unwrap();
    let err = KvRepository::open(dir.path()).and_then(|r| r.get("a").map(|_| ())).unwrap_err();
    assert_eq!(err.code(), "STORE_CORRUPT");
}
