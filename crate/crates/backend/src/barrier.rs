//! Rank barriers keyed by (name, version).

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::oneshot;

/// Released keys remembered for duplicate detection.
const RELEASED_MEMORY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierReply {
    Released { failed: Vec<u32> },
    TimedOut { missing: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Duplicate;

type Key = (String, u32);

struct Open {
    generation: u64,
    arrived: BTreeMap<u32, (bool, oneshot::Sender<BarrierReply>)>,
}

#[derive(Default)]
struct Inner {
    open: HashMap<Key, Open>,
    released: VecDeque<(Key, BTreeSet<u32>)>,
    next_generation: u64,
}

#[derive(Clone)]
pub struct BarrierHub {
    inner: Arc<Mutex<Inner>>,
    timeout: Duration,
}

impl BarrierHub {
    pub fn new(timeout: Duration) -> Self {
        Self { inner: Arc::default(), timeout }
    }

    /// Registers an arrival. The receiver resolves on release or timeout.
    /// Must be called inside a tokio runtime (the timeout is a task).
    pub fn arrive(
        &self,
        name: &str,
        version: u32,
        rank: u32,
        num_ranks: u32,
        ok: bool,
    ) -> Result<oneshot::Receiver<BarrierReply>, Duplicate> {
        let key = (name.to_string(), version);
        let (tx, rx) = oneshot::channel();
        let mut inner = self.inner.lock().unwrap();
        if inner.released.iter().any(|(k, ranks)| k == &key && ranks.contains(&rank)) {
            return Err(Duplicate);
        }
        let generation = inner.next_generation;
        let fresh = !inner.open.contains_key(&key);
        let open = inner.open.entry(key.clone()).or_insert_with(|| Open { generation, arrived: BTreeMap::new() });
        if open.arrived.contains_key(&rank) {
            return Err(Duplicate);
        }
        open.arrived.insert(rank, (ok, tx));
        if fresh {
            inner.next_generation += 1;
            let hub = self.clone();
            let key = key.clone();
            tokio::spawn(async move {
                tokio::time::sleep(hub.timeout).await;
                hub.expire(&key, generation, num_ranks);
            });
        }
        let open = &inner.open[&key];
        if open.arrived.len() as u32 >= num_ranks {
            let open = inner.open.remove(&key).unwrap();
            let failed: Vec<u32> = open.arrived.iter().filter(|(_, (ok, _))| !ok).map(|(r, _)| *r).collect();
            let ranks: BTreeSet<u32> = open.arrived.keys().copied().collect();
            for (_, (_, tx)) in open.arrived {
                let _ = tx.send(BarrierReply::Released { failed: failed.clone() });
            }
            inner.released.push_back((key, ranks));
            if inner.released.len() > RELEASED_MEMORY {
                inner.released.pop_front();
            }
        }
        Ok(rx)
    }

    fn expire(&self, key: &Key, generation: u64, num_ranks: u32) {
        let mut inner = self.inner.lock().unwrap();
        if inner.open.get(key).is_none_or(|o| o.generation != generation) {
            return;
        }
        let open = inner.open.remove(key).unwrap();
        let missing: Vec<u32> = (0..num_ranks).filter(|r| !open.arrived.contains_key(r)).collect();
        for (_, (_, tx)) in open.arrived {
            let _ = tx.send(BarrierReply::TimedOut { missing: missing.clone() });
        }
    }

    pub fn open_count(&self) -> usize {
        self.inner.lock().unwrap().open.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn releases_all_after_last_arrival() {
        let hub = BarrierHub::new(Duration::from_secs(5));
        let mut rxs = Vec::new();
        for r in 0..3 {
            let mut rx = hub.arrive("n", 1, r, 4, r != 1).unwrap();
            assert!(rx.try_recv().is_err());
            rxs.push(rx);
        }
        rxs.push(hub.arrive("n", 1, 3, 4, true).unwrap());
        for rx in rxs {
            assert_eq!(rx.await.unwrap(), BarrierReply::Released { failed: vec![1] });
        }
        assert_eq!(hub.open_count(), 0);
        assert_eq!(hub.arrive("n", 1, 2, 4, true).unwrap_err(), Duplicate);
    }

    #[tokio::test]
    async fn duplicate_and_timeout() {
        let hub = BarrierHub::new(Duration::from_millis(50));
        let a = hub.arrive("n", 2, 0, 3, true).unwrap();
        assert_eq!(hub.arrive("n", 2, 0, 3, true).unwrap_err(), Duplicate);
        let b = hub.arrive("n", 2, 2, 3, true).unwrap();
        assert_eq!(a.await.unwrap(), BarrierReply::TimedOut { missing: vec![1] });
        assert_eq!(b.await.unwrap(), BarrierReply::TimedOut { missing: vec![1] });
        // A late arrival opens a new barrier rather than joining the dead one.
        let c = hub.arrive("n", 2, 1, 3, true).unwrap();
        assert_eq!(c.await.unwrap(), BarrierReply::TimedOut { missing: vec![0, 2] });
    }
}
