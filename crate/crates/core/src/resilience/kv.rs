//! Single-file log-structured key-value store backing `kv://` locators.
//!
//! The log (`<dir>/store.kv`) is a sequence of records:
//!
//! ```text
//! key_len u32 | val_len u64 | key | value | crc32 u32
//! ```
//!
//! little-endian, the CRC covering everything before it in the record. A
//! delete appends a tombstone whose `val_len` is `u64::MAX` and which carries
//! no value bytes. The in-memory index (key -> value offset) is rebuilt by
//! replaying the log on open. A final record cut short by a crash is dropped
//! and the log truncated; a complete record failing its CRC is corruption.
//!
//! Every operation holds an exclusive advisory lock on the log and first
//! replays records appended by other handles, so several processes may share
//! one store with a single writer at a time.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;

use super::repo::{validate_key, RepositoryBackend};
use super::ResilienceError;

pub const LOG_FILE: &str = "store.kv";
const TOMBSTONE: u64 = u64::MAX;
const RECORD_HEADER: u64 = 12;
const MAX_KEY: u32 = 64 * 1024;

struct KvState {
    file: File,
    index: BTreeMap<String, (u64, u64)>,
    replayed_to: u64,
}

pub struct KvRepository {
    locator: String,
    path: PathBuf,
    state: Mutex<KvState>,
}

struct LockGuard<'a>(&'a File);

impl<'a> LockGuard<'a> {
    fn acquire(file: &'a File) -> std::io::Result<Self> {
        file.lock()?;
        Ok(Self(file))
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

pub fn encode_record(key: &str, value: Option<&[u8]>) -> Vec<u8> {
    let val_len = value.map(|v| v.len() as u64).unwrap_or(TOMBSTONE);
    let mut rec = Vec::with_capacity(RECORD_HEADER as usize + key.len() + value.map_or(0, <[u8]>::len) + 4);
    rec.extend_from_slice(&(key.len() as u32).to_le_bytes());
    rec.extend_from_slice(&val_len.to_le_bytes());
    rec.extend_from_slice(key.as_bytes());
    if let Some(v) = value {
        rec.extend_from_slice(v);
    }
    let crc = crc32fast::hash(&rec);
    rec.extend_from_slice(&crc.to_le_bytes());
    rec
}

impl KvState {
    /// Applies records from `replayed_to` to end of file.
    fn replay(&mut self, path: &Path) -> Result<(), ResilienceError> {
        let len = self.file.metadata()?.len();
        if len == self.replayed_to {
            return Ok(());
        }
        let mut pos = self.replayed_to;
        let mut r = BufReader::with_capacity(1 << 20, &self.file);
        r.seek(SeekFrom::Start(pos))?;
        let mut torn = false;
        while pos < len {
            if len - pos < RECORD_HEADER {
                torn = true;
                break;
            }
            let mut head = [0u8; RECORD_HEADER as usize];
            r.read_exact(&mut head)?;
            let key_len = u32::from_le_bytes(head[0..4].try_into().unwrap());
            let val_len = u64::from_le_bytes(head[4..12].try_into().unwrap());
            let body = if val_len == TOMBSTONE { 0 } else { val_len };
            let rec_len = RECORD_HEADER
                .checked_add(key_len as u64)
                .and_then(|n| n.checked_add(body))
                .and_then(|n| n.checked_add(4));
            let Some(rec_len) = rec_len.filter(|n| pos + n <= len) else {
                torn = true;
                break;
            };
            if key_len > MAX_KEY {
                return Err(ResilienceError::StoreCorrupt(format!("key length {key_len} at offset {pos}")));
            }
            let mut hasher = crc32fast::Hasher::new();
            hasher.update(&head);
            let mut key = vec![0u8; key_len as usize];
            r.read_exact(&mut key)?;
            hasher.update(&key);
            let mut remaining = body;
            let mut buf = vec![0u8; 1 << 16];
            while remaining > 0 {
                let n = remaining.min(buf.len() as u64) as usize;
                r.read_exact(&mut buf[..n])?;
                hasher.update(&buf[..n]);
                remaining -= n as u64;
            }
            let mut crc = [0u8; 4];
            r.read_exact(&mut crc)?;
            if hasher.finalize() != u32::from_le_bytes(crc) {
                return Err(ResilienceError::StoreCorrupt(format!(
                    "{}: record at offset {pos} fails its checksum",
                    path.display()
                )));
            }
            let key = String::from_utf8(key)
                .map_err(|_| ResilienceError::StoreCorrupt(format!("non-UTF-8 key at offset {pos}")))?;
            if val_len == TOMBSTONE {
                self.index.remove(&key);
            } else {
                self.index.insert(key, (pos + RECORD_HEADER + key_len as u64, val_len));
            }
            pos += rec_len;
        }
        drop(r);
        if torn {
            warn!("{}: dropping torn record at offset {pos} ({} bytes)", path.display(), len - pos);
            self.file.set_len(pos)?;
            self.file.sync_all()?;
        }
        self.replayed_to = pos;
        Ok(())
    }

    fn append(&mut self, rec: &[u8]) -> Result<u64, ResilienceError> {
        let start = self.file.seek(SeekFrom::End(0))?;
        debug_assert_eq!(start, self.replayed_to);
        self.file.write_all(rec)?;
        self.file.sync_data()?;
        self.replayed_to = start + rec.len() as u64;
        Ok(start)
    }
}

impl KvRepository {
    pub fn open(dir: &Path) -> Result<Self, ResilienceError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut state = KvState { file, index: BTreeMap::new(), replayed_to: 0 };
        {
            let f = state.file.try_clone()?;
            let _lock = LockGuard::acquire(&f)?;
            state.replay(&path)?;
        }
        Ok(Self { locator: format!("kv://{}", dir.display()), path, state: Mutex::new(state) })
    }

    pub fn log_path(&self) -> &Path {
        &self.path
    }

    fn with_locked<T>(
        &self,
        f: impl FnOnce(&mut KvState) -> Result<T, ResilienceError>,
    ) -> Result<T, ResilienceError> {
        let mut st = self.state.lock().unwrap();
        let lock_handle = st.file.try_clone()?;
        let _lock = LockGuard::acquire(&lock_handle)?;
        st.replay(&self.path)?;
        f(&mut st)
    }
}

impl RepositoryBackend for KvRepository {
    fn locator(&self) -> &str {
        &self.locator
    }

    fn put(&self, key: &str, value: &[u8]) -> Result<(), ResilienceError> {
        validate_key(key)?;
        let rec = encode_record(key, Some(value));
        self.with_locked(|st| {
            let start = st.append(&rec)?;
            st.index.insert(key.to_string(), (start + RECORD_HEADER + key.len() as u64, value.len() as u64));
            Ok(())
        })
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ResilienceError> {
        validate_key(key)?;
        self.with_locked(|st| {
            let Some(&(off, len)) = st.index.get(key) else {
                return Ok(None);
            };
            let mut buf = vec![0u8; len as usize];
            st.file.seek(SeekFrom::Start(off))?;
            st.file.read_exact(&mut buf)?;
            Ok(Some(buf))
        })
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, ResilienceError> {
        self.with_locked(|st| {
            Ok(st.index.range(prefix.to_string()..).map(|(k, _)| k).take_while(|k| k.starts_with(prefix)).cloned().collect())
        })
    }

    fn delete(&self, key: &str) -> Result<bool, ResilienceError> {
        validate_key(key)?;
        let rec = encode_record(key, None);
        self.with_locked(|st| {
            if !st.index.contains_key(key) {
                return Ok(false);
            }
            st.append(&rec)?;
            st.index.remove(key);
            Ok(true)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    #[test]
    fn record_layout() {
        let rec = encode_record("ab", Some(b"xyz"));
        assert_eq!(rec.len(), 12 + 2 + 3 + 4);
        assert_eq!(&rec[0..4], &2u32.to_le_bytes());
        assert_eq!(&rec[4..12], &3u64.to_le_bytes());
        assert_eq!(&rec[12..14], b"ab");
        assert_eq!(&rec[14..17], b"xyz");
        assert_eq!(&rec[17..21], &crc32fast::hash(&rec[..17]).to_le_bytes());
    }

    #[test]
    fn last_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let kv = KvRepository::open(dir.path()).unwrap();
        kv.put("k", b"one").unwrap();
        kv.put("k", b"two").unwrap();
        assert_eq!(kv.get("k").unwrap().as_deref(), Some(&b"two"[..]));
        assert_eq!(kv.list("").unwrap(), vec!["k".to_string()]);
    }

    #[test]
    fn reopen_matches_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let mut oracle = HashMap::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        {
            let kv = KvRepository::open(dir.path()).unwrap();
            for _ in 0..100 {
                let key = format!("k{}", rng.random_range(0..30));
                let val: Vec<u8> = (0..rng.random_range(0..200)).map(|_| rng.random()).collect();
                kv.put(&key, &val).unwrap();
                oracle.insert(key, val);
            }
        }
        let kv = KvRepository::open(dir.path()).unwrap();
        for (k, v) in &oracle {
            assert_eq!(kv.get(k).unwrap().as_ref(), Some(v));
        }
        assert_eq!(kv.list("").unwrap().len(), oracle.len());
    }

    #[test]
    fn torn_tail_dropped_and_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        {
            let kv = KvRepository::open(dir.path()).unwrap();
            kv.put("a", b"alpha").unwrap();
            kv.put("b", b"beta").unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let full = std::fs::metadata(&log).unwrap().len();
        std::fs::OpenOptions::new().write(true).open(&log).unwrap().set_len(full - 3).unwrap();
        let kv = KvRepository::open(dir.path()).unwrap();
        assert_eq!(kv.get("a").unwrap().as_deref(), Some(&b"alpha"[..]));
        assert_eq!(kv.get("b").unwrap(), None);
        kv.put("c", b"gamma").unwrap();
        drop(kv);
        let kv = KvRepository::open(dir.path()).unwrap();
        assert_eq!(kv.list("").unwrap(), vec!["a".to_string(), "c".to_string()]);
        drop(kv);

        let mut bytes = std::fs::read(&log).unwrap();
        bytes[13] ^= 0xFF;
        std::fs::write(&log, &bytes).unwrap();
        assert!(matches!(KvRepository::open(dir.path()), Err(ResilienceError::StoreCorrupt(_))));
    }

    #[test]
    fn two_handles_share_one_store() {
        let dir = tempfile::tempdir().unwrap();
        let a = KvRepository::open(dir.path()).unwrap();
        let b = KvRepository::open(dir.path()).unwrap();
        a.put("x", b"1").unwrap();
        b.put("y", b"2").unwrap();
        assert_eq!(a.get("y").unwrap().as_deref(), Some(&b"2"[..]));
        assert!(b.delete("x").unwrap());
        assert_eq!(a.get("x").unwrap(), None);
    }
}
