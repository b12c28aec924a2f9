//! Small filesystem helpers shared by the resilience levels.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

/// Default I/O quantum between cooperative yields (8 MiB).
pub const DEFAULT_QUANTUM: usize = 8 << 20;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_sibling(path: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp.{}.{n}", std::process::id()))
}

/// Writes `bytes` to a temp file beside `path`, fsyncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic_with(path, |f| f.write_all(bytes))
}

pub fn write_atomic_with<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut File) -> io::Result<()>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        fill(&mut f)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn is_temp_name(name: &str) -> bool {
    name.starts_with('.') && name.contains(".tmp.")
}

/// Reads a whole file in quanta, yielding the thread between quanta.
pub fn read_throttled(path: &Path, quantum: usize) -> io::Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let len = f.metadata()?.len() as usize;
    let mut out = vec![0u8; len];
    let mut off = 0;
    while off < len {
        let end = (off + quantum.max(1)).min(len);
        f.read_exact(&mut out[off..end])?;
        off = end;
        if off < len {
            std::thread::yield_now();
        }
    }
    Ok(out)
}

/// Writes `bytes` atomically in quanta, yielding between them.
pub fn write_atomic_throttled(path: &Path, bytes: &[u8], quantum: usize) -> io::Result<()> {
    write_atomic_with(path, |f| {
        for chunk in bytes.chunks(quantum.max(1)) {
            f.write_all(chunk)?;
            std::thread::yield_now();
        }
        Ok(())
    })
}

/// Lexical normalization: drops `.` components, resolves `..` against
/// preceding components and strips trailing separators. Never touches the
/// filesystem.
pub fn normalize_path(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                let popped = matches!(out.components().next_back(), Some(Component::Normal(_)));
                if popped {
                    out.pop();
                } else if !out.has_root() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize() {
        assert_eq!(normalize_path(Path::new("/tmp/./a/../b/")), PathBuf::from("/tmp/b"));
        assert_eq!(normalize_path(Path::new("/../x")), PathBuf::from("/x"));
        assert_eq!(normalize_path(Path::new("a/../../b")), PathBuf::from("../b"));
        assert_eq!(normalize_path(Path::new("./")), PathBuf::from("."));
    }

    #[test]
    fn atomic_write_and_throttled_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/file.bin");
        let data: Vec<u8> = (0..10_000u32).map(|i| i as u8).collect();
        write_atomic_throttled(&p, &data, 333).unwrap();
        assert_eq!(read_throttled(&p, 1000).unwrap(), data);
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
