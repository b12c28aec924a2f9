use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

/// A protected memory buffer. Clones share the same bytes, so the
/// application keeps writing through its own clone while the handle holds
/// another.
#[derive(Debug, Clone, Default)]
pub struct Region(Arc<RwLock<Vec<u8>>>);

impl Region {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(Arc::new(RwLock::new(bytes)))
    }

    pub fn zeroed(len: usize) -> Self {
        Self::new(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Vec<u8>> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Vec<u8>> {
        self.0.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.read().clone()
    }

    pub fn fill(&self, byte: u8) {
        self.write().fill(byte);
    }
}
