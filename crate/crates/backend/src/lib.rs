//! The active backend: a per-node daemon that runs post-L1 pipeline stages
//! for ASYNC clients, hosts their barriers and tracks how far each rank's
//! checkpoints have reached the repository.

pub mod barrier;
mod server;
pub mod state;

use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use mlckpt_core::config::Config;
use mlckpt_core::resilience::repo::RepositoryBackend;
use mlckpt_core::wire::{self, WireMessage};

pub use server::Backend;
pub use state::{Loaded, StateStore, Watermarks, STATE_FILE};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("ENDPOINT_BUSY: a backend already listens on {0}")]
    EndpointBusy(PathBuf),
    #[error("IO_ERROR: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::EndpointBusy(_) => "ENDPOINT_BUSY",
            BackendError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Clone)]
pub struct BackendOptions {
    pub barrier_timeout: Duration,
    /// Replaces the configured repository.
    pub repository: Option<Arc<dyn RepositoryBackend>>,
    /// Ask the OS to deprioritize pipeline worker threads.
    pub lower_priority: bool,
    /// How long SHUTDOWN waits for queued pipelines before exiting.
    pub drain_timeout: Duration,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            repository: None,
            lower_priority: true,
            drain_timeout: Duration::from_secs(600),
        }
    }
}

/// Binds the endpoint, replacing a stale socket file left by a dead
/// backend. A live one is ENDPOINT_BUSY.
pub(crate) fn bind_endpoint(endpoint: &Path) -> Result<UnixListener, BackendError> {
    if endpoint.exists() {
        if UnixStream::connect(endpoint).is_ok() {
            return Err(BackendError::EndpointBusy(endpoint.to_path_buf()));
        }
        std::fs::remove_file(endpoint)?;
    }
    if let Some(parent) = endpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    match UnixListener::bind(endpoint) {
        Ok(l) => Ok(l),
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => Err(BackendError::EndpointBusy(endpoint.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Runs the backend until SHUTDOWN.
pub fn backend_main(config: &Config, opts: BackendOptions) -> Result<(), BackendError> {
    Backend::bind(config, opts)?.run()
}

/// A backend serving on its own thread; for tests and the bench harness.
pub struct BackendThread {
    endpoint: PathBuf,
    thread: Option<JoinHandle<Result<(), BackendError>>>,
}

impl BackendThread {
    pub fn spawn(config: &Config, opts: BackendOptions) -> Result<Self, BackendError> {
        let backend = Backend::bind(config, opts)?;
        let thread = std::thread::Builder::new().name("backend".into()).spawn(move || backend.run())?;
        Ok(Self { endpoint: config.backend_endpoint.clone(), thread: Some(thread) })
    }

    pub fn endpoint(&self) -> &Path {
        &self.endpoint
    }

    /// Sends SHUTDOWN and waits for the serve loop to exit.
    pub fn shutdown(mut self) -> Result<(), BackendError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), BackendError> {
        let Some(thread) = self.thread.take() else { return Ok(()) };
        if let Ok(mut s) = UnixStream::connect(&self.endpoint) {
            let _ = wire::write_message(&mut s, &WireMessage::new(wire::SHUTDOWN, 0, 1));
            let _ = wire::read_message(&mut s);
        }
        thread.join().expect("backend thread panicked")
    }
}

impl Drop for BackendThread {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}
