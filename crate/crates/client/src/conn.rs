use std::os::unix::net::UnixStream;
use std::path::Path;

use mlckpt_core::wire::{read_message, write_message, WireError, WireMessage};

/// Blocking request/reply connection to the backend.
pub struct BackendConn {
    stream: UnixStream,
    rank: u32,
    seq: u64,
}

impl BackendConn {
    pub fn connect(endpoint: &Path, rank: u32) -> std::io::Result<Self> {
        Ok(Self { stream: UnixStream::connect(endpoint)?, rank, seq: 0 })
    }

    /// A message of `kind` stamped with this connection's rank and next seq.
    pub fn message(&mut self, kind: &str) -> WireMessage {
        self.seq += 1;
        WireMessage::new(kind, self.rank, self.seq)
    }

    /// Sends `msg` and waits for the reply carrying the same seq. `ERROR`
    /// replies are returned as messages, not errors.
    pub fn call(&mut self, msg: WireMessage) -> Result<WireMessage, WireError> {
        write_message(&mut self.stream, &msg)?;
        loop {
            let reply = read_message(&mut self.stream)?
                .ok_or_else(|| WireError::Io(std::io::ErrorKind::UnexpectedEof.into()))?;
            if reply.seq == msg.seq {
                return Ok(reply);
            }
            log::warn!("dropping reply with seq {} while waiting for {}", reply.seq, msg.seq);
        }
    }
}
