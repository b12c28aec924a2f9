//! Client/backend wire protocol: each frame is a little-endian `u32` byte
//! length followed by that many bytes of UTF-8 JSON. Every message object
//! carries `type`, `rank` and `seq`; the remaining fields depend on the type.
//!
//! | request        | reply                                   |
//! |----------------|-----------------------------------------|
//! | `HELLO`        | `HELLO_ACK {num_ranks, mode}`           |
//! | `CKPT_SUBMIT`  | `CKPT_ACK {ticket}`                     |
//! | `BARRIER`      | `BARRIER_RELEASE {all_ok}`              |
//! | `STATUS_QUERY` | `STATUS_REPLY {ticket?, watermarks?}`   |
//! | `SHUTDOWN`     | `STATUS_REPLY {shutting_down}`          |
//!
//! Any request may instead be answered with `ERROR {code, detail}`. Replies
//! echo the request's `seq`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAX_FRAME: u32 = 16 << 20;

pub const HELLO: &str = "HELLO";
pub const HELLO_ACK: &str = "HELLO_ACK";
pub const CKPT_SUBMIT: &str = "CKPT_SUBMIT";
pub const CKPT_ACK: &str = "CKPT_ACK";
pub const BARRIER: &str = "BARRIER";
pub const BARRIER_RELEASE: &str = "BARRIER_RELEASE";
pub const STATUS_QUERY: &str = "STATUS_QUERY";
pub const STATUS_REPLY: &str = "STATUS_REPLY";
pub const SHUTDOWN: &str = "SHUTDOWN";
pub const ERROR: &str = "ERROR";

pub const REQUEST_TYPES: [&str; 5] = [HELLO, CKPT_SUBMIT, BARRIER, STATUS_QUERY, SHUTDOWN];

#[derive(Debug, Error)]
pub enum WireError {
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(u32),
    #[error("bad message: {0}")]
    BadMessage(String),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Io(_) => "IO_ERROR",
            WireError::FrameTooLarge(_) => "FRAME_TOO_LARGE",
            WireError::BadMessage(_) => "BAD_MESSAGE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub rank: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Map<String, Value>,
}

impl WireMessage {
    pub fn new(kind: &str, rank: u32, seq: u64) -> Self {
        Self { kind: kind.to_string(), rank, seq, body: Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.body.insert(key.to_string(), serde_json::to_value(value).expect("serializable field"));
        self
    }

    pub fn error(rank: u32, seq: u64, code: &str, detail: impl Into<String>) -> Self {
        Self::new(ERROR, rank, seq).with("code", code).with("detail", detail.into())
    }

    pub fn is_error(&self) -> bool {
        self.kind == ERROR
    }

    pub fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, WireError> {
        let v = self.body.get(key).ok_or_else(|| WireError::BadMessage(format!("{} lacks {key:?}", self.kind)))?;
        T::deserialize(v).map_err(|e| WireError::BadMessage(format!("{}.{key}: {e}", self.kind)))
    }

    pub fn opt_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>, WireError> {
        match self.body.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.field(key).map(Some),
        }
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.body.get(key).and_then(Value::as_str)
    }

    /// `ERROR` code and detail, if this is an error reply.
    pub fn error_parts(&self) -> Option<(&str, &str)> {
        self.is_error().then(|| (self.str_field("code").unwrap_or("UNKNOWN"), self.str_field("detail").unwrap_or("")))
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, WireError> {
        let text = std::str::from_utf8(bytes).map_err(|e| WireError::BadMessage(format!("not UTF-8: {e}")))?;
        let v: Value = serde_json::from_str(text).map_err(|e| WireError::BadMessage(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| WireError::BadMessage("not a JSON object".into()))?;
        for key in ["type", "rank", "seq"] {
            if !obj.contains_key(key) {
                return Err(WireError::BadMessage(format!("missing mandatory field {key:?}")));
            }
        }
        serde_json::from_value(v).map_err(|e| WireError::BadMessage(e.to_string()))
    }
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<(), WireError> {
    w.write_all(&encode_frame(&msg.to_json()))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. `Ok(None)` on a clean end of stream before the
/// length prefix.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>, WireError> {
    match read_frame(r)? {
        Some(bytes) => WireMessage::from_json(&bytes).map(Some),
        None => Ok(None),
    }
}
