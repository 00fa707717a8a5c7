use std::io;
use std::time::Duration;

/// Error codes carried in the payload of `ERROR` frames.
pub mod codes {
    pub const UNSUPPORTED_VERSION: &str = "unsupported_version";
    pub const BAD_PHASE: &str = "bad_phase";
    pub const BAD_REQUEST_ID: &str = "bad_request_id";
    pub const BAD_MESSAGE: &str = "bad_message";
    pub const DECODE_FAILURE: &str = "decode_failure";
    pub const AGENT_FAILURE: &str = "agent_failure";
    pub const BACKEND_UNAVAILABLE: &str = "backend_unavailable";
    pub const BACKEND_LOST: &str = "backend_lost";
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("decoding error at offset {pos}: {reason}")]
    Decoding { pos: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("payload checksum mismatch: frame says {expected:#010x}, payload hashes to {actual:#010x}")]
    Integrity { expected: u32, actual: u32 },

    #[error("frame of {len} octets exceeds the limit of {max}")]
    FrameTooLarge { len: usize, max: usize },

    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timed out after {0:?}")]
    Timeout(Duration),

    #[error("channel closed")]
    ChannelClosed,

    #[error("connection lost: {0}")]
    ConnectionLost(String),

    #[error("cannot connect to {addr}: {reason}")]
    Connect { addr: String, reason: String },

    /// An `ERROR` frame sent by the peer.
    #[error("remote error [{code}]: {message}")]
    Remote { code: String, message: String },

    /// Raised by an environment during `reset` or `step`.
    #[error("environment error: {0}")]
    Env(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn decoding(pos: usize, reason: impl Into<String>) -> Self {
        Error::Decoding {
            pos,
            reason: reason.into(),
        }
    }

    /// The remote error code, if this error came from an `ERROR` frame.
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            Error::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}
