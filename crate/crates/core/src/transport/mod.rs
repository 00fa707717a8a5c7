//! Frame transport: framed TCP and a same-host shared-memory rendezvous,
//! plus the handshake that picks between them.
//!
//! The client sends `HELLO {"proto_version": 1}`; the server answers
//! `HELLO_ACK {"shm_name", "shm_capacity", "nonce"}` after creating a
//! fresh segment. If the client can map that segment and finds the same
//! nonce at offset 8, it proves it shares the server's host and confirms by
//! sending a `PING` through the segment. Otherwise it sends the `PING` over
//! TCP and everything stays on the stream.

pub mod shm;
pub mod stream;

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use crate::error::{codes, Error, Result};
use crate::frame::{Flags, Frame, MsgType};
use crate::value::{decode_value_exact, Map, Value};

use self::shm::{Nonce, ShmSegment, ShmState};
use self::stream::{PeerStatus, StreamChannel};

pub const PROTO_VERSION: i64 = 1;

/// Set to a non-empty value other than `0` to skip shared memory.
pub const ENV_FORCE_STREAM: &str = "POLSERVE_FORCE_STREAM";
/// Busy-spin budget in microseconds for shared-memory waits.
pub const ENV_SPIN_US: &str = "POLSERVE_SPIN_US";

pub fn force_stream_from_env() -> bool {
    std::env::var(ENV_FORCE_STREAM).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn default_spin() -> Duration {
    static SPIN: OnceLock<Duration> = OnceLock::new();
    *SPIN.get_or_init(|| {
        if let Some(us) = std::env::var(ENV_SPIN_US).ok().and_then(|v| v.parse().ok()) {
            return Duration::from_micros(us);
        }
        // spinning on a single core only delays the peer we are waiting for
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        if cores > 1 {
            Duration::from_micros(50)
        } else {
            Duration::ZERO
        }
    })
}

/// How a shared-memory wait burns time: spin, then yield, then sleep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitStrategy {
    pub spin: Duration,
    pub yield_for: Duration,
    /// Sleep slice once spinning and yielding are exhausted; at most 100 µs.
    pub sleep: Duration,
    pub liveness_interval: Duration,
}

impl Default for WaitStrategy {
    fn default() -> Self {
        WaitStrategy {
            spin: default_spin(),
            yield_for: Duration::from_micros(200),
            sleep: Duration::from_micros(50),
            liveness_interval: Duration::from_millis(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportMode {
    Stream { remote: SocketAddr },
    SharedMemory { segment: String, capacity: usize, nonce: Nonce },
}

impl TransportMode {
    pub fn is_shared_memory(&self) -> bool {
        matches!(self, TransportMode::SharedMemory { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            TransportMode::Stream { .. } => "stream",
            TransportMode::SharedMemory { .. } => "shared-memory",
        }
    }
}

pub fn hello_payload(version: i64) -> Value {
    Value::Map([("proto_version".to_string(), Value::Int(version))].into())
}

pub fn parse_hello(v: &Value) -> Result<i64> {
    v.as_map()
        .and_then(|m| m.get("proto_version"))
        .and_then(Value::as_int)
        .ok_or_else(|| Error::Protocol("HELLO without proto_version".into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloAck {
    /// Empty when the server could not offer a segment.
    pub shm_name: String,
    pub shm_capacity: usize,
    pub nonce: Nonce,
    /// Server-preferred JPEG quality for stream clients; 0 means raw.
    pub jpeg_quality: Option<u8>,
}

impl HelloAck {
    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("shm_name".into(), Value::Str(self.shm_name.clone()));
        m.insert("shm_capacity".into(), Value::Int(self.shm_capacity as i64));
        m.insert("nonce".into(), Value::Bytes(self.nonce.to_vec()));
        if let Some(q) = self.jpeg_quality {
            m.insert("jpeg_quality".into(), Value::Int(q as i64));
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let bad = |what: &str| Error::Protocol(format!("HELLO_ACK: {what}"));
        let m = v.as_map().ok_or_else(|| bad("payload is not a map"))?;
        let shm_name = m.get("shm_name").and_then(Value::as_str).ok_or_else(|| bad("missing shm_name"))?;
        let shm_capacity = m
            .get("shm_capacity")
            .and_then(Value::as_int)
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| bad("missing shm_capacity"))?;
        let nonce = match m.get("nonce") {
            Some(Value::Bytes(b)) => b.as_slice().try_into().map_err(|_| bad("nonce must be 16 octets"))?,
            _ => return Err(bad("missing nonce")),
        };
        let jpeg_quality = m
            .get("jpeg_quality")
            .and_then(Value::as_int)
            .and_then(|q| u8::try_from(q).ok());
        Ok(HelloAck {
            shm_name: shm_name.to_owned(),
            shm_capacity,
            nonce,
            jpeg_quality,
        })
    }
}

/// Encodes the payload of an `ERROR` frame.
pub fn error_payload(code: &str, message: &str) -> Value {
    let mut m = Map::new();
    m.insert("code".into(), Value::from(code));
    m.insert("message".into(), Value::from(message));
    Value::Map(m)
}

/// Turns an `ERROR` frame payload into [`Error::Remote`].
pub fn remote_error(payload: &[u8]) -> Error {
    let v = decode_value_exact(payload).unwrap_or(Value::Null);
    let field = |k: &str| {
        v.as_map()
            .and_then(|m| m.get(k))
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_owned()
    };
    Error::Remote {
        code: field("code"),
        message: field("message"),
    }
}

/// Invoked with the segment name right before the client tries to attach.
pub type AttachHook = Arc<dyn Fn(&str) + Send + Sync>;

pub struct NegotiateOptions {
    pub force_stream: bool,
    pub timeout: Duration,
    pub wait: WaitStrategy,
    pub attach_hook: Option<AttachHook>,
    pub proto_version: i64,
}

impl Default for NegotiateOptions {
    fn default() -> Self {
        NegotiateOptions {
            force_stream: false,
            timeout: Duration::from_secs(2),
            wait: WaitStrategy::default(),
            attach_hook: None,
            proto_version: PROTO_VERSION,
        }
    }
}

pub struct Negotiated {
    pub mode: TransportMode,
    pub segment: Option<ShmSegment>,
    pub ack: HelloAck,
    /// The last request id consumed by the handshake.
    pub last_request_id: u64,
}

fn expect_reply(f: Frame, want: MsgType, id: u64) -> Result<Frame> {
    if f.request_id != id {
        return Err(Error::Protocol(format!("reply id {} for request {id}", f.request_id)));
    }
    match f.msg_type {
        t if t == want => Ok(f),
        MsgType::Error => Err(remote_error(&f.payload)),
        t => Err(Error::Protocol(format!("expected {want:?}, got {t:?}"))),
    }
}

/// Client half of the handshake. Consumes request ids starting at `first_id`.
pub fn negotiate(channel: &mut StreamChannel, opts: &NegotiateOptions, first_id: u64) -> Result<Negotiated> {
    channel.set_read_timeout(Some(opts.timeout))?;
    let hello_id = first_id;
    channel.send_value(MsgType::Hello, Flags::NONE, hello_id, &hello_payload(opts.proto_version))?;
    let reply = channel.recv()?;
    let reply = match expect_reply(reply, MsgType::HelloAck, hello_id) {
        Err(Error::Remote { code, message }) if code == codes::UNSUPPORTED_VERSION => {
            return Err(Error::Protocol(format!("server rejected protocol version: {message}")))
        }
        r => r?,
    };
    let ack = HelloAck::from_value(&decode_value_exact(&reply.payload)?)?;
    let ping_id = hello_id + 1;

    let segment = if opts.force_stream || ack.shm_name.is_empty() {
        None
    } else {
        if let Some(hook) = &opts.attach_hook {
            hook(&ack.shm_name);
        }
        match ShmSegment::attach(&ack.shm_name, &ack.nonce) {
            Ok(seg) => Some(seg),
            Err(e) => {
                log::debug!("shared memory unavailable ({e}); using stream");
                None
            }
        }
    };

    match segment {
        Some(mut seg) => {
            seg.send_request(MsgType::Ping, Flags::NONE, ping_id, &[][..])?;
            let deadline = Instant::now() + opts.timeout;
            seg.await_state(ShmState::ResponseReady, Some(deadline), &opts.wait, &mut || {
                match channel.poll_peer()? {
                    PeerStatus::Closed => Err(Error::ConnectionLost("server closed during handshake".into())),
                    _ => Ok(()),
                }
            })?;
            let reply = seg.read_message()?.to_owned();
            seg.finish_response()?;
            expect_reply(reply, MsgType::PingAck, ping_id)?;
            Ok(Negotiated {
                mode: TransportMode::SharedMemory {
                    segment: ack.shm_name.clone(),
                    capacity: seg.capacity(),
                    nonce: ack.nonce,
                },
                segment: Some(seg),
                ack,
                last_request_id: ping_id,
            })
        }
        None => {
            channel.send(Frame::new(MsgType::Ping, ping_id, Vec::new()).as_ref())?;
            expect_reply(channel.recv()?, MsgType::PingAck, ping_id)?;
            Ok(Negotiated {
                mode: TransportMode::Stream {
                    remote: channel.peer_addr(),
                },
                segment: None,
                ack,
                last_request_id: ping_id,
            })
        }
    }
}
