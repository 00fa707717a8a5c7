//! Client mirroring the agent interface over a negotiated transport.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::frame::{Flags, Frame, MsgType, DEFAULT_MAX_FRAME};
use crate::image::CompressionPolicy;
use crate::obs::{compress_cameras, decode_act, encode_obs, obs_flags, Act, Obs, ObsWriter};
use crate::transport::shm::{ShmPayload, ShmSegment, ShmState};
use crate::transport::stream::{PeerStatus, StreamChannel};
use crate::transport::{
    force_stream_from_env, negotiate, remote_error, AttachHook, NegotiateOptions, TransportMode,
    WaitStrategy, PROTO_VERSION,
};
use crate::value::{decode_value_exact, Map, Value};

#[derive(Clone)]
pub struct ConnectOptions {
    /// Never use shared memory, even on the server's host.
    pub force_stream: bool,
    pub connect_timeout: Duration,
    pub call_timeout: Duration,
    pub ping_timeout: Duration,
    /// `None` adopts the policy the server advertises.
    pub compression: Option<CompressionPolicy>,
    pub wait: WaitStrategy,
    pub attach_hook: Option<AttachHook>,
    pub max_frame: usize,
    pub proto_version: i64,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        ConnectOptions {
            force_stream: false,
            connect_timeout: Duration::from_secs(5),
            call_timeout: Duration::from_secs(30),
            ping_timeout: Duration::from_secs(2),
            compression: None,
            wait: WaitStrategy::default(),
            attach_hook: None,
            max_frame: DEFAULT_MAX_FRAME,
            proto_version: PROTO_VERSION,
        }
    }
}

impl ConnectOptions {
    pub fn stream() -> Self {
        ConnectOptions {
            force_stream: true,
            ..Default::default()
        }
    }

    pub fn with_compression(mut self, p: CompressionPolicy) -> Self {
        self.compression = Some(p);
        self
    }
}

enum Body<'a> {
    Value(&'a Value),
    Obs(ObsWriter<'a>),
    Raw(&'a [u8]),
}

impl ShmPayload for Body<'_> {
    fn payload_len(&self) -> Result<usize> {
        match self {
            Body::Value(v) => v.payload_len(),
            Body::Obs(w) => w.payload_len(),
            Body::Raw(b) => Ok(b.len()),
        }
    }

    fn write_to(&self, dst: &mut [u8]) -> Result<()> {
        match self {
            Body::Value(v) => v.write_to(dst),
            Body::Obs(w) => w.write_to(dst),
            Body::Raw(b) => b.write_to(dst),
        }
    }
}

/// A connection to a policy server.
///
/// One request is in flight at a time. After [`close`](Self::close), or
/// after a transport failure breaks the request/response alternation, every
/// call fails with [`Error::ChannelClosed`].
pub struct PolicyClient {
    channel: StreamChannel,
    shm: Option<ShmSegment>,
    mode: TransportMode,
    compression: CompressionPolicy,
    opts: ConnectOptions,
    next_id: u64,
    closed: bool,
    initialized: bool,
    last_request_len: usize,
}

impl PolicyClient {
    pub fn connect(addr: &str, opts: ConnectOptions) -> Result<Self> {
        let connect_err = |reason: String| Error::Connect {
            addr: addr.to_owned(),
            reason,
        };
        let targets: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .collect();
        let mut last = String::from("no address resolved");
        let mut stream = None;
        for t in targets {
            match TcpStream::connect_timeout(&t, opts.connect_timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        let mut channel = StreamChannel::new(stream, opts.max_frame)?;

        let nopts = NegotiateOptions {
            force_stream: opts.force_stream || force_stream_from_env(),
            timeout: opts.connect_timeout,
            wait: opts.wait,
            attach_hook: opts.attach_hook.clone(),
            proto_version: opts.proto_version,
        };
        let n = match negotiate(&mut channel, &nopts, 1) {
            Ok(n) => n,
            Err(Error::Timeout(t)) => return Err(connect_err(format!("handshake timed out after {t:?}"))),
            Err(e) => return Err(e),
        };
        let compression = if n.segment.is_some() {
            CompressionPolicy::disabled()
        } else {
            match (opts.compression, n.ack.jpeg_quality) {
                (Some(p), _) => p,
                (None, Some(0)) => CompressionPolicy::disabled(),
                (None, Some(q)) => CompressionPolicy::jpeg(q)?,
                (None, None) => CompressionPolicy::default(),
            }
        };
        compression.validate()?;
        channel.set_read_timeout(Some(opts.call_timeout))?;
        log::debug!("connected to {addr} via {}", n.mode.label());
        Ok(PolicyClient {
            channel,
            shm: n.segment,
            mode: n.mode,
            compression,
            opts,
            next_id: n.last_request_id + 1,
            closed: false,
            initialized: false,
            last_request_len: 0,
        })
    }

    pub fn mode(&self) -> &TransportMode {
        &self.mode
    }

    pub fn compression(&self) -> &CompressionPolicy {
        &self.compression
    }

    /// Payload octets of the most recent request.
    pub fn last_request_len(&self) -> usize {
        self.last_request_len
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Whether [`initialize`](Self::initialize) has succeeded.
    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn call(&mut self, msg_type: MsgType, flags: Flags, body: Body<'_>, timeout: Duration) -> Result<Frame> {
        if self.closed {
            return Err(Error::ChannelClosed);
        }
        let id = self.next_id;
        self.next_id += 1;
        let res = self.exchange(msg_type, flags, id, &body, timeout);
        if let Err(e) = &res {
            if matches!(
                e,
                Error::Timeout(_) | Error::ConnectionLost(_) | Error::ChannelClosed | Error::Io(_) | Error::Protocol(_)
            ) {
                self.shutdown_transport();
            }
        }
        let reply = res?;
        if reply.request_id != id {
            self.shutdown_transport();
            return Err(Error::Protocol(format!("reply to request {} while waiting for {id}", reply.request_id)));
        }
        match reply.msg_type {
            MsgType::Error => Err(remote_error(&reply.payload)),
            t if Some(t) == msg_type.ack() => Ok(reply),
            t => Err(Error::Protocol(format!("{t:?} in reply to {msg_type:?}"))),
        }
    }

    fn exchange(&mut self, msg_type: MsgType, flags: Flags, id: u64, body: &Body<'_>, timeout: Duration) -> Result<Frame> {
        self.last_request_len = body.payload_len()?;
        match &mut self.shm {
            Some(seg) => {
                seg.send_request(msg_type, flags, id, body)?;
                let deadline = Instant::now() + timeout;
                let channel = &self.channel;
                seg.await_state(ShmState::ResponseReady, Some(deadline), &self.opts.wait, &mut || {
                    match channel.poll_peer()? {
                        PeerStatus::Closed => Err(Error::ConnectionLost("server went away".into())),
                        _ => Ok(()),
                    }
                })?;
                let reply = seg.read_message()?.to_owned();
                seg.finish_response()?;
                Ok(reply)
            }
            None => {
                match body {
                    Body::Value(v) => self.channel.send_value(msg_type, flags, id, v)?,
                    Body::Obs(w) => {
                        let len = w.encoded_len()?;
                        self.channel.send_with(msg_type, flags, id, len, |buf| w.write(buf))?
                    }
                    Body::Raw(b) => self.channel.send(crate::frame::FrameRef {
                        msg_type,
                        flags,
                        request_id: id,
                        payload: b,
                    })?,
                };
                self.channel.set_read_timeout(Some(timeout))?;
                self.channel.recv()
            }
        }
    }

    pub fn initialize(&mut self) -> Result<()> {
        self.call(MsgType::Initialize, Flags::NONE, Body::Value(&Value::Null), self.opts.call_timeout)?;
        self.initialized = true;
        Ok(())
    }

    pub fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map> {
        let mut m = Map::new();
        m.insert("obs".into(), encode_obs(obs, &self.compression)?);
        m.insert("instruction".into(), instruction.clone());
        m.insert("kwargs".into(), Value::Map(kwargs.clone()));
        let flags = obs_flags(obs, &self.compression);
        let reply = self.call(MsgType::Reset, flags, Body::Value(&Value::Map(m)), self.opts.call_timeout)?;
        match decode_value_exact(&reply.payload)? {
            Value::Map(m) => Ok(m),
            other => Err(Error::decoding(0, format!("RESET_ACK carries {}, expected map", other.kind_name()))),
        }
    }

    pub fn act(&mut self, obs: &Obs) -> Result<Act> {
        let jpegs = match self.shm {
            Some(_) => BTreeMap::new(),
            None => compress_cameras(obs, &self.compression)?,
        };
        let flags = if self.shm.is_some() {
            obs_flags(obs, &CompressionPolicy::disabled())
        } else {
            obs_flags(obs, &self.compression)
        };
        let writer = ObsWriter::new(obs, &jpegs)?;
        let reply = self.call(MsgType::Act, flags, Body::Obs(writer), self.opts.call_timeout)?;
        let act = decode_act(decode_value_exact(&reply.payload)?)?;
        if reply.flags.batched() != obs.is_batched() {
            return Err(Error::Protocol("ACT_ACK batched flag does not mirror the request".into()));
        }
        act.validate(obs.batch).map_err(|e| Error::Protocol(format!("server returned {e}")))?;
        Ok(act)
    }

    /// Round trip of a `PING` carrying `payload`.
    pub fn ping(&mut self, payload: &[u8]) -> Result<Duration> {
        let t = Instant::now();
        let reply = self.call(MsgType::Ping, Flags::NONE, Body::Raw(payload), self.opts.ping_timeout)?;
        let rtt = t.elapsed();
        if reply.payload != payload {
            return Err(Error::Protocol("PING_ACK does not echo the payload".into()));
        }
        Ok(rtt)
    }

    fn shutdown_transport(&mut self) {
        self.closed = true;
        if let Some(seg) = &self.shm {
            seg.close();
        }
        self.channel.shutdown();
    }

    /// Tells the server to end the session. Idempotent.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        let id = self.next_id;
        self.next_id += 1;
        let res = match &mut self.shm {
            Some(seg) => seg.send_request(MsgType::Close, Flags::NONE, id, &[][..]),
            None => self
                .channel
                .send(Frame::new(MsgType::Close, id, Vec::new()).as_ref())
                .map(|_| ()),
        };
        self.closed = true;
        self.channel.shutdown();
        match res {
            Ok(()) | Err(Error::ChannelClosed) | Err(Error::ConnectionLost(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }
}

impl Drop for PolicyClient {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl std::fmt::Debug for PolicyClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyClient")
            .field("mode", &self.mode)
            .field("compression", &self.compression)
            .field("next_id", &self.next_id)
            .field("closed", &self.closed)
            .finish()
    }
}
