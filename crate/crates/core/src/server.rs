//! The policy server: accepts sessions, negotiates their transport and
//! dispatches requests to one agent instance per session, or relays them to
//! a backend speaking the same protocol.

use std::collections::HashMap;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::agent::{Agent, AgentError, AgentFactory};
use crate::error::{codes, Error, Result};
use crate::frame::{Flags, Frame, FrameRef, MsgType, DEFAULT_MAX_FRAME};
use crate::image::CompressionPolicy;
use crate::obs::{decode_obs, encode_act, Obs};
use crate::transport::shm::{ShmCloser, ShmPayload, ShmSegment, ShmState, DEFAULT_CAPACITY, MIN_CAPACITY};
use crate::transport::stream::{PeerStatus, StreamChannel};
use crate::transport::{
    error_payload, negotiate, parse_hello, HelloAck, NegotiateOptions, WaitStrategy, PROTO_VERSION,
};
use crate::value::{decode_value_exact, Map, Value};

pub enum AgentSource {
    /// A fresh agent per session.
    Local(AgentFactory),
    /// A dedicated connection per session to another server.
    Backend(String),
}

pub struct ServerConfig {
    pub bind: String,
    pub source: AgentSource,
    /// Advertised to stream clients that do not pick their own policy.
    pub compression: CompressionPolicy,
    pub shm_capacity: usize,
    pub shm_prefix: String,
    pub max_frame: usize,
    pub wait: WaitStrategy,
    pub handshake_timeout: Duration,
    pub backend_timeout: Duration,
}

impl ServerConfig {
    pub fn new(bind: impl Into<String>, source: AgentSource) -> Self {
        ServerConfig {
            bind: bind.into(),
            source,
            compression: CompressionPolicy::default(),
            shm_capacity: DEFAULT_CAPACITY,
            shm_prefix: "polserve".into(),
            max_frame: DEFAULT_MAX_FRAME,
            wait: WaitStrategy::default(),
            handshake_timeout: Duration::from_secs(30),
            backend_timeout: Duration::from_secs(60),
        }
    }

    pub fn local(bind: impl Into<String>, factory: AgentFactory) -> Self {
        Self::new(bind, AgentSource::Local(factory))
    }

    pub fn backend(bind: impl Into<String>, addr: impl Into<String>) -> Self {
        Self::new(bind, AgentSource::Backend(addr.into()))
    }
}

struct SessionCtl {
    stream: TcpStream,
    shm: Option<ShmCloser>,
}

struct Shared {
    cfg: ServerConfig,
    shutdown: AtomicBool,
    sessions: Mutex<HashMap<u64, SessionCtl>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    started: AtomicU64,
}

/// A running server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

pub fn serve(cfg: ServerConfig) -> Result<ServerHandle> {
    if cfg.shm_capacity < MIN_CAPACITY {
        return Err(Error::Config(format!(
            "shm_capacity {} below the {MIN_CAPACITY}-octet minimum",
            cfg.shm_capacity
        )));
    }
    cfg.compression.validate()?;
    let listener = TcpListener::bind(&cfg.bind).map_err(|source| Error::Bind {
        addr: cfg.bind.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        cfg,
        shutdown: AtomicBool::new(false),
        sessions: Mutex::new(HashMap::new()),
        workers: Mutex::new(Vec::new()),
        started: AtomicU64::new(0),
    });
    let acceptor = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name("polserve-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    log::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Sessions currently open.
    pub fn active_sessions(&self) -> usize {
        self.shared.sessions.lock().unwrap().len()
    }

    /// Sessions accepted since start.
    pub fn sessions_started(&self) -> u64 {
        self.shared.started.load(Ordering::Relaxed)
    }

    /// Stops accepting, closes every session and joins all threads.
    pub fn shutdown(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept()
        let _ = TcpStream::connect_timeout(&wake_addr(self.addr), Duration::from_millis(200));
        for ctl in self.shared.sessions.lock().unwrap().values() {
            if let Some(shm) = &ctl.shm {
                shm.close();
            }
            let _ = ctl.stream.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let workers = std::mem::take(&mut *self.shared.workers.lock().unwrap());
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => [127, 0, 0, 1].into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let id = shared.started.fetch_add(1, Ordering::Relaxed) + 1;
        let worker = {
            let shared = shared.clone();
            std::thread::Builder::new()
                .name(format!("polserve-session-{id}"))
                .spawn(move || {
                    if let Err(e) = run_session(&shared, id, stream) {
                        log::debug!("session {id} ended: {e}");
                    }
                    shared.sessions.lock().unwrap().remove(&id);
                })
        };
        match worker {
            Ok(h) => {
                let mut workers = shared.workers.lock().unwrap();
                workers.retain(|w| !w.is_finished());
                workers.push(h);
            }
            Err(e) => log::error!("cannot spawn session thread: {e}"),
        }
    }
}

/// A reply body: a value to encode, or octets relayed verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Value(Value),
    Raw(Vec<u8>),
}

impl ShmPayload for Body {
    fn payload_len(&self) -> Result<usize> {
        match self {
            Body::Value(v) => v.payload_len(),
            Body::Raw(b) => Ok(b.len()),
        }
    }
    fn write_to(&self, dst: &mut [u8]) -> Result<()> {
        match self {
            Body::Value(v) => v.write_to(dst),
            Body::Raw(b) => b[..].write_to(dst),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub msg_type: MsgType,
    pub flags: Flags,
    pub request_id: u64,
    pub body: Body,
}

impl Reply {
    fn value(msg_type: MsgType, request_id: u64, v: Value) -> Self {
        Reply {
            msg_type,
            flags: Flags::NONE,
            request_id,
            body: Body::Value(v),
        }
    }

    pub fn error(request_id: u64, code: &str, message: impl AsRef<str>) -> Self {
        Self::value(MsgType::Error, request_id, error_payload(code, message.as_ref()))
    }

    fn send_stream(&self, ch: &mut StreamChannel) -> Result<usize> {
        match &self.body {
            Body::Value(v) => ch.send_value(self.msg_type, self.flags, self.request_id, v),
            Body::Raw(b) => ch.send(FrameRef {
                msg_type: self.msg_type,
                flags: self.flags,
                request_id: self.request_id,
                payload: b,
            }),
        }
    }

    /// The reply as a frame, with a `Value` body encoded.
    pub fn to_frame(&self) -> Result<Frame> {
        let payload = match &self.body {
            Body::Value(v) => crate::value::encode_value(v)?,
            Body::Raw(b) => b.clone(),
        };
        Ok(Frame::new(self.msg_type, self.request_id, payload).with_flags(self.flags))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Connected,
    Initialized,
    Ready,
    Closed,
}

struct Backend {
    channel: StreamChannel,
    next_id: u64,
    lost: bool,
}

impl Backend {
    fn connect(addr: &str, timeout: Duration, call_timeout: Duration, max_frame: usize) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::Connect { addr: addr.into(), reason: e.to_string() })?
            .next()
            .ok_or_else(|| Error::Connect { addr: addr.into(), reason: "no address".into() })?;
        let stream = TcpStream::connect_timeout(&sock, timeout)
            .map_err(|e| Error::Connect { addr: addr.into(), reason: e.to_string() })?;
        let mut channel = StreamChannel::new(stream, max_frame)?;
        let opts = NegotiateOptions {
            force_stream: true,
            timeout,
            ..Default::default()
        };
        let n = negotiate(&mut channel, &opts, 1)?;
        channel.set_read_timeout(Some(call_timeout))?;
        Ok(Backend {
            channel,
            next_id: n.last_request_id + 1,
            lost: false,
        })
    }

    fn relay(&mut self, req: FrameRef<'_>) -> Reply {
        if self.lost {
            return Reply::error(req.request_id, codes::BACKEND_LOST, "backend connection was lost");
        }
        let id = self.next_id;
        self.next_id += 1;
        let fwd = FrameRef { request_id: id, ..req };
        let resp = self.channel.send(fwd).and_then(|_| self.channel.recv());
        match resp {
            Ok(f) if f.request_id == id => Reply {
                msg_type: f.msg_type,
                flags: f.flags,
                request_id: req.request_id,
                body: Body::Raw(f.payload),
            },
            Ok(f) => {
                self.lost = true;
                Reply::error(
                    req.request_id,
                    codes::BACKEND_LOST,
                    format!("backend answered request {} instead of {id}", f.request_id),
                )
            }
            Err(e) => {
                self.lost = true;
                Reply::error(req.request_id, codes::BACKEND_LOST, e.to_string())
            }
        }
    }

    fn close(&mut self) {
        if !self.lost {
            let id = self.next_id;
            self.next_id += 1;
            let _ = self.channel.send(Frame::new(MsgType::Close, id, Vec::new()).as_ref());
        }
        self.channel.shutdown();
    }
}

enum Handler {
    Local(Box<dyn Agent>),
    Backend(Backend),
}

/// Per-session protocol state machine, independent of the transport.
pub struct Session {
    phase: Phase,
    handler: Handler,
    last_request_id: u64,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "agent panicked".into()
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, AgentError>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("panic: {}", panic_message(p))),
    }
}

impl Session {
    /// A session hosting `agent` in-process, as if its HELLO carried
    /// `hello_id`.
    pub fn local(agent: Box<dyn Agent>, hello_id: u64) -> Self {
        Session {
            phase: Phase::Connected,
            handler: Handler::Local(agent),
            last_request_id: hello_id,
        }
    }

    fn with_backend(backend: Backend, hello_id: u64) -> Self {
        Session {
            phase: Phase::Connected,
            handler: Handler::Backend(backend),
            last_request_id: hello_id,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Handles one request. Returns `None` when the session should end.
    pub fn dispatch(&mut self, req: FrameRef<'_>) -> Option<Reply> {
        if self.phase == Phase::Closed {
            return None;
        }
        if req.msg_type == MsgType::Close {
            self.phase = Phase::Closed;
            if let Handler::Backend(b) = &mut self.handler {
                b.close();
            }
            return None;
        }
        let id = req.request_id;
        if id <= self.last_request_id {
            return Some(Reply::error(
                id,
                codes::BAD_REQUEST_ID,
                format!("request_id {id} not above {}", self.last_request_id),
            ));
        }
        self.last_request_id = id;
        match req.msg_type {
            MsgType::Ping => Some(Reply {
                msg_type: MsgType::PingAck,
                flags: req.flags,
                request_id: id,
                body: Body::Raw(req.payload.to_vec()),
            }),
            MsgType::Initialize | MsgType::Reset | MsgType::Act => Some(match &mut self.handler {
                Handler::Backend(b) => b.relay(req),
                Handler::Local(_) => self.dispatch_local(req),
            }),
            other => Some(Reply::error(id, codes::BAD_MESSAGE, format!("unexpected {other:?}"))),
        }
    }

    fn dispatch_local(&mut self, req: FrameRef<'_>) -> Reply {
        let Handler::Local(agent) = &mut self.handler else {
            unreachable!("local dispatch without a local agent")
        };
        let id = req.request_id;
        let bad_phase = |what: &str, phase: Phase| {
            Reply::error(id, codes::BAD_PHASE, format!("{what} not allowed in phase {phase:?}"))
        };
        match req.msg_type {
            MsgType::Initialize => {
                if self.phase != Phase::Connected {
                    return bad_phase("INITIALIZE", self.phase);
                }
                match guarded(|| agent.initialize()) {
                    Ok(()) => {
                        self.phase = Phase::Initialized;
                        Reply::value(MsgType::InitializeAck, id, Value::Null)
                    }
                    Err(e) => Reply::error(id, codes::AGENT_FAILURE, e),
                }
            }
            MsgType::Reset => {
                if !matches!(self.phase, Phase::Initialized | Phase::Ready) {
                    return bad_phase("RESET", self.phase);
                }
                let (obs, instruction, kwargs) = match decode_reset(req) {
                    Ok(parts) => parts,
                    Err(e) => return Reply::error(id, codes::DECODE_FAILURE, e.to_string()),
                };
                match guarded(|| agent.reset(&obs, &instruction, &kwargs)) {
                    Ok(m) => {
                        self.phase = Phase::Ready;
                        Reply::value(MsgType::ResetAck, id, Value::Map(m))
                    }
                    Err(e) => Reply::error(id, codes::AGENT_FAILURE, e),
                }
            }
            MsgType::Act => {
                if self.phase != Phase::Ready {
                    return bad_phase("ACT", self.phase);
                }
                let obs = match decode_value_exact(req.payload).and_then(|v| decode_obs(v, req.flags.batched())) {
                    Ok(o) => o,
                    Err(e) => return Reply::error(id, codes::DECODE_FAILURE, e.to_string()),
                };
                let act = guarded(|| {
                    let act = agent.act(&obs)?;
                    act.validate(obs.batch)?;
                    Ok(act)
                });
                match act {
                    Ok(act) => Reply {
                        msg_type: MsgType::ActAck,
                        flags: Flags::NONE.with(Flags::BATCHED, req.flags.batched()),
                        request_id: id,
                        body: Body::Value(encode_act(&act)),
                    },
                    Err(e) => Reply::error(id, codes::AGENT_FAILURE, e),
                }
            }
            _ => unreachable!(),
        }
    }
}

fn decode_reset(req: FrameRef<'_>) -> Result<(Obs, Value, Map)> {
    let v = decode_value_exact(req.payload)?;
    let Value::Map(mut m) = v else {
        return Err(Error::decoding(0, "RESET payload must be a map"));
    };
    let obs = decode_obs(m.remove("obs").unwrap_or_else(|| Value::Map(Map::new())), req.flags.batched())?;
    let instruction = m.remove("instruction").unwrap_or(Value::Null);
    let kwargs = match m.remove("kwargs") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Map(k)) => k,
        Some(other) => return Err(Error::decoding(0, format!("kwargs must be a map, got {}", other.kind_name()))),
    };
    Ok((obs, instruction, kwargs))
}

fn register(shared: &Shared, id: u64, stream: &TcpStream, shm: Option<ShmCloser>) -> Result<()> {
    let ctl = SessionCtl {
        stream: stream.try_clone()?,
        shm,
    };
    let mut sessions = shared.sessions.lock().unwrap();
    // closes the race with a shutdown that already walked the registry
    if shared.shutdown.load(Ordering::SeqCst) {
        return Err(Error::ChannelClosed);
    }
    sessions.insert(id, ctl);
    Ok(())
}

enum Chosen {
    Shm,
    Stream,
}

fn run_session(shared: &Shared, id: u64, stream: TcpStream) -> Result<()> {
    let cfg = &shared.cfg;
    let mut channel = StreamChannel::new(stream, cfg.max_frame)?;
    let raw = channel.try_clone_stream()?;
    register(shared, id, &raw, None)?;

    channel.set_read_timeout(Some(cfg.handshake_timeout))?;
    let hello = channel.recv()?;
    if hello.msg_type != MsgType::Hello {
        let r = Reply::error(hello.request_id, codes::BAD_MESSAGE, "expected HELLO");
        r.send_stream(&mut channel)?;
        return Err(Error::Protocol("session did not start with HELLO".into()));
    }
    let version = decode_value_exact(&hello.payload).and_then(|v| parse_hello(&v));
    match version {
        Ok(PROTO_VERSION) => {}
        Ok(v) => {
            let msg = format!("protocol version {v} unsupported, server speaks {PROTO_VERSION}");
            Reply::error(hello.request_id, codes::UNSUPPORTED_VERSION, &msg).send_stream(&mut channel)?;
            return Err(Error::Protocol(msg));
        }
        Err(e) => {
            Reply::error(hello.request_id, codes::DECODE_FAILURE, e.to_string()).send_stream(&mut channel)?;
            return Err(e);
        }
    }

    let mut session = match &cfg.source {
        AgentSource::Local(factory) => Session::local(factory(), hello.request_id),
        AgentSource::Backend(addr) => {
            match Backend::connect(addr, cfg.handshake_timeout.min(Duration::from_secs(5)), cfg.backend_timeout, cfg.max_frame) {
                Ok(b) => Session::with_backend(b, hello.request_id),
                Err(e) => {
                    let msg = format!("backend {addr} unreachable: {e}");
                    Reply::error(hello.request_id, codes::BACKEND_UNAVAILABLE, &msg).send_stream(&mut channel)?;
                    return Err(Error::Connect { addr: addr.clone(), reason: msg });
                }
            }
        }
    };

    let seg_name = format!("{}-{}", cfg.shm_prefix, uuid::Uuid::new_v4());
    let mut segment = match ShmSegment::create(&seg_name, cfg.shm_capacity) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("session {id}: no shared memory offered ({e})");
            None
        }
    };
    if let Some(seg) = &segment {
        register(shared, id, &raw, Some(seg.closer()))?;
    }
    let ack = HelloAck {
        shm_name: segment.as_ref().map(|s| s.name().to_owned()).unwrap_or_default(),
        shm_capacity: segment.as_ref().map_or(0, |s| s.capacity()),
        nonce: segment.as_ref().map_or([0; 16], |s| s.nonce()),
        jpeg_quality: Some(if cfg.compression.enabled { cfg.compression.quality } else { 0 }),
    };
    Reply::value(MsgType::HelloAck, hello.request_id, ack.to_value()).send_stream(&mut channel)?;

    // The client confirms its choice with a PING on the segment or the stream.
    let deadline = Instant::now() + cfg.handshake_timeout;
    let chosen = loop {
        if segment.as_ref().is_some_and(|s| s.state() == ShmState::RequestReady) {
            break Chosen::Shm;
        }
        match channel.poll_peer()? {
            PeerStatus::DataReady => break Chosen::Stream,
            PeerStatus::Closed => return Err(Error::ConnectionLost("client left during handshake".into())),
            PeerStatus::Idle => {}
        }
        if shared.shutdown.load(Ordering::SeqCst) {
            return Err(Error::ChannelClosed);
        }
        if Instant::now() >= deadline {
            return Err(Error::Timeout(cfg.handshake_timeout));
        }
        std::thread::sleep(Duration::from_micros(20));
    };

    match chosen {
        Chosen::Shm => {
            let mut seg = segment.take().unwrap();
            // both sides hold a mapping now; the name is no longer needed
            seg.unlink();
            log::debug!("session {id}: shared memory {}", seg.name());
            let result = serve_shm(shared, &mut session, &mut seg, &channel);
            seg.close();
            result
        }
        Chosen::Stream => {
            drop(segment.take());
            register(shared, id, &raw, None)?;
            log::debug!("session {id}: stream");
            channel.set_read_timeout(None)?;
            serve_stream(&mut session, &mut channel)
        }
    }
}

fn serve_stream(session: &mut Session, channel: &mut StreamChannel) -> Result<()> {
    loop {
        let frame = match channel.recv() {
            Ok(f) => f,
            Err(e @ Error::Integrity { .. }) => {
                // framing is intact, only the payload is bad
                Reply::error(0, codes::DECODE_FAILURE, e.to_string()).send_stream(channel)?;
                continue;
            }
            Err(e @ (Error::Protocol(_) | Error::FrameTooLarge { .. })) => {
                let _ = Reply::error(0, codes::DECODE_FAILURE, e.to_string()).send_stream(channel);
                return Err(e);
            }
            Err(Error::ConnectionLost(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        match session.dispatch(frame.as_ref()) {
            Some(reply) => {
                reply.send_stream(channel)?;
            }
            None => return Ok(()),
        }
    }
}

fn serve_shm(shared: &Shared, session: &mut Session, seg: &mut ShmSegment, channel: &StreamChannel) -> Result<()> {
    let wait = shared.cfg.wait;
    loop {
        let waited = seg.await_state(ShmState::RequestReady, None, &wait, &mut || {
            if shared.shutdown.load(Ordering::SeqCst) {
                return Err(Error::ChannelClosed);
            }
            match channel.poll_peer()? {
                PeerStatus::Closed => Err(Error::ConnectionLost("client went away".into())),
                _ => Ok(()),
            }
        });
        match waited {
            Ok(()) => {}
            Err(Error::ChannelClosed | Error::ConnectionLost(_)) => return Ok(()),
            Err(e) => return Err(e),
        }
        seg.begin_processing()?;
        let reply = match seg.read_message() {
            Ok(msg) => session.dispatch(msg),
            Err(e) => Some(Reply::error(0, codes::DECODE_FAILURE, e.to_string())),
        };
        match reply {
            Some(r) => match seg.send_response(r.msg_type, r.flags, r.request_id, &r.body) {
                Ok(()) => {}
                Err(e @ Error::FrameTooLarge { .. }) => {
                    let err = Reply::error(r.request_id, codes::AGENT_FAILURE, e.to_string());
                    seg.send_response(err.msg_type, err.flags, err.request_id, &err.body)?;
                }
                Err(e) => return Err(e),
            },
            None => return Ok(()),
        }
    }
}
