use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use polserve::agent::{builtin_factory, factory, EchoAgent, ScriptedAgent};
use polserve::error::codes;
use polserve::fixtures::noise_image;
use polserve::server::{serve, ServerConfig};
use polserve::transport::shm::segment_path;
use polserve::{CompressionPolicy, ConnectOptions, Error, Map, NdArray, Obs, PolicyClient, Value};

fn echo_server() -> polserve::ServerHandle {
    serve(ServerConfig::local("127.0.0.1:0", factory(|| EchoAgent { dim: 7 }))).unwrap()
}

fn obs(size: usize) -> Obs {
    Obs::new()
        .with_camera("left", noise_image(size, 1))
        .with_camera("right", noise_image(size, 2))
        .with_gripper(0.25)
}

#[test]
fn shared_memory_session() {
    let server = echo_server();
    let addr = server.local_addr().to_string();
    let mut c = PolicyClient::connect(&addr, ConnectOptions::default()).unwrap();
    assert!(c.mode().is_shared_memory());
    assert!(!c.compression().enabled);
    c.initialize().unwrap();
    c.reset(&obs(64), &Value::from("pick"), &Map::new()).unwrap();
    for _ in 0..20 {
        let a = c.act(&obs(64)).unwrap();
        assert_eq!(a.action.shape(), &[7]);
        assert_eq!(a.info["echo_gripper"], Value::Real(0.25));
    }
    assert!(c.ping(b"abc").unwrap() > Duration::ZERO);
    c.close().unwrap();
    assert!(matches!(c.act(&obs(8)), Err(Error::ChannelClosed)));
}

#[test]
fn stream_session_with_jpeg() {
    let server = echo_server();
    let addr = server.local_addr().to_string();
    let mut c = PolicyClient::connect(&addr, ConnectOptions::stream()).unwrap();
    c.initialize().unwrap();
    assert!(!c.mode().is_shared_memory());
    assert_eq!(c.compression().quality, 90);
    let o = obs(224);
    c.reset(&o, &Value::Null, &Map::new()).unwrap();
    let a = c.act(&o).unwrap();
    assert_eq!(a.action.shape(), &[7]);
    assert!(c.last_request_len() < o.raw_camera_bytes());
}

#[test]
fn stream_session_raw() {
    let server = echo_server();
    let addr = server.local_addr().to_string();
    let opts = ConnectOptions::stream().with_compression(CompressionPolicy::disabled());
    let mut c = PolicyClient::connect(&addr, opts).unwrap();
    c.initialize().unwrap();
    let o = obs(224);
    c.reset(&o, &Value::Null, &Map::new()).unwrap();
    c.act(&o).unwrap();
    assert!(c.last_request_len() > o.raw_camera_bytes());
}

#[test]
fn client_adopts_server_quality() {
    let mut cfg = ServerConfig::local("127.0.0.1:0", factory(|| EchoAgent { dim: 7 }));
    cfg.compression = CompressionPolicy::jpeg(60).unwrap();
    let server = serve(cfg).unwrap();
    let c = PolicyClient::connect(&server.local_addr().to_string(), ConnectOptions::stream()).unwrap();
    assert_eq!(c.compression().quality, 60);

    let mut cfg = ServerConfig::local("127.0.0.1:0", factory(|| EchoAgent { dim: 7 }));
    cfg.compression = CompressionPolicy::disabled();
    let server = serve(cfg).unwrap();
    let c = PolicyClient::connect(&server.local_addr().to_string(), ConnectOptions::stream()).unwrap();
    assert!(!c.compression().enabled);
}

#[test]
fn act_before_reset_is_bad_phase() {
    let server = echo_server();
    for opts in [ConnectOptions::default(), ConnectOptions::stream()] {
        let mut c = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap();
        let e = c.act(&obs(8)).unwrap_err();
        assert_eq!(e.remote_code(), Some(codes::BAD_PHASE), "{e}");
        let e = c.reset(&obs(8), &Value::Null, &Map::new()).unwrap_err();
        assert_eq!(e.remote_code(), Some(codes::BAD_PHASE), "{e}");
        c.initialize().unwrap();
        // the session survives an ERROR reply
        c.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
        c.act(&obs(8)).unwrap();
    }
}

#[test]
fn sessions_are_isolated() {
    let server = serve(ServerConfig::local(
        "127.0.0.1:0",
        factory(|| ScriptedAgent::ramp(10, 3).unwrap()),
    ))
    .unwrap();
    let addr = server.local_addr().to_string();
    let mut a = PolicyClient::connect(&addr, ConnectOptions::default()).unwrap();
    let mut b = PolicyClient::connect(&addr, ConnectOptions::stream()).unwrap();
    a.initialize().unwrap();
    b.initialize().unwrap();
    a.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    b.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    for _ in 0..3 {
        a.act(&obs(8)).unwrap();
    }
    let first_b = b.act(&obs(8)).unwrap();
    assert_eq!(first_b.info["step"], Value::Int(0));
    assert_eq!(a.act(&obs(8)).unwrap().info["step"], Value::Int(3));
    assert_eq!(server.sessions_started(), 2);
}

#[test]
fn nonce_mismatch_falls_back_to_stream() {
    let server = echo_server();
    let hook: polserve::transport::AttachHook = Arc::new(|name: &str| {
        use std::io::{Seek, SeekFrom, Write};
        let mut f = std::fs::OpenOptions::new().write(true).open(segment_path(name).unwrap()).unwrap();
        f.seek(SeekFrom::Start(8)).unwrap();
        f.write_all(&[0xAA; 16]).unwrap();
    });
    let opts = ConnectOptions {
        attach_hook: Some(hook),
        ..Default::default()
    };
    let mut c = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap();
    assert!(!c.mode().is_shared_memory());
    c.initialize().unwrap();
    c.reset(&obs(32), &Value::Null, &Map::new()).unwrap();
    c.act(&obs(32)).unwrap();
}

#[test]
fn removed_segment_falls_back_and_is_cleaned_up() {
    let server = echo_server();
    let seen = Arc::new(std::sync::Mutex::new(String::new()));
    let seen2 = seen.clone();
    let hook: polserve::transport::AttachHook = Arc::new(move |name: &str| {
        *seen2.lock().unwrap() = name.to_owned();
        std::fs::remove_file(segment_path(name).unwrap()).unwrap();
    });
    let opts = ConnectOptions {
        attach_hook: Some(hook),
        ..Default::default()
    };
    let mut c = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap();
    assert!(!c.mode().is_shared_memory());
    c.initialize().unwrap();
    c.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    c.act(&obs(8)).unwrap();
    assert!(!segment_path(&seen.lock().unwrap()).unwrap().exists());
}

#[test]
fn shm_segment_file_is_unlinked_after_handshake() {
    let server = echo_server();
    let name = Arc::new(std::sync::Mutex::new(String::new()));
    let n2 = name.clone();
    let opts = ConnectOptions {
        attach_hook: Some(Arc::new(move |s: &str| *n2.lock().unwrap() = s.to_owned())),
        ..Default::default()
    };
    let c = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap();
    assert!(c.mode().is_shared_memory());
    assert!(!segment_path(&name.lock().unwrap()).unwrap().exists());
}

#[test]
fn unsupported_version_is_a_protocol_error() {
    let server = echo_server();
    let opts = ConnectOptions {
        proto_version: 2,
        ..Default::default()
    };
    let e = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap_err();
    assert!(matches!(e, Error::Protocol(_)), "{e}");
}

#[test]
fn connect_refused_is_connect_error() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    drop(l);
    let e = PolicyClient::connect(&addr, ConnectOptions::default()).unwrap_err();
    assert!(matches!(e, Error::Connect { .. }), "{e}");
}

#[test]
fn shutdown_unblocks_clients() {
    let mut server = serve(ServerConfig::local(
        "127.0.0.1:0",
        builtin_factory("sleep", &BTreeMap::from([("ms".to_string(), "0".to_string())])).unwrap(),
    ))
    .unwrap();
    let addr = server.local_addr().to_string();
    let mut shm = PolicyClient::connect(&addr, ConnectOptions::default()).unwrap();
    let mut tcp = PolicyClient::connect(&addr, ConnectOptions::stream()).unwrap();
    shm.initialize().unwrap();
    tcp.initialize().unwrap();
    shm.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    tcp.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    server.shutdown();
    assert_eq!(server.active_sessions(), 0);
    assert!(shm.act(&obs(8)).is_err());
    assert!(tcp.act(&obs(8)).is_err());
    assert!(matches!(shm.act(&obs(8)), Err(Error::ChannelClosed)));
    assert!(PolicyClient::connect(&addr, ConnectOptions::default()).is_err());
}

#[test]
fn agent_panic_becomes_agent_failure() {
    struct Panicky;
    impl polserve::Agent for Panicky {
        fn reset(&mut self, _: &Obs, _: &Value, _: &Map) -> Result<Map, polserve::AgentError> {
            Ok(Map::new())
        }
        fn act(&mut self, _: &Obs) -> Result<polserve::Act, polserve::AgentError> {
            panic!("boom")
        }
    }
    let server = serve(ServerConfig::local("127.0.0.1:0", factory(|| Panicky))).unwrap();
    let mut c = PolicyClient::connect(&server.local_addr().to_string(), ConnectOptions::default()).unwrap();
    c.initialize().unwrap();
    c.reset(&obs(8), &Value::Null, &Map::new()).unwrap();
    let e = c.act(&obs(8)).unwrap_err();
    assert_eq!(e.remote_code(), Some(codes::AGENT_FAILURE));
    // the server keeps serving
    let mut d = PolicyClient::connect(&server.local_addr().to_string(), ConnectOptions::stream()).unwrap();
    d.ping(b"").unwrap();
}

#[test]
fn batched_act_over_both_transports() {
    let server = echo_server();
    for opts in [ConnectOptions::default(), ConnectOptions::stream()] {
        let mut c = PolicyClient::connect(&server.local_addr().to_string(), opts).unwrap();
        c.initialize().unwrap();
        for b in [1usize, 4, 16] {
            let mut data = Vec::new();
            for i in 0..b {
                data.extend_from_slice(noise_image(32, i as u64).as_u8().unwrap());
            }
            let o = Obs {
                cameras: [("cam".to_string(), NdArray::from_u8(vec![b, 32, 32, 3], data).unwrap())].into(),
                gripper: Some(polserve::Gripper::Batched(vec![0.1; b])),
                info: Map::new(),
                batch: Some(b),
            };
            c.reset(&o, &Value::Null, &Map::new()).unwrap();
            assert_eq!(c.act(&o).unwrap().action.shape(), &[b, 7]);
        }
    }
}
