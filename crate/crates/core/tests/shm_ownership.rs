use std::os::unix::fs::FileExt;

use polserve::frame::{Flags, MsgType};
use polserve::transport::shm::{ShmSegment, ShmState, MIN_CAPACITY, OFF_PAYLOAD_LEN, OFF_STATE, SHM_HEADER_LEN};
use polserve::Error;

const CANARY: u8 = 0xA5;

fn unique(tag: &str) -> String {
    format!("polserve-test-{tag}-{}", std::process::id())
}

fn snapshot(seg: &ShmSegment) -> Vec<u8> {
    std::fs::read(seg.path()).unwrap()
}

fn paint(seg: &ShmSegment) {
    let f = std::fs::OpenOptions::new().write(true).open(seg.path()).unwrap();
    f.write_at(&vec![CANARY; seg.max_payload()], SHM_HEADER_LEN as u64).unwrap();
}

#[test]
fn writes_stay_within_payload_len() {
    let mut server = ShmSegment::create(&unique("canary"), MIN_CAPACITY).unwrap();
    let mut client = ShmSegment::attach(server.name(), &server.nonce()).unwrap();
    paint(&server);

    let req: Vec<u8> = (0..1000u32).map(|i| i as u8).collect();
    client.send_request(MsgType::Act, Flags::NONE, 1, &req[..]).unwrap();
    let after = snapshot(&server);
    let end = SHM_HEADER_LEN + req.len();
    assert_eq!(&after[SHM_HEADER_LEN..end], &req[..]);
    assert!(after[end..].iter().all(|&b| b == CANARY), "request spilled past its length");
    assert_eq!(u32::from_le_bytes(after[OFF_PAYLOAD_LEN..OFF_PAYLOAD_LEN + 4].try_into().unwrap()), 1000);

    server.begin_processing().unwrap();
    server.send_response(MsgType::ActAck, Flags::NONE, 1, &b"short"[..]).unwrap();
    let resp = snapshot(&server);
    assert_eq!(&resp[SHM_HEADER_LEN..SHM_HEADER_LEN + 5], b"short");
    // past the reply only the old request octets and the canary remain
    assert_eq!(&resp[SHM_HEADER_LEN + 5..], &after[SHM_HEADER_LEN + 5..]);

    let msg = client.read_message().unwrap();
    assert_eq!(msg.payload, b"short");
    client.finish_response().unwrap();
}

#[test]
fn maximum_payload_fills_the_segment_exactly() {
    let mut server = ShmSegment::create(&unique("full"), MIN_CAPACITY).unwrap();
    let mut client = ShmSegment::attach(server.name(), &server.nonce()).unwrap();
    let n = server.max_payload();
    assert_eq!(n + SHM_HEADER_LEN, MIN_CAPACITY);
    let big = vec![7u8; n];
    client.send_request(MsgType::Act, Flags::NONE, 1, &big[..]).unwrap();
    assert_eq!(snapshot(&server).len(), MIN_CAPACITY);
    server.begin_processing().unwrap();
    assert_eq!(server.read_message().unwrap().payload.len(), n);

    let over = vec![0u8; n + 1];
    let err = server.send_response(MsgType::ActAck, Flags::NONE, 1, &over[..]).unwrap_err();
    assert!(matches!(err, Error::FrameTooLarge { .. }));
    // a refused write leaves the state word alone
    assert_eq!(server.state(), ShmState::Processing);
}

#[test]
fn each_side_acts_only_when_it_owns_the_segment() {
    let mut server = ShmSegment::create(&unique("owner"), MIN_CAPACITY).unwrap();
    let mut client = ShmSegment::attach(server.name(), &server.nonce()).unwrap();

    // IDLE: only the client may write
    assert!(server.begin_processing().is_err());
    assert!(server.send_response(MsgType::PingAck, Flags::NONE, 1, &[][..]).is_err());
    assert!(client.finish_response().is_err());

    client.send_request(MsgType::Ping, Flags::NONE, 1, &b"a"[..]).unwrap();
    // REQUEST_READY: client must not overwrite, server must claim first
    let before = snapshot(&server);
    assert!(client.send_request(MsgType::Ping, Flags::NONE, 2, &b"b"[..]).is_err());
    assert!(server.send_response(MsgType::PingAck, Flags::NONE, 1, &b"x"[..]).is_err());
    assert_eq!(snapshot(&server), before, "refused writes must not touch the segment");

    server.begin_processing().unwrap();
    assert!(client.finish_response().is_err());
    assert!(server.begin_processing().is_err());
    server.send_response(MsgType::PingAck, Flags::NONE, 1, &b"a"[..]).unwrap();

    // RESPONSE_READY: server is done until the client hands it back
    assert!(server.send_response(MsgType::PingAck, Flags::NONE, 1, &b"a"[..]).is_err());
    assert!(client.send_request(MsgType::Ping, Flags::NONE, 2, &b"b"[..]).is_err());
    client.finish_response().unwrap();
    assert_eq!(server.state(), ShmState::Idle);
    client.send_request(MsgType::Ping, Flags::NONE, 2, &b"b"[..]).unwrap();
}

#[test]
fn close_from_either_side_wins() {
    let server = ShmSegment::create(&unique("close"), MIN_CAPACITY).unwrap();
    let mut client = ShmSegment::attach(server.name(), &server.nonce()).unwrap();
    client.send_request(MsgType::Ping, Flags::NONE, 1, &[][..]).unwrap();
    server.close();
    assert_eq!(client.state(), ShmState::Closed);
    assert!(matches!(server.begin_processing(), Err(Error::ChannelClosed)));
    assert!(matches!(client.finish_response(), Err(Error::ChannelClosed)));
    let raw = snapshot(&server);
    assert_eq!(u32::from_le_bytes(raw[OFF_STATE..OFF_STATE + 4].try_into().unwrap()), 4);
}
