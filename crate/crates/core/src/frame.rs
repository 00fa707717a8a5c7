//! The wire envelope.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "VLAG"
//!      4     1  version (1)
//!      5     1  msg_type
//!      6     2  flags (LE)
//!      8     8  request_id (LE)
//!     16     4  payload_len (LE)
//!     20     n  payload (one encoded Value, or empty)
//!   20+n     4  CRC-32/ISO-HDLC of the payload (LE)
//! ```

use std::fmt;

use bytes::BufMut;

use crate::error::{Error, Result};
use crate::value::{encoded_len, write_value, Value};

pub const MAGIC: [u8; 4] = *b"VLAG";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const TRAILER_LEN: usize = 4;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    HelloAck = 0x02,
    Initialize = 0x03,
    InitializeAck = 0x04,
    Reset = 0x05,
    ResetAck = 0x06,
    Act = 0x07,
    ActAck = 0x08,
    Close = 0x09,
    Error = 0x0A,
    Ping = 0x0B,
    PingAck = 0x0C,
}

impl MsgType {
    pub const ALL: [MsgType; 12] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::Initialize,
        MsgType::InitializeAck,
        MsgType::Reset,
        MsgType::ResetAck,
        MsgType::Act,
        MsgType::ActAck,
        MsgType::Close,
        MsgType::Error,
        MsgType::Ping,
        MsgType::PingAck,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b.wrapping_sub(1) as usize).copied()
    }

    /// The acknowledgement type for a request type.
    pub fn ack(self) -> Option<MsgType> {
        Some(match self {
            MsgType::Hello => MsgType::HelloAck,
            MsgType::Initialize => MsgType::InitializeAck,
            MsgType::Reset => MsgType::ResetAck,
            MsgType::Act => MsgType::ActAck,
            MsgType::Ping => MsgType::PingAck,
            _ => return None,
        })
    }
}

/// Frame flag bits. Bits 2..=15 are reserved and must be zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(u16);

impl Flags {
    pub const NONE: Flags = Flags(0);
    pub const BATCHED: Flags = Flags(1 << 0);
    pub const COMPRESSED_IMAGES: Flags = Flags(1 << 1);
    const KNOWN: u16 = 0b11;

    pub fn from_bits(bits: u16) -> Option<Flags> {
        (bits & !Self::KNOWN == 0).then_some(Flags(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn with(self, other: Flags, on: bool) -> Flags {
        if on {
            Flags(self.0 | other.0)
        } else {
            Flags(self.0 & !other.0)
        }
    }

    pub fn batched(self) -> bool {
        self.contains(Flags::BATCHED)
    }
}

impl std::ops::BitOr for Flags {
    type Output = Flags;
    fn bitor(self, rhs: Flags) -> Flags {
        Flags(self.0 | rhs.0)
    }
}

impl fmt::Debug for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Flags({:#06x})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub flags: Flags,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, request_id: u64, payload: Vec<u8>) -> Self {
        Frame {
            msg_type,
            flags: Flags::NONE,
            request_id,
            payload,
        }
    }

    pub fn with_flags(mut self, flags: Flags) -> Self {
        self.flags = flags;
        self
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }

    pub fn as_ref(&self) -> FrameRef<'_> {
        FrameRef {
            msg_type: self.msg_type,
            flags: self.flags,
            request_id: self.request_id,
            payload: &self.payload,
        }
    }
}

/// A frame whose payload is borrowed, e.g. straight out of a shared segment.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub msg_type: MsgType,
    pub flags: Flags,
    pub request_id: u64,
    pub payload: &'a [u8],
}

impl FrameRef<'_> {
    pub fn to_owned(&self) -> Frame {
        Frame {
            msg_type: self.msg_type,
            flags: self.flags,
            request_id: self.request_id,
            payload: self.payload.to_vec(),
        }
    }
}

/// Fixed header fields, validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub flags: Flags,
    pub request_id: u64,
    pub payload_len: u32,
}

pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

fn put_header<B: BufMut>(buf: &mut B, msg_type: MsgType, flags: Flags, request_id: u64, len: u32) {
    buf.put_slice(&MAGIC);
    buf.put_u8(VERSION);
    buf.put_u8(msg_type as u8);
    buf.put_u16_le(flags.bits());
    buf.put_u64_le(request_id);
    buf.put_u32_le(len);
}

fn check_size(payload_len: usize, max: usize) -> Result<u32> {
    if payload_len > max {
        return Err(Error::FrameTooLarge { len: payload_len, max });
    }
    u32::try_from(payload_len).map_err(|_| Error::FrameTooLarge {
        len: payload_len,
        max: u32::MAX as usize,
    })
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>> {
    encode_frame_with_limit(f, DEFAULT_MAX_FRAME)
}

pub fn encode_frame_with_limit(f: &Frame, max: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_frame(&mut out, f.as_ref(), max)?;
    Ok(out)
}

/// Appends a complete frame to `out`.
pub fn write_frame(out: &mut Vec<u8>, f: FrameRef<'_>, max: usize) -> Result<()> {
    let len = check_size(f.payload.len(), max)?;
    out.reserve(HEADER_LEN + f.payload.len() + TRAILER_LEN);
    put_header(out, f.msg_type, f.flags, f.request_id, len);
    out.put_slice(f.payload);
    out.put_u32_le(crc32(f.payload));
    Ok(())
}

/// Appends a frame whose payload is `v`, encoding the value in place.
pub fn write_value_frame(
    out: &mut Vec<u8>,
    msg_type: MsgType,
    flags: Flags,
    request_id: u64,
    v: &Value,
    max: usize,
) -> Result<()> {
    let len = check_size(encoded_len(v)?, max)?;
    let start = out.len();
    out.reserve(HEADER_LEN + len as usize + TRAILER_LEN);
    put_header(out, msg_type, flags, request_id, len);
    write_value(out, v)?;
    let crc = crc32(&out[start + HEADER_LEN..]);
    out.put_u32_le(crc);
    Ok(())
}

pub fn parse_header(b: &[u8; HEADER_LEN], max: usize) -> Result<Header> {
    if b[0..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &b[0..4])));
    }
    if b[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported frame version {}", b[4])));
    }
    let msg_type = MsgType::from_u8(b[5])
        .ok_or_else(|| Error::Protocol(format!("unknown message type {:#04x}", b[5])))?;
    let bits = u16::from_le_bytes([b[6], b[7]]);
    let flags = Flags::from_bits(bits)
        .ok_or_else(|| Error::Protocol(format!("reserved flag bits set: {bits:#06x}")))?;
    let request_id = u64::from_le_bytes(b[8..16].try_into().unwrap());
    let payload_len = u32::from_le_bytes(b[16..20].try_into().unwrap());
    if payload_len as usize > max {
        return Err(Error::FrameTooLarge {
            len: payload_len as usize,
            max,
        });
    }
    Ok(Header {
        msg_type,
        flags,
        request_id,
        payload_len,
    })
}

pub fn verify_checksum(payload: &[u8], trailer: [u8; 4]) -> Result<()> {
    let expected = u32::from_le_bytes(trailer);
    let actual = crc32(payload);
    if expected != actual {
        return Err(Error::Integrity { expected, actual });
    }
    Ok(())
}

pub fn decode_frame(b: &[u8]) -> Result<Frame> {
    decode_frame_with_limit(b, DEFAULT_MAX_FRAME)
}

/// Decodes exactly one frame occupying all of `b`.
pub fn decode_frame_with_limit(b: &[u8], max: usize) -> Result<Frame> {
    let head: &[u8; HEADER_LEN] = b
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::decoding(b.len(), "truncated frame header"))?;
    let h = parse_header(head, max)?;
    let total = HEADER_LEN + h.payload_len as usize + TRAILER_LEN;
    if b.len() < total {
        return Err(Error::decoding(b.len(), format!("truncated frame: need {total} octets")));
    }
    if b.len() > total {
        return Err(Error::decoding(total, "trailing octets after frame"));
    }
    let payload = &b[HEADER_LEN..total - TRAILER_LEN];
    verify_checksum(payload, b[total - TRAILER_LEN..].try_into().unwrap())?;
    Ok(Frame {
        msg_type: h.msg_type,
        flags: h.flags,
        request_id: h.request_id,
        payload: payload.to_vec(),
    })
}
