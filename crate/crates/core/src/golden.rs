//! Golden conformance vectors: octet dumps of canonical values and frames.
//!
//! The checked-in file `conformance/golden_vectors.json` is generated from
//! [`build_vectors`]. Any implementation of the wire format should accept
//! every `accept` vector and re-encode it to the same octets, and reject
//! every `reject` vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{decode_frame, encode_frame, Flags, Frame, MsgType, VERSION};
use crate::image::CompressionPolicy;
use crate::obs::{encode_act, encode_obs, Act, Gripper, Obs};
use crate::transport::{error_payload, hello_payload, HelloAck, PROTO_VERSION};
use crate::value::{decode_value_exact, encode_value, ArrayData, Codec, EncodedImage, Map, NdArray, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    Value,
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub name: String,
    pub kind: VectorKind,
    pub expect: Expect,
    pub hex: String,
}

impl GoldenVector {
    pub fn octets(&self) -> Result<Vec<u8>> {
        hex::decode(&self.hex).map_err(|e| Error::Config(format!("vector {}: {e}", self.name)))
    }

    /// Decodes and re-encodes an `accept` vector, or confirms a `reject`
    /// vector fails to decode.
    pub fn check(&self) -> Result<()> {
        let octets = self.octets()?;
        let fail = |why: String| Err(Error::Config(format!("vector {}: {why}", self.name)));
        let again = match self.kind {
            VectorKind::Value => decode_value_exact(&octets).and_then(|v| encode_value(&v)),
            VectorKind::Frame => decode_frame(&octets).and_then(|f| encode_frame(&f)),
        };
        match (self.expect, again) {
            (Expect::Accept, Ok(b)) if b == octets => Ok(()),
            (Expect::Accept, Ok(_)) => fail("re-encoding differs".into()),
            (Expect::Accept, Err(e)) => fail(format!("rejected: {e}")),
            (Expect::Reject, Ok(_)) => fail("accepted".into()),
            (Expect::Reject, Err(_)) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFile {
    pub proto_version: u8,
    pub vectors: Vec<GoldenVector>,
}

impl GoldenFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

struct Builder(Vec<GoldenVector>);

impl Builder {
    fn push(&mut self, name: &str, kind: VectorKind, expect: Expect, octets: &[u8]) {
        self.0.push(GoldenVector {
            name: name.into(),
            kind,
            expect,
            hex: hex::encode(octets),
        });
    }

    fn value(&mut self, name: &str, v: Value) -> Result<()> {
        let b = encode_value(&v)?;
        self.push(name, VectorKind::Value, Expect::Accept, &b);
        Ok(())
    }

    fn frame(&mut self, name: &str, f: Frame) -> Result<Vec<u8>> {
        let b = encode_frame(&f)?;
        self.push(name, VectorKind::Frame, Expect::Accept, &b);
        Ok(b)
    }
}

fn map(entries: &[(&str, Value)]) -> Value {
    Value::Map(entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
}

fn small_obs() -> Result<Obs> {
    let px: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 14) as u8).collect();
    let mut o = Obs::new()
        .with_camera("wrist", NdArray::from_u8(vec![2, 3, 3], px)?)
        .with_gripper(0.25);
    o.info.insert("step".into(), Value::Int(3));
    Ok(o)
}

/// The full vector set, in a fixed order.
pub fn build_vectors() -> Result<GoldenFile> {
    let mut b = Builder(Vec::new());

    b.value("null", Value::Null)?;
    b.value("bool_true", Value::Bool(true))?;
    b.value("bool_false", Value::Bool(false))?;
    b.value("int_zero", Value::Int(0))?;
    b.value("int_minus_one", Value::Int(-1))?;
    b.value("int_min", Value::Int(i64::MIN))?;
    b.value("real_one_and_a_half", Value::Real(1.5))?;
    b.value("real_negative_zero", Value::Real(-0.0))?;
    b.value("real_nan_payload", Value::Real(f64::from_bits(0x7ff8_0000_0000_0001)))?;
    b.value("real_infinity", Value::Real(f64::INFINITY))?;
    b.value("string_empty", Value::Str(String::new()))?;
    b.value("string_utf8", Value::Str("pick up the red block \u{2192} bin".into()))?;
    b.value("bytes", Value::Bytes(vec![0x00, 0xff, 0x10, 0x80]))?;
    b.value("list_empty", Value::List(vec![]))?;
    b.value(
        "list_nested",
        Value::List(vec![Value::Int(1), Value::List(vec![Value::Null]), Value::Str("x".into())]),
    )?;
    b.value("map_empty", Value::Map(Map::new()))?;
    b.value(
        "map_sorted_keys",
        map(&[("b", Value::Int(2)), ("a", Value::Int(1)), ("ab", Value::Bool(true)), ("B", Value::Null)]),
    )?;
    b.value("array_u8_rgb", Value::Array(NdArray::from_u8(vec![1, 2, 3], vec![1, 2, 3, 4, 5, 6])?))?;
    b.value("array_f32_vector", Value::Array(NdArray::from_f32(vec![3], vec![0.5, -1.0, 2.0])?))?;
    b.value("array_f64_matrix", Value::Array(NdArray::from_f64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?))?;
    b.value(
        "array_i64",
        Value::Array(NdArray::new(vec![2], ArrayData::I64(vec![-7, 1 << 40]))?),
    )?;
    b.value("array_empty_dim", Value::Array(NdArray::from_f64(vec![0, 7], vec![])?))?;
    b.value(
        "image_jpeg_opaque",
        Value::Image(EncodedImage {
            codec: Codec::Jpeg,
            data: vec![0xff, 0xd8, 0xff, 0xd9],
        }),
    )?;
    b.value(
        "image_png_opaque",
        Value::Image(EncodedImage {
            codec: Codec::Png,
            data: vec![0x89, b'P', b'N', b'G'],
        }),
    )?;
    b.value("observation", encode_obs(&small_obs()?, &CompressionPolicy::disabled())?)?;
    let mut act = Act::new(NdArray::vector(vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 1.0]));
    act.done = true;
    act.info.insert("chunk".into(), Value::Int(0));
    b.value("action", encode_act(&act))?;

    // Rejected values: one defect each.
    b.push("reject_unknown_tag", VectorKind::Value, Expect::Reject, &[0x0a]);
    b.push("reject_bool_two", VectorKind::Value, Expect::Reject, &[0x01, 0x02]);
    b.push("reject_truncated_int", VectorKind::Value, Expect::Reject, &[0x02, 1, 0, 0]);
    b.push("reject_invalid_utf8", VectorKind::Value, Expect::Reject, &[0x04, 1, 0, 0, 0, 0xff]);
    b.push(
        "reject_unsorted_map",
        VectorKind::Value,
        Expect::Reject,
        &[0x07, 2, 0, 0, 0, 1, 0, 0, 0, b'b', 0x00, 1, 0, 0, 0, b'a', 0x00],
    );
    b.push(
        "reject_duplicate_key",
        VectorKind::Value,
        Expect::Reject,
        &[0x07, 2, 0, 0, 0, 1, 0, 0, 0, b'k', 0x00, 1, 0, 0, 0, b'k', 0x00],
    );
    b.push("reject_array_data_short", VectorKind::Value, Expect::Reject, &[0x08, 0, 1, 3, 0, 0, 0, 1, 2]);
    b.push("reject_unknown_codec", VectorKind::Value, Expect::Reject, &[0x09, 7, 0, 0, 0, 0]);
    b.push("reject_trailing_octet", VectorKind::Value, Expect::Reject, &[0x00, 0x00]);

    // One frame per message type, with the payloads a session would carry.
    let v = encode_value;
    b.frame("frame_hello", Frame::new(MsgType::Hello, 1, v(&hello_payload(PROTO_VERSION))?))?;
    let ack = HelloAck {
        shm_name: "polserve-00000000-0000-0000-0000-000000000000".into(),
        shm_capacity: 1 << 20,
        nonce: *b"0123456789abcdef",
        jpeg_quality: Some(90),
    };
    b.frame("frame_hello_ack", Frame::new(MsgType::HelloAck, 1, v(&ack.to_value())?))?;
    b.frame("frame_initialize", Frame::new(MsgType::Initialize, 2, v(&Value::Null)?))?;
    b.frame("frame_initialize_ack", Frame::new(MsgType::InitializeAck, 2, v(&Value::Null)?))?;
    let reset = map(&[
        ("obs", encode_obs(&small_obs()?, &CompressionPolicy::disabled())?),
        ("instruction", Value::Str("open the drawer".into())),
        ("kwargs", map(&[("seed", Value::Int(11))])),
    ]);
    b.frame("frame_reset", Frame::new(MsgType::Reset, 3, v(&reset)?))?;
    b.frame("frame_reset_ack", Frame::new(MsgType::ResetAck, 3, v(&Value::Map(Map::new()))?))?;
    let obs = v(&encode_obs(&small_obs()?, &CompressionPolicy::disabled())?)?;
    b.frame("frame_act", Frame::new(MsgType::Act, 4, obs))?;
    let act_frame = b.frame("frame_act_ack", Frame::new(MsgType::ActAck, 4, v(&encode_act(&act))?))?;
    let batched = Obs {
        batch: Some(2),
        gripper: Some(Gripper::Batched(vec![0.0, 1.0])),
        ..Obs::new()
    }
    .with_camera("cam0", NdArray::from_u8(vec![2, 1, 1, 3], vec![9, 8, 7, 6, 5, 4])?);
    b.frame(
        "frame_act_batched",
        Frame::new(MsgType::Act, 5, v(&encode_obs(&batched, &CompressionPolicy::disabled())?)?)
            .with_flags(Flags::BATCHED),
    )?;
    b.frame(
        "frame_act_compressed_flag",
        Frame::new(MsgType::Act, 6, v(&Value::Map(Map::new()))?).with_flags(Flags::COMPRESSED_IMAGES),
    )?;
    b.frame("frame_ping_empty", Frame::new(MsgType::Ping, 7, vec![]))?;
    b.frame("frame_ping_ack_echo", Frame::new(MsgType::PingAck, 7, b"echo".to_vec()))?;
    b.frame(
        "frame_error",
        Frame::new(MsgType::Error, 8, v(&error_payload("bad_phase", "ACT before RESET"))?),
    )?;
    b.frame("frame_close", Frame::new(MsgType::Close, u64::MAX, vec![]))?;

    // Rejected frames, each derived from a valid one.
    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut o = act_frame.clone();
        f(&mut o);
        o
    };
    let last = act_frame.len() - 1;
    b.push("reject_bad_magic", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[0] = b'X'));
    b.push("reject_bad_version", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[4] = 2));
    b.push("reject_unknown_type", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[5] = 0x0d));
    b.push("reject_reserved_flag", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[7] = 0x80));
    b.push("reject_bad_checksum", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[last] ^= 0x01));
    b.push("reject_payload_bit_flip", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[20] ^= 0x40));
    b.push("reject_length_too_long", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o[16] = o[16].wrapping_add(1)));
    b.push("reject_truncated", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o.truncate(o.len() - 1)));
    b.push("reject_frame_trailing_octet", VectorKind::Frame, Expect::Reject, &corrupt(&|o| o.push(0)));

    Ok(GoldenFile {
        proto_version: VERSION,
        vectors: b.0,
    })
}
