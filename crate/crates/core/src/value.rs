//! Self-describing tagged values and their canonical binary encoding.
//!
//! Every payload on the wire is exactly one encoded [`Value`]. The encoding
//! is little-endian, length-prefixed and canonical: maps are written in
//! ascending key-octet order, so equal values always produce equal octets.
//!
//! | tag  | kind   | body                                                   |
//! |------|--------|--------------------------------------------------------|
//! | 0x00 | null   | (none)                                                 |
//! | 0x01 | bool   | 1 octet, 0 or 1                                        |
//! | 0x02 | int    | i64 LE                                                 |
//! | 0x03 | real   | f64 LE                                                 |
//! | 0x04 | string | u32 LE length, UTF-8                                   |
//! | 0x05 | bytes  | u32 LE length, octets                                  |
//! | 0x06 | list   | u32 LE count, items                                    |
//! | 0x07 | map    | u32 LE count, per entry: u32 LE key len, key, value    |
//! | 0x08 | array  | u8 kind, u8 ndim, ndim x u32 LE dims, row-major LE data|
//! | 0x09 | image  | u8 codec, u32 LE length, octets                        |

use std::collections::BTreeMap;

use bytes::BufMut;

use crate::error::{Error, Result};

pub type Map = BTreeMap<String, Value>;

pub const MAX_DIMS: usize = 8;
/// Nesting limit applied while decoding untrusted input.
pub const MAX_DEPTH: usize = 64;

mod tag {
    pub const NULL: u8 = 0x00;
    pub const BOOL: u8 = 0x01;
    pub const INT: u8 = 0x02;
    pub const REAL: u8 = 0x03;
    pub const STRING: u8 = 0x04;
    pub const BYTES: u8 = 0x05;
    pub const LIST: u8 = 0x06;
    pub const MAP: u8 = 0x07;
    pub const ARRAY: u8 = 0x08;
    pub const IMAGE: u8 = 0x09;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ElementKind {
    U8 = 0,
    I64 = 1,
    F32 = 2,
    F64 = 3,
}

impl ElementKind {
    pub fn size(self) -> usize {
        match self {
            ElementKind::U8 => 1,
            ElementKind::F32 => 4,
            ElementKind::I64 | ElementKind::F64 => 8,
        }
    }

    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => ElementKind::U8,
            1 => ElementKind::I64,
            2 => ElementKind::F32,
            3 => ElementKind::F64,
            _ => return None,
        })
    }
}

/// Row-major element storage of an [`NdArray`].
#[derive(Debug, Clone)]
pub enum ArrayData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn kind(&self) -> ElementKind {
        match self {
            ArrayData::U8(_) => ElementKind::U8,
            ArrayData::I64(_) => ElementKind::I64,
            ArrayData::F32(_) => ElementKind::F32,
            ArrayData::F64(_) => ElementKind::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Floats compare by bit pattern so that NaN payloads round-trip as equal.
impl PartialEq for ArrayData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ArrayData::U8(a), ArrayData::U8(b)) => a == b,
            (ArrayData::I64(a), ArrayData::I64(b)) => a == b,
            (ArrayData::F32(a), ArrayData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (ArrayData::F64(a), ArrayData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// A dense numeric array with an explicit shape.
///
/// The element count always equals the product of the shape; the shape has
/// at least one dimension. Arrays with more than [`MAX_DIMS`] dimensions can
/// exist in memory but are rejected by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: ArrayData,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Encoding("array shape needs at least one dimension".into()));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Encoding(format!("array shape {shape:?} overflows")))?;
        if count != data.len() {
            return Err(Error::Encoding(format!(
                "array shape {shape:?} needs {count} elements, got {}",
                data.len()
            )));
        }
        Ok(NdArray { shape, data })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, ArrayData::U8(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, ArrayData::F64(data))
    }

    /// A 1-D f64 vector.
    pub fn vector(data: Vec<f64>) -> Self {
        NdArray {
            shape: vec![data.len()],
            data: ArrayData::F64(data),
        }
    }

    pub fn zeros_f64(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f64(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    pub fn kind(&self) -> ElementKind {
        self.data.kind()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, ArrayData) {
        (self.shape, self.data)
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Elements widened to f64, in row-major order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    /// Octets occupied by the raw element data.
    pub fn byte_len(&self) -> usize {
        self.len() * self.kind().size()
    }

    /// True for a u8 `H x W x 3` raster with `H, W >= 1`.
    pub fn is_rgb_image(&self) -> bool {
        self.kind() == ElementKind::U8
            && self.shape.len() == 3
            && self.shape[2] == 3
            && self.shape[0] >= 1
            && self.shape[1] >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Codec {
    Jpeg = 0,
    Png = 1,
}

/// A compressed raster; decodes to a u8 `H x W x 3` array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub codec: Codec,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(Map),
    Array(NdArray),
    Image(EncodedImage),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Null, Null) => true,
            (Bool(a), Bool(b)) => a == b,
            (Int(a), Int(b)) => a == b,
            (Real(a), Real(b)) => a.to_bits() == b.to_bits(),
            (Str(a), Str(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (List(a), List(b)) => a == b,
            (Map(a), Map(b)) => a == b,
            (Array(a), Array(b)) => a == b,
            (Image(a), Image(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Real(_) => "real",
            Value::Str(_) => "string",
            Value::Bytes(_) => "bytes",
            Value::List(_) => "list",
            Value::Map(_) => "map",
            Value::Array(_) => "array",
            Value::Image(_) => "image",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Map> for Value {
    fn from(v: Map) -> Self {
        Value::Map(v)
    }
}

impl From<NdArray> for Value {
    fn from(v: NdArray) -> Self {
        Value::Array(v)
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Encoding(format!("{what} length {n} exceeds u32")))
}

fn check_array(a: &NdArray) -> Result<()> {
    if a.shape.len() > MAX_DIMS {
        return Err(Error::Encoding(format!(
            "array has {} dimensions, at most {MAX_DIMS} are representable",
            a.shape.len()
        )));
    }
    for &d in &a.shape {
        len_u32(d, "array dimension")?;
    }
    Ok(())
}

/// Octets [`write_value`] will produce for `v`. Also validates `v`.
pub fn encoded_len(v: &Value) -> Result<usize> {
    Ok(match v {
        Value::Null => 1,
        Value::Bool(_) => 2,
        Value::Int(_) | Value::Real(_) => 9,
        Value::Str(s) => 5 + len_u32(s.len(), "string")? as usize,
        Value::Bytes(b) => 5 + len_u32(b.len(), "bytes")? as usize,
        Value::List(items) => {
            len_u32(items.len(), "list")?;
            let mut n = 5;
            for item in items {
                n += encoded_len(item)?;
            }
            n
        }
        Value::Map(m) => {
            len_u32(m.len(), "map")?;
            let mut n = 5;
            for (k, item) in m {
                n += 4 + len_u32(k.len(), "map key")? as usize + encoded_len(item)?;
            }
            n
        }
        Value::Array(a) => array_encoded_len(a)?,
        Value::Image(img) => 6 + len_u32(img.data.len(), "image")? as usize,
    })
}

pub(crate) fn array_encoded_len(a: &NdArray) -> Result<usize> {
    check_array(a)?;
    Ok(3 + 4 * a.shape.len() + a.byte_len())
}

/// Appends the canonical encoding of `v` to `buf`.
///
/// When `buf` is a fixed slice it must have room for [`encoded_len`] octets.
pub fn write_value<B: BufMut>(buf: &mut B, v: &Value) -> Result<()> {
    match v {
        Value::Null => buf.put_u8(tag::NULL),
        Value::Bool(b) => {
            buf.put_u8(tag::BOOL);
            buf.put_u8(*b as u8);
        }
        Value::Int(i) => {
            buf.put_u8(tag::INT);
            buf.put_i64_le(*i);
        }
        Value::Real(r) => {
            buf.put_u8(tag::REAL);
            buf.put_f64_le(*r);
        }
        Value::Str(s) => {
            buf.put_u8(tag::STRING);
            buf.put_u32_le(len_u32(s.len(), "string")?);
            buf.put_slice(s.as_bytes());
        }
        Value::Bytes(b) => {
            buf.put_u8(tag::BYTES);
            buf.put_u32_le(len_u32(b.len(), "bytes")?);
            buf.put_slice(b);
        }
        Value::List(items) => {
            buf.put_u8(tag::LIST);
            buf.put_u32_le(len_u32(items.len(), "list")?);
            for item in items {
                write_value(buf, item)?;
            }
        }
        Value::Map(m) => {
            write_map_header(buf, m.len())?;
            for (k, item) in m {
                write_map_key(buf, k)?;
                write_value(buf, item)?;
            }
        }
        Value::Array(a) => write_array(buf, a)?,
        Value::Image(img) => write_image(buf, img.codec, &img.data)?,
    }
    Ok(())
}

pub(crate) fn write_map_header<B: BufMut>(buf: &mut B, count: usize) -> Result<()> {
    buf.put_u8(tag::MAP);
    buf.put_u32_le(len_u32(count, "map")?);
    Ok(())
}

pub(crate) fn write_map_key<B: BufMut>(buf: &mut B, key: &str) -> Result<()> {
    buf.put_u32_le(len_u32(key.len(), "map key")?);
    buf.put_slice(key.as_bytes());
    Ok(())
}

pub(crate) fn write_image<B: BufMut>(buf: &mut B, codec: Codec, data: &[u8]) -> Result<()> {
    buf.put_u8(tag::IMAGE);
    buf.put_u8(codec as u8);
    buf.put_u32_le(len_u32(data.len(), "image")?);
    buf.put_slice(data);
    Ok(())
}

pub(crate) fn write_array<B: BufMut>(buf: &mut B, a: &NdArray) -> Result<()> {
    check_array(a)?;
    buf.put_u8(tag::ARRAY);
    buf.put_u8(a.kind() as u8);
    buf.put_u8(a.shape.len() as u8);
    for &d in &a.shape {
        buf.put_u32_le(d as u32);
    }
    match &a.data {
        ArrayData::U8(v) => buf.put_slice(v),
        ArrayData::I64(v) => v.iter().for_each(|&x| buf.put_i64_le(x)),
        ArrayData::F32(v) => v.iter().for_each(|&x| buf.put_f32_le(x)),
        ArrayData::F64(v) => v.iter().for_each(|&x| buf.put_f64_le(x)),
    }
    Ok(())
}

pub fn encode_value(v: &Value) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(v)?);
    write_value(&mut out, v)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::decoding(
                self.pos,
                format!("truncated {what}: need {n} octets, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn array8(&mut self, what: &str) -> Result<[u8; 8]> {
        Ok(self.take(8, what)?.try_into().unwrap())
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|e| Error::decoding(start + e.valid_up_to(), format!("invalid UTF-8 in {what}")))
    }

    fn value(&mut self, depth: usize) -> Result<Value> {
        if depth > MAX_DEPTH {
            return Err(Error::decoding(self.pos, "nesting too deep"));
        }
        let at = self.pos;
        let t = self.u8("tag")?;
        Ok(match t {
            tag::NULL => Value::Null,
            tag::BOOL => match self.u8("bool")? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(Error::decoding(at + 1, format!("bool octet must be 0 or 1, got {b}"))),
            },
            tag::INT => Value::Int(i64::from_le_bytes(self.array8("int")?)),
            tag::REAL => Value::Real(f64::from_le_bytes(self.array8("real")?)),
            tag::STRING => {
                let n = self.u32("string length")? as usize;
                Value::Str(self.string(n, "string")?)
            }
            tag::BYTES => {
                let n = self.u32("bytes length")? as usize;
                Value::Bytes(self.take(n, "bytes")?.to_vec())
            }
            tag::LIST => {
                let n = self.u32("list count")? as usize;
                if n > self.remaining() {
                    return Err(Error::decoding(self.pos, format!("list count {n} exceeds input")));
                }
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Value::List(items)
            }
            tag::MAP => {
                let n = self.u32("map count")? as usize;
                if n.saturating_mul(5) > self.remaining() {
                    return Err(Error::decoding(self.pos, format!("map count {n} exceeds input")));
                }
                let mut m = Map::new();
                for _ in 0..n {
                    let key_at = self.pos;
                    let klen = self.u32("map key length")? as usize;
                    let key = self.string(klen, "map key")?;
                    match m.last_key_value() {
                        Some((last, _)) if *last == key => return Err(Error::decoding(key_at, "duplicate map key")),
                        Some((last, _)) if *last > key => {
                            return Err(Error::decoding(key_at, "map keys out of canonical order"))
                        }
                        _ => {}
                    }
                    let item = self.value(depth + 1)?;
                    m.insert(key, item);
                }
                Value::Map(m)
            }
            tag::ARRAY => Value::Array(self.array()?),
            tag::IMAGE => {
                let codec = match self.u8("image codec")? {
                    0 => Codec::Jpeg,
                    1 => Codec::Png,
                    c => return Err(Error::decoding(at + 1, format!("unknown image codec {c}"))),
                };
                let n = self.u32("image length")? as usize;
                Value::Image(EncodedImage {
                    codec,
                    data: self.take(n, "image")?.to_vec(),
                })
            }
            other => return Err(Error::decoding(at, format!("unknown tag {other:#04x}"))),
        })
    }

    fn array(&mut self) -> Result<NdArray> {
        let at = self.pos;
        let kind = self.u8("array kind")?;
        let kind = ElementKind::from_u8(kind)
            .ok_or_else(|| Error::decoding(at, format!("unknown element kind {kind}")))?;
        let ndim = self.u8("array ndim")? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::decoding(at + 1, format!("array ndim {ndim} outside 1..={MAX_DIMS}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("array dim")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = count.and_then(|c| c.checked_mul(kind.size()));
        let nbytes = match nbytes {
            Some(n) if n <= self.remaining() => n,
            _ => {
                return Err(Error::decoding(
                    self.pos,
                    format!("array of shape {shape:?} exceeds remaining {} octets", self.remaining()),
                ))
            }
        };
        let raw = self.take(nbytes, "array data")?;
        let data = match kind {
            ElementKind::U8 => ArrayData::U8(raw.to_vec()),
            ElementKind::I64 => ArrayData::I64(
                raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ElementKind::F32 => ArrayData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ElementKind::F64 => ArrayData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(NdArray { shape, data })
    }
}

/// Decodes one value from the front of `b`, returning it with the number of
/// octets consumed.
pub fn decode_value(b: &[u8]) -> Result<(Value, usize)> {
    let mut r = Reader { buf: b, pos: 0 };
    let v = r.value(0)?;
    Ok((v, r.pos))
}

/// Decodes a payload that must contain exactly one value.
pub fn decode_value_exact(b: &[u8]) -> Result<Value> {
    let (v, n) = decode_value(b)?;
    if n != b.len() {
        return Err(Error::decoding(n, format!("{} trailing octets after value", b.len() - n)));
    }
    Ok(v)
}
