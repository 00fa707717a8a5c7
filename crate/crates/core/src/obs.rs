//! Observation and action records and their mapping onto [`Value`]s.
//!
//! An [`Obs`] travels as `{"cameras": map, "gripper": real|null|array,
//! "info": map}` and an [`Act`] as `{"action": array, "done": bool,
//! "info": map}`. Whether an observation carries a leading batch dimension
//! is signalled by the frame's `BATCHED` flag, never inferred from rank.

use std::collections::BTreeMap;

use bytes::BufMut;

use crate::error::{Error, Result};
use crate::frame::Flags;
use crate::image::{compress_image, decompress_image, CompressionPolicy};
use crate::value::{
    array_encoded_len, encoded_len, write_array, write_image, write_map_header, write_map_key,
    write_value, ArrayData, Codec, ElementKind, EncodedImage, Map, NdArray, Value,
};

const CAMERAS: &str = "cameras";
const GRIPPER: &str = "gripper";
const INFO: &str = "info";
const ACTION: &str = "action";
const DONE: &str = "done";

fn schema(reason: impl Into<String>) -> Error {
    Error::decoding(0, reason)
}

#[derive(Debug, Clone)]
pub enum Gripper {
    Single(f64),
    /// One width per batch element.
    Batched(Vec<f64>),
}

// Bitwise, like Value, so NaN widths round-trip as equal.
impl PartialEq for Gripper {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Gripper::Single(a), Gripper::Single(b)) => a.to_bits() == b.to_bits(),
            (Gripper::Batched(a), Gripper::Batched(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Gripper {
    fn to_value(&self) -> Value {
        match self {
            Gripper::Single(g) => Value::Real(*g),
            Gripper::Batched(g) => Value::Array(NdArray::vector(g.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Obs {
    /// Camera name to u8 `H x W x 3` raster (`B x H x W x 3` when batched).
    pub cameras: BTreeMap<String, NdArray>,
    pub gripper: Option<Gripper>,
    pub info: Map,
    /// Batch size, or `None` for a single observation.
    pub batch: Option<usize>,
}

impl Obs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_camera(mut self, name: impl Into<String>, img: NdArray) -> Self {
        self.cameras.insert(name.into(), img);
        self
    }

    pub fn with_gripper(mut self, g: f64) -> Self {
        self.gripper = Some(Gripper::Single(g));
        self
    }

    pub fn is_batched(&self) -> bool {
        self.batch.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Encoding(msg));
        match self.batch {
            None => {
                for (name, img) in &self.cameras {
                    if !img.is_rgb_image() {
                        return bad(format!("camera {name:?}: expected u8 HxWx3, got {:?} {:?}", img.kind(), img.shape()));
                    }
                }
                if let Some(Gripper::Batched(_)) = self.gripper {
                    return bad("batched gripper on an unbatched observation".into());
                }
            }
            Some(b) => {
                if b == 0 {
                    return bad("batch size must be at least 1".into());
                }
                for (name, img) in &self.cameras {
                    let s = img.shape();
                    let ok = img.kind() == ElementKind::U8
                        && s.len() == 4
                        && s[0] == b
                        && s[1] >= 1
                        && s[2] >= 1
                        && s[3] == 3;
                    if !ok {
                        return bad(format!("camera {name:?}: expected u8 {b}xHxWx3, got {:?} {s:?}", img.kind()));
                    }
                }
                match &self.gripper {
                    Some(Gripper::Single(_)) => return bad("scalar gripper on a batched observation".into()),
                    Some(Gripper::Batched(g)) if g.len() != b => {
                        return bad(format!("gripper has {} entries for batch {b}", g.len()))
                    }
                    _ => {}
                }
                if self.cameras.is_empty() && self.gripper.is_none() {
                    return bad("a batched observation needs a camera or gripper to carry its batch size".into());
                }
            }
        }
        Ok(())
    }

    /// Raw octets of all camera rasters.
    pub fn raw_camera_bytes(&self) -> usize {
        self.cameras.values().map(NdArray::byte_len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    /// f32 or f64, shape `D` (or `B x D` when batched).
    pub action: NdArray,
    pub done: bool,
    pub info: Map,
}

impl Act {
    pub fn new(action: NdArray) -> Self {
        Act {
            action,
            done: false,
            info: Map::new(),
        }
    }

    pub fn validate(&self, batch: Option<usize>) -> Result<()> {
        if !matches!(self.action.kind(), ElementKind::F32 | ElementKind::F64) {
            return Err(Error::Encoding(format!("action must be f32 or f64, got {:?}", self.action.kind())));
        }
        let s = self.action.shape();
        let ok = match batch {
            None => s.len() == 1 && s[0] >= 1,
            Some(b) => s.len() == 2 && s[0] == b && s[1] >= 1,
        };
        if !ok {
            return Err(Error::Encoding(format!("action shape {s:?} invalid for batch {batch:?}")));
        }
        Ok(())
    }
}

/// Flags an `ACT` request carrying `o` should have under `p`.
pub fn obs_flags(o: &Obs, p: &CompressionPolicy) -> Flags {
    let compressed = o.batch.is_none() && o.cameras.values().any(|c| p.applies_to(c));
    Flags::NONE
        .with(Flags::BATCHED, o.is_batched())
        .with(Flags::COMPRESSED_IMAGES, compressed)
}

/// JPEG-encodes every camera the policy selects.
pub fn compress_cameras(o: &Obs, p: &CompressionPolicy) -> Result<BTreeMap<String, Vec<u8>>> {
    p.validate()?;
    let mut out = BTreeMap::new();
    for (name, img) in &o.cameras {
        if p.applies_to(img) {
            out.insert(name.clone(), compress_image(img, p.quality)?);
        }
    }
    Ok(out)
}

pub fn encode_obs(o: &Obs, p: &CompressionPolicy) -> Result<Value> {
    o.validate()?;
    let mut jpegs = compress_cameras(o, p)?;
    let cameras = o
        .cameras
        .iter()
        .map(|(name, img)| {
            let v = match jpegs.remove(name) {
                Some(data) => Value::Image(EncodedImage { codec: Codec::Jpeg, data }),
                None => Value::Array(img.clone()),
            };
            (name.clone(), v)
        })
        .collect();
    let mut m = Map::new();
    m.insert(CAMERAS.into(), Value::Map(cameras));
    m.insert(GRIPPER.into(), o.gripper.as_ref().map_or(Value::Null, Gripper::to_value));
    m.insert(INFO.into(), Value::Map(o.info.clone()));
    Ok(Value::Map(m))
}

/// Borrowing serializer for an observation.
///
/// Produces exactly the octets of `encode_value(&encode_obs(o, p))` without
/// first copying the camera rasters into a [`Value`]. Cameras present in
/// `jpegs` are written as JPEG images, the rest raw.
pub struct ObsWriter<'a> {
    obs: &'a Obs,
    jpegs: &'a BTreeMap<String, Vec<u8>>,
    gripper: Value,
}

impl<'a> ObsWriter<'a> {
    pub fn new(obs: &'a Obs, jpegs: &'a BTreeMap<String, Vec<u8>>) -> Result<Self> {
        obs.validate()?;
        Ok(ObsWriter {
            obs,
            jpegs,
            gripper: obs.gripper.as_ref().map_or(Value::Null, Gripper::to_value),
        })
    }

    pub fn encoded_len(&self) -> Result<usize> {
        // outer map header + three keys
        let mut n = 5 + 3 * 4 + CAMERAS.len() + GRIPPER.len() + INFO.len();
        n += 5;
        for (name, img) in &self.obs.cameras {
            n += 4 + name.len();
            n += match self.jpegs.get(name) {
                Some(j) => 6 + j.len(),
                None => array_encoded_len(img)?,
            };
        }
        n += encoded_len(&self.gripper)?;
        n += 5;
        for (k, v) in &self.obs.info {
            n += 4 + k.len() + encoded_len(v)?;
        }
        Ok(n)
    }

    pub fn write<B: BufMut>(&self, buf: &mut B) -> Result<()> {
        write_map_header(buf, 3)?;
        write_map_key(buf, CAMERAS)?;
        write_map_header(buf, self.obs.cameras.len())?;
        for (name, img) in &self.obs.cameras {
            write_map_key(buf, name)?;
            match self.jpegs.get(name) {
                Some(j) => write_image(buf, Codec::Jpeg, j)?,
                None => write_array(buf, img)?,
            }
        }
        write_map_key(buf, GRIPPER)?;
        write_value(buf, &self.gripper)?;
        write_map_key(buf, INFO)?;
        write_map_header(buf, self.obs.info.len())?;
        for (k, v) in &self.obs.info {
            write_map_key(buf, k)?;
            write_value(buf, v)?;
        }
        Ok(())
    }
}

fn into_map(v: Value, what: &str) -> Result<Map> {
    match v {
        Value::Map(m) => Ok(m),
        other => Err(schema(format!("{what}: expected map, got {}", other.kind_name()))),
    }
}

/// Inverse of [`encode_obs`]; compressed cameras come back as u8 arrays.
pub fn decode_obs(v: Value, batched: bool) -> Result<Obs> {
    let mut m = into_map(v, "obs")?;
    let cameras = match m.remove(CAMERAS) {
        Some(c) => into_map(c, "obs.cameras")?,
        None => Map::new(),
    };
    let mut out = BTreeMap::new();
    for (name, cam) in cameras {
        let img = match cam {
            Value::Array(a) => a,
            Value::Image(img) => decompress_image(&img)?,
            other => return Err(schema(format!("camera {name:?}: unexpected {}", other.kind_name()))),
        };
        out.insert(name, img);
    }
    let gripper = match m.remove(GRIPPER) {
        None | Some(Value::Null) => None,
        Some(Value::Real(g)) => Some(Gripper::Single(g)),
        Some(Value::Array(a)) if a.shape().len() == 1 => Some(Gripper::Batched(a.to_f64_vec())),
        Some(other) => return Err(schema(format!("gripper: unexpected {}", other.kind_name()))),
    };
    let info = match m.remove(INFO) {
        Some(i) => into_map(i, "obs.info")?,
        None => Map::new(),
    };
    let batch = if batched {
        let from_cam = out.values().next().map(|c| c.shape()[0]);
        let from_grip = match &gripper {
            Some(Gripper::Batched(g)) => Some(g.len()),
            _ => None,
        };
        Some(from_cam.or(from_grip).ok_or_else(|| schema("batched observation without batch-carrying fields"))?)
    } else {
        None
    };
    let obs = Obs {
        cameras: out,
        gripper,
        info,
        batch,
    };
    obs.validate().map_err(|e| schema(e.to_string()))?;
    Ok(obs)
}

pub fn encode_act(a: &Act) -> Value {
    let mut m = Map::new();
    m.insert(ACTION.into(), Value::Array(a.action.clone()));
    m.insert(DONE.into(), Value::Bool(a.done));
    m.insert(INFO.into(), Value::Map(a.info.clone()));
    Value::Map(m)
}

pub fn decode_act(v: Value) -> Result<Act> {
    let mut m = into_map(v, "act")?;
    let action = match m.remove(ACTION) {
        Some(Value::Array(a)) => a,
        Some(other) => return Err(schema(format!("action: unexpected {}", other.kind_name()))),
        None => return Err(schema("act is missing \"action\"")),
    };
    if !matches!(action.data(), ArrayData::F32(_) | ArrayData::F64(_)) {
        return Err(schema("action must be f32 or f64"));
    }
    let done = match m.remove(DONE) {
        None => false,
        Some(Value::Bool(b)) => b,
        Some(other) => return Err(schema(format!("done: unexpected {}", other.kind_name()))),
    };
    let info = match m.remove(INFO) {
        Some(i) => into_map(i, "act.info")?,
        None => Map::new(),
    };
    Ok(Act { action, done, info })
}
