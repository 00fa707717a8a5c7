#![allow(dead_code)]

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use polserve::frame::{Flags, Frame, MsgType};
use polserve::obs::{Act, Gripper, Obs};
use polserve::value::{ArrayData, Codec, EncodedImage, Map, NdArray, Value};

/// Bitwise CRC-32/ISO-HDLC (reflected 0xEDB88320, init and xorout all ones).
pub fn crc32_reference(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

pub fn arb_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        Just(f64::NAN),
        Just(-0.0),
        Just(f64::INFINITY),
        -1e6..1e6f64,
    ]
}

pub fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
    vec(0usize..4, 1..4)
}

pub fn arb_array() -> impl Strategy<Value = NdArray> {
    (arb_shape(), 0u8..4).prop_flat_map(|(shape, kind)| {
        let n: usize = shape.iter().product();
        let data = match kind {
            0 => vec(any::<u8>(), n).prop_map(ArrayData::U8).boxed(),
            1 => vec(any::<i64>(), n).prop_map(ArrayData::I64).boxed(),
            2 => vec(any::<f32>(), n).prop_map(ArrayData::F32).boxed(),
            _ => vec(arb_f64(), n).prop_map(ArrayData::F64).boxed(),
        };
        data.prop_map(move |d| NdArray::new(shape.clone(), d).unwrap())
    })
}

pub fn arb_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        arb_f64().prop_map(Value::Real),
        ".{0,12}".prop_map(Value::Str),
        vec(any::<u8>(), 0..24).prop_map(Value::Bytes),
        arb_array().prop_map(Value::Array),
        (prop_oneof![Just(Codec::Jpeg), Just(Codec::Png)], vec(any::<u8>(), 0..16))
            .prop_map(|(codec, data)| Value::Image(EncodedImage { codec, data })),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            vec(inner.clone(), 0..6).prop_map(Value::List),
            btree_map(".{0,8}", inner, 0..6).prop_map(Value::Map),
        ]
    })
}

pub fn arb_map() -> impl Strategy<Value = Map> {
    btree_map("[a-z_]{1,8}", arb_value(), 0..4)
}

fn arb_image(lead: Option<usize>) -> impl Strategy<Value = NdArray> {
    (1usize..6, 1usize..6).prop_flat_map(move |(h, w)| {
        let mut shape = vec![h, w, 3];
        if let Some(b) = lead {
            shape.insert(0, b);
        }
        let n: usize = shape.iter().product();
        vec(any::<u8>(), n).prop_map(move |d| NdArray::from_u8(shape.clone(), d).unwrap())
    })
}

pub fn arb_obs() -> impl Strategy<Value = Obs> {
    prop_oneof![
        (
            btree_map("[a-z]{1,6}", arb_image(None), 0..3),
            proptest::option::of(arb_f64()),
            arb_map()
        )
            .prop_map(|(cameras, g, info)| Obs {
                cameras,
                gripper: g.map(Gripper::Single),
                info,
                batch: None,
            }),
        (1usize..4).prop_flat_map(|b| {
            (
                btree_map("[a-z]{1,6}", arb_image(Some(b)), 0..3),
                vec(arb_f64(), b),
                arb_map(),
            )
                .prop_map(move |(cameras, g, info)| Obs {
                    cameras,
                    gripper: Some(Gripper::Batched(g)),
                    info,
                    batch: Some(b),
                })
        }),
    ]
}

pub fn arb_act() -> impl Strategy<Value = Act> {
    (vec(1usize..8, 1..3), any::<bool>(), any::<bool>(), arb_map()).prop_flat_map(|(shape, f32s, done, info)| {
        let n: usize = shape.iter().product();
        let data = if f32s {
            vec(any::<f32>(), n).prop_map(ArrayData::F32).boxed()
        } else {
            vec(arb_f64(), n).prop_map(ArrayData::F64).boxed()
        };
        data.prop_map(move |d| Act {
            action: NdArray::new(shape.clone(), d).unwrap(),
            done,
            info: info.clone(),
        })
    })
}

pub fn arb_frame() -> impl Strategy<Value = Frame> {
    (
        proptest::sample::select(MsgType::ALL.to_vec()),
        0u16..4,
        any::<u64>(),
        vec(any::<u8>(), 0..256),
    )
        .prop_map(|(t, bits, id, payload)| Frame::new(t, id, payload).with_flags(Flags::from_bits(bits).unwrap()))
}

/// A frame with a non-empty payload, for corruption trials.
pub fn arb_payload_frame() -> impl Strategy<Value = Frame> {
    (arb_frame(), vec(any::<u8>(), 1..512)).prop_map(|(f, p)| Frame { payload: p, ..f })
}
