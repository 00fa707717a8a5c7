//! Synthetic camera images and a minimal binary PPM codec.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::value::NdArray;

/// Uniform white noise, `size x size x 3`, fully determined by `seed`.
pub fn noise_image(size: usize, seed: u64) -> NdArray {
    let mut data = vec![0u8; size * size * 3];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    NdArray::from_u8(vec![size, size, 3], data).expect("shape matches data")
}

/// Smooth diagonal gradient whose hue shifts with `frame`.
pub fn gradient_image(size: usize, frame: u64) -> NdArray {
    let mut data = Vec::with_capacity(size * size * 3);
    let denom = (2 * size.max(2) - 2) as f64;
    let shift = (frame % 256) as f64;
    for y in 0..size {
        for x in 0..size {
            let t = (x + y) as f64 / denom;
            let r = 255.0 * t;
            let g = 255.0 * (1.0 - t);
            let b = (128.0 + shift + 64.0 * (y as f64 / size as f64)) % 256.0;
            data.extend_from_slice(&[r.round() as u8, g.round() as u8, b as u8]);
        }
    }
    NdArray::from_u8(vec![size, size, 3], data).expect("shape matches data")
}

/// Writes an `H x W x 3` u8 array as binary PPM (P6).
pub fn write_ppm<W: Write>(mut w: W, img: &NdArray) -> Result<()> {
    let (h, wd) = match (img.shape(), img.as_u8()) {
        ([h, w, 3], Some(_)) => (*h, *w),
        _ => return Err(Error::Encoding("PPM needs a u8 H x W x 3 array".into())),
    };
    write!(w, "P6\n{wd} {h}\n255\n")?;
    w.write_all(img.as_u8().unwrap())?;
    Ok(())
}

fn ppm_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::decoding(start, "truncated PPM header"))
}

pub fn read_ppm<R: Read>(mut r: R) -> Result<NdArray> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    if ppm_token(&buf, &mut pos)? != "P6" {
        return Err(Error::decoding(0, "not a binary PPM"));
    }
    let num = |pos: &mut usize| -> Result<usize> {
        let at = *pos;
        ppm_token(&buf, pos)?
            .parse()
            .map_err(|_| Error::decoding(at, "bad PPM header number"))
    };
    let w = num(&mut pos)?;
    let h = num(&mut pos)?;
    if num(&mut pos)? != 255 {
        return Err(Error::decoding(pos, "only 8-bit PPM is supported"));
    }
    pos += 1;
    let need = w * h * 3;
    let data = buf
        .get(pos..pos + need)
        .ok_or_else(|| Error::decoding(pos, "truncated PPM raster"))?;
    NdArray::from_u8(vec![h, w, 3], data.to_vec())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<NdArray> {
    read_ppm(std::fs::File::open(path)?)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &NdArray) -> Result<()> {
    write_ppm(std::io::BufWriter::new(std::fs::File::create(path)?), img)
}
