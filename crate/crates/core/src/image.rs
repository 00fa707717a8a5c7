//! Data-aware image compression for camera payloads.

use serde::{Deserialize, Serialize};
use zune_jpeg::zune_core::colorspace::ColorSpace;
use zune_jpeg::zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

use crate::error::{Error, Result};
use crate::value::{Codec, EncodedImage, NdArray};

pub const DEFAULT_JPEG_QUALITY: u8 = 90;
pub const DEFAULT_MIN_PIXELS: usize = 1024;

/// Which camera images get JPEG-encoded before they go on the wire.
///
/// Only u8 `H x W x 3` arrays with at least `min_pixels` pixels are eligible;
/// everything else travels raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub enabled: bool,
    pub quality: u8,
    pub min_pixels: usize,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        CompressionPolicy {
            enabled: true,
            quality: DEFAULT_JPEG_QUALITY,
            min_pixels: DEFAULT_MIN_PIXELS,
        }
    }
}

impl CompressionPolicy {
    pub fn disabled() -> Self {
        CompressionPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn jpeg(quality: u8) -> Result<Self> {
        let p = CompressionPolicy {
            quality,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!("JPEG quality {} outside 1..=100", self.quality)));
        }
        Ok(())
    }

    /// Whether `img` would be compressed under this policy.
    pub fn applies_to(&self, img: &NdArray) -> bool {
        self.enabled && img.is_rgb_image() && img.shape()[0] * img.shape()[1] >= self.min_pixels
    }
}

/// Baseline JPEG encoding of a u8 `H x W x 3` raster.
pub fn compress_image(img: &NdArray, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Encoding(format!("JPEG quality {quality} outside 1..=100")));
    }
    let pixels = match img.as_u8() {
        Some(p) if img.is_rgb_image() => p,
        _ => {
            return Err(Error::Encoding(format!(
                "only u8 HxWx3 images can be compressed, got {:?} {:?}",
                img.kind(),
                img.shape()
            )))
        }
    };
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (h16, w16) = match (u16::try_from(h), u16::try_from(w)) {
        (Ok(h), Ok(w)) => (h, w),
        _ => return Err(Error::Encoding(format!("{h}x{w} exceeds JPEG dimension limits"))),
    };
    let mut out = Vec::with_capacity(pixels.len() / 4);
    jpeg_encoder::Encoder::new(&mut out, quality)
        .encode(pixels, w16, h16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Encoding(format!("JPEG encoder: {e}")))?;
    Ok(out)
}

/// Decodes a compressed image back to a u8 `H x W x 3` array.
pub fn decompress_image(img: &EncodedImage) -> Result<NdArray> {
    match img.codec {
        Codec::Jpeg => decode_jpeg(&img.data),
        Codec::Png => decode_png(&img.data),
    }
}

fn decode_jpeg(data: &[u8]) -> Result<NdArray> {
    let opts = DecoderOptions::default().jpeg_set_out_colorspace(ColorSpace::RGB);
    let mut dec = JpegDecoder::new_with_options(data, opts);
    let pixels = dec
        .decode()
        .map_err(|e| Error::decoding(0, format!("corrupt JPEG stream: {e:?}")))?;
    let info = dec
        .info()
        .ok_or_else(|| Error::decoding(0, "JPEG stream without header"))?;
    let (h, w) = (info.height as usize, info.width as usize);
    if pixels.len() != h * w * 3 {
        return Err(Error::decoding(0, "JPEG did not decode to 3 channels"));
    }
    NdArray::from_u8(vec![h, w, 3], pixels)
}

fn decode_png(data: &[u8]) -> Result<NdArray> {
    let corrupt = |e: png::DecodingError| Error::decoding(0, format!("corrupt PNG stream: {e}"));
    let mut dec = png::Decoder::new(data);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(corrupt)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    buf.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::decoding(0, "unexpanded indexed PNG")),
    };
    NdArray::from_u8(vec![h, w, 3], rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> NdArray {
        NdArray::from_u8(vec![h, w, 3], vec![128; h * w * 3]).unwrap()
    }

    #[test]
    fn jpeg_preserves_shape() {
        for (h, w) in [(224, 224), (1, 1), (17, 33)] {
            let img = gray(h, w);
            let jpg = compress_image(&img, 90).unwrap();
            let back = decompress_image(&EncodedImage { codec: Codec::Jpeg, data: jpg }).unwrap();
            assert_eq!(back.shape(), img.shape());
        }
    }

    #[test]
    fn uniform_gray_compresses_small() {
        let jpg = compress_image(&gray(224, 224), 90).unwrap();
        assert!(jpg.len() < 5000, "{} octets", jpg.len());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(compress_image(&gray(4, 4), 0).is_err());
        assert!(compress_image(&gray(4, 4), 101).is_err());
        let depth = NdArray::from_f32(vec![2, 2, 3], vec![0.0; 12]).unwrap();
        assert!(matches!(compress_image(&depth, 90), Err(Error::Encoding(_))));
        let gray1 = NdArray::from_u8(vec![2, 2, 1], vec![0; 4]).unwrap();
        assert!(compress_image(&gray1, 90).is_err());
    }

    #[test]
    fn corrupt_stream_is_decoding_error() {
        let mut jpg = compress_image(&gray(32, 32), 90).unwrap();
        jpg.truncate(10);
        let r = decompress_image(&EncodedImage { codec: Codec::Jpeg, data: jpg });
        assert!(matches!(r, Err(Error::Decoding { .. })));
        let r = decompress_image(&EncodedImage { codec: Codec::Png, data: vec![1, 2, 3] });
        assert!(matches!(r, Err(Error::Decoding { .. })));
    }

    #[test]
    fn png_rgb_decodes_losslessly() {
        let (w, h) = (5u32, 3u32);
        let pixels: Vec<u8> = (0..(w * h * 3)).map(|i| (i * 7) as u8).collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&pixels).unwrap();
        }
        let back = decompress_image(&EncodedImage { codec: Codec::Png, data: out }).unwrap();
        assert_eq!(back.shape(), &[3, 5, 3]);
        assert_eq!(back.as_u8().unwrap(), &pixels[..]);
    }

    #[test]
    fn policy_eligibility() {
        let p = CompressionPolicy::default();
        assert!(p.applies_to(&gray(32, 32)));
        assert!(!p.applies_to(&gray(31, 32)));
        assert!(!CompressionPolicy::disabled().applies_to(&gray(224, 224)));
        let batched = NdArray::from_u8(vec![2, 32, 32, 3], vec![0; 2 * 32 * 32 * 3]).unwrap();
        assert!(!p.applies_to(&batched));
    }
}
