//! Regenerates the checked-in test images under `fixtures/`.
//!
//! `cargo run -p polserve --example gen_fixtures`

use std::path::Path;

use polserve::fixtures::{gradient_image, save_ppm};
use polserve::NdArray;

/// Soft shapes over a sky-to-ground ramp with mild deterministic texture,
/// roughly what a tabletop camera sees.
fn scene(size: usize) -> NdArray {
    let mut data = Vec::with_capacity(size * size * 3);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / s, y as f64 / s);
            let mut px = if fy < 0.55 {
                [170.0 + 60.0 * fy, 190.0 + 40.0 * fy, 230.0 - 30.0 * fy]
            } else {
                [120.0 - 40.0 * fy, 90.0 - 20.0 * fy, 60.0]
            };
            let d = ((fx - 0.35).powi(2) + (fy - 0.6).powi(2)).sqrt();
            if d < 0.12 {
                let k = 1.0 - d / 0.12;
                px = [200.0 + 50.0 * k, 40.0 + 30.0 * k, 30.0];
            }
            if (0.6..0.8).contains(&fx) && (0.45..0.7).contains(&fy) {
                px = [40.0, 110.0 + 80.0 * (fx - 0.6) * 5.0, 60.0];
            }
            let h = (x.wrapping_mul(73_856_093) ^ y.wrapping_mul(19_349_663)) % 9;
            for c in &mut px {
                *c = (*c + h as f64 - 4.0).clamp(0.0, 255.0);
            }
            data.extend(px.iter().map(|c| c.round() as u8));
        }
    }
    NdArray::from_u8(vec![size, size, 3], data).unwrap()
}

fn main() -> polserve::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir)?;
    save_ppm(dir.join("gradient_224.ppm"), &gradient_image(224, 0))?;
    save_ppm(dir.join("scene_224.ppm"), &scene(224))?;
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
