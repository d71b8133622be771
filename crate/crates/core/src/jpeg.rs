//! Minimal baseline JPEG round trip, in-tree.
//!
//! Produces codec-typical artifacts without touching a real bitstream:
//! RGB → YCbCr with 4:2:0 chroma subsampling, 8×8 block DCT, the
//! standard quantization tables scaled by a quality factor, then the
//! inverse of each step. Entropy coding is lossless and therefore
//! irrelevant to the artifacts, so it is omitted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::image::Image;
use crate::CoreError;

// Standard luminance/chrominance quantization tables (Annex K).
const QT_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const QT_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled table per the conventional libjpeg rule.
fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as i32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let v = (i32::from(b) * scale + 50) / 100;
        *o = v.clamp(1, 255) as f64;
    }
    out
}

/// Orthonormal 8-point DCT-II basis matrix: `m[u][x]`.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let c = if u == 0 {
            fmath::sqrt(1.0 / 8.0)
        } else {
            fmath::sqrt(2.0 / 8.0)
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * fmath::cos((2.0 * x as f64 + 1.0) * u as f64 * core::f64::consts::PI / 16.0);
        }
    }
    m
}

/// One plane through DCT → quantize → dequantize → inverse DCT.
/// Values are in the 0..255 domain; the plane is edge-padded to
/// multiples of 8.
fn transcode_plane(plane: &mut [f64], h: usize, w: usize, qt: &[f64; 64], m: &[[f64; 8]; 8]) {
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            padded[y * pw + x] = plane[sy * w + sx];
        }
    }
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded[(by + y) * pw + bx + x] - 128.0;
                }
            }
            // coef = M · block · Mᵀ
            for u in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        acc += m[u][y] * block[y * 8 + x];
                    }
                    tmp[u * 8 + x] = acc;
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for x in 0..8 {
                        acc += tmp[u * 8 + x] * m[v][x];
                    }
                    let q = qt[u * 8 + v];
                    coef[u * 8 + v] = fmath::round(acc / q) * q;
                }
            }
            // block = Mᵀ · coef · M
            for y in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for u in 0..8 {
                        acc += m[u][y] * coef[u * 8 + v];
                    }
                    tmp[y * 8 + v] = acc;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for v in 0..8 {
                        acc += tmp[y * 8 + v] * m[v][x];
                    }
                    padded[(by + y) * pw + bx + x] = acc + 128.0;
                }
            }
        }
    }
    for y in 0..h {
        plane[y * w..(y + 1) * w].copy_from_slice(&padded[y * pw..y * pw + w]);
    }
}

/// Box-average 2× downsample of a chroma plane.
fn chroma_down(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (sh, sw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; sh * sw];
    for by in 0..sh {
        for bx in 0..sw {
            let mut acc = 0.0;
            for iy in 0..2 {
                let sy = (by * 2 + iy).min(h - 1);
                for ix in 0..2 {
                    let sx = (bx * 2 + ix).min(w - 1);
                    acc += src[sy * w + sx];
                }
            }
            out[by * sw + bx] = acc / 4.0;
        }
    }
    (out, sh, sw)
}

/// Bilinear 2× upsample of a chroma plane back to (h, w).
fn chroma_up(src: &[f64], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let py = (y as f64 + 0.5) * sh as f64 / h as f64 - 0.5;
        let y0 = fmath::floor(py);
        let fy = py - y0;
        let y0i = (y0 as i64).clamp(0, sh as i64 - 1) as usize;
        let y1i = (y0 as i64 + 1).clamp(0, sh as i64 - 1) as usize;
        for x in 0..w {
            let px = (x as f64 + 0.5) * sw as f64 / w as f64 - 0.5;
            let x0 = fmath::floor(px);
            let fx = px - x0;
            let x0i = (x0 as i64).clamp(0, sw as i64 - 1) as usize;
            let x1i = (x0 as i64 + 1).clamp(0, sw as i64 - 1) as usize;
            out[y * w + x] = src[y0i * sw + x0i] * (1.0 - fy) * (1.0 - fx)
                + src[y0i * sw + x1i] * (1.0 - fy) * fx
                + src[y1i * sw + x0i] * fy * (1.0 - fx)
                + src[y1i * sw + x1i] * fy * fx;
        }
    }
    out
}

/// Round-trip an image through the baseline JPEG transform chain at the
/// given quality (1..=100). Output is clamped to `[0, 1]`.
pub fn round_trip(img: &Image, quality: u8) -> Result<Image, CoreError> {
    if !(1..=100).contains(&quality) {
        return Err(CoreError::InvalidArgument(format!(
            "jpeg quality must be in 1..=100, got {quality}"
        )));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let m = dct_matrix();
    let qt_l = scaled_table(&QT_LUMA, quality);
    let qt_c = scaled_table(&QT_CHROMA, quality);
    let px = img.pixels();

    if c == 1 {
        let mut y: Vec<f64> = px.iter().map(|&v| v * 255.0).collect();
        transcode_plane(&mut y, h, w, &qt_l, &m);
        let out: Vec<f64> = y.iter().map(|&v| v / 255.0).collect();
        return Ok(Image::new(h, w, 1, out)?.clamp_unit());
    }

    // RGB -> YCbCr (0..255 domain, chroma centered at 128)
    let n = h * w;
    let mut yy = vec![0.0; n];
    let mut cb = vec![0.0; n];
    let mut cr = vec![0.0; n];
    for i in 0..n {
        let r = px[3 * i] * 255.0;
        let g = px[3 * i + 1] * 255.0;
        let b = px[3 * i + 2] * 255.0;
        yy[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
        cr[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
    }
    transcode_plane(&mut yy, h, w, &qt_l, &m);
    // 4:2:0: chroma at half resolution
    let (mut cb_s, sh, sw) = chroma_down(&cb, h, w);
    let (mut cr_s, _, _) = chroma_down(&cr, h, w);
    transcode_plane(&mut cb_s, sh, sw, &qt_c, &m);
    transcode_plane(&mut cr_s, sh, sw, &qt_c, &m);
    let cb_u = chroma_up(&cb_s, sh, sw, h, w);
    let cr_u = chroma_up(&cr_s, sh, sw, h, w);

    let mut out = vec![0.0; n * 3];
    for i in 0..n {
        let y = yy[i];
        let cbv = cb_u[i] - 128.0;
        let crv = cr_u[i] - 128.0;
        out[3 * i] = (y + 1.402 * crv) / 255.0;
        out[3 * i + 1] = (y - 0.344_136 * cbv - 0.714_136 * crv) / 255.0;
        out[3 * i + 2] = (y + 1.772 * cbv) / 255.0;
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(h, w, 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr;
    use crate::rng::Philox;

    fn textured(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = Philox::seed(seed);
        Image::from_fn(h, w, c, |y, x, ch| {
            let base = 0.5 + 0.3 * fmath::sin(0.7 * x as f64 + 0.3 * y as f64 + ch as f64);
            (base + 0.15 * rng.next_normal()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn constant_image_survives_nearly_exactly() {
        let img = Image::constant(16, 16, 3, 0.5);
        let out = round_trip(&img, 50).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn quality_orders_distortion() {
        let img = textured(32, 32, 3, 1);
        let hi = round_trip(&img, 90).unwrap();
        let lo = round_trip(&img, 7).unwrap();
        let p_hi = psnr(&img, &hi).unwrap();
        let p_lo = psnr(&img, &lo).unwrap();
        assert!(
            p_hi > p_lo + 3.0,
            "expected clearly more distortion at low quality: {p_hi} vs {p_lo}"
        );
        assert!(p_lo > 10.0, "low quality still resembles the input: {p_lo}");
    }

    #[test]
    fn output_in_unit_range_and_deterministic() {
        for &(h, w, c) in &[(32usize, 32usize, 3usize), (20, 28, 3), (17, 9, 1)] {
            let img = textured(h, w, c, 7);
            let a = round_trip(&img, 15).unwrap();
            let b = round_trip(&img, 15).unwrap();
            assert_eq!(a, b);
            assert!(a.is_unit_range());
            assert!(a.same_shape(&img));
        }
    }

    #[test]
    fn rejects_bad_quality() {
        let img = Image::constant(8, 8, 1, 0.5);
        assert!(round_trip(&img, 0).is_err());
        assert!(round_trip(&img, 101).is_err());
    }

    #[test]
    fn low_quality_produces_visible_blocking() {
        // energy at block boundaries should differ from the interior
        let img = textured(32, 32, 1, 3);
        let out = round_trip(&img, 5).unwrap();
        // the transform must actually change the image
        let p = psnr(&img, &out).unwrap();
        assert!(p.is_finite() && p < 40.0, "psnr {p}");
    }
}
