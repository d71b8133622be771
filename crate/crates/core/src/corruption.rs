//! Deterministic corruption generators: 14 kinds × 5 severities.
//!
//! Severity parameters live in a frozen, versioned table adapted from
//! the common corruption-benchmark parameterization and rescaled for a
//! 32×32 working resolution. All randomness comes from the counter-based
//! stream keyed by the spec's seed, so a (kind, severity, seed) triple
//! maps an image to bit-identical output on every platform.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::image::{Image, Kernel2D};
use crate::jpeg;
use crate::rng::Philox;
use crate::CoreError;

/// Version tag of the frozen severity table.
pub const SEVERITY_TABLE_VERSION: &str = "1";

/// The corruption taxonomy: noise (4), blur (5), digital (3), extra (2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    ShotNoise,
    SpeckleNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    GaussianBlur,
    ElasticTransform,
    JpegCompression,
    Pixelate,
    Brightness,
    Spatter,
}

/// Category groups used by the benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionCategory {
    Noise,
    Blur,
    Digital,
    Extra,
}

impl CorruptionCategory {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionCategory::Noise => "noise",
            CorruptionCategory::Blur => "blur",
            CorruptionCategory::Digital => "digital",
            CorruptionCategory::Extra => "else",
        }
    }

    pub const ALL: [CorruptionCategory; 4] = [
        CorruptionCategory::Noise,
        CorruptionCategory::Blur,
        CorruptionCategory::Digital,
        CorruptionCategory::Extra,
    ];
}

pub const ALL_KINDS: [CorruptionKind; 14] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::SpeckleNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::GlassBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::ZoomBlur,
    CorruptionKind::GaussianBlur,
    CorruptionKind::ElasticTransform,
    CorruptionKind::JpegCompression,
    CorruptionKind::Pixelate,
    CorruptionKind::Brightness,
    CorruptionKind::Spatter,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::ElasticTransform => "elastic_transform",
            CorruptionKind::JpegCompression => "jpeg_compression",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Spatter => "spatter",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        let norm = s.trim().to_ascii_lowercase();
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown corruption kind '{s}'")))
    }

    pub fn category(&self) -> CorruptionCategory {
        match self {
            CorruptionKind::GaussianNoise
            | CorruptionKind::ImpulseNoise
            | CorruptionKind::ShotNoise
            | CorruptionKind::SpeckleNoise => CorruptionCategory::Noise,
            CorruptionKind::DefocusBlur
            | CorruptionKind::GlassBlur
            | CorruptionKind::MotionBlur
            | CorruptionKind::ZoomBlur
            | CorruptionKind::GaussianBlur => CorruptionCategory::Blur,
            CorruptionKind::ElasticTransform
            | CorruptionKind::JpegCompression
            | CorruptionKind::Pixelate => CorruptionCategory::Digital,
            CorruptionKind::Brightness | CorruptionKind::Spatter => CorruptionCategory::Extra,
        }
    }

    /// Names of the entries in this kind's parameter vector.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::SpeckleNoise => &["sigma"],
            CorruptionKind::ShotNoise => &["lambda"],
            CorruptionKind::ImpulseNoise => &["ratio"],
            CorruptionKind::GaussianBlur => &["sigma"],
            CorruptionKind::DefocusBlur => &["radius", "alias_sigma"],
            CorruptionKind::GlassBlur => &["sigma", "max_displacement", "iterations"],
            CorruptionKind::MotionBlur => &["length"],
            CorruptionKind::ZoomBlur => &["max_factor", "step"],
            CorruptionKind::ElasticTransform => &["amplitude_px", "smoothing_sigma"],
            CorruptionKind::JpegCompression => &["quality"],
            CorruptionKind::Pixelate => &["block_factor"],
            CorruptionKind::Brightness => &["shift"],
            CorruptionKind::Spatter => &["smoothing_sigma", "threshold", "opacity"],
        }
    }
}

impl core::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// One deterministic corruption: kind, severity in 1..=5, and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CoreError> {
        check_severity(severity)?;
        Ok(CorruptionSpec { kind, severity, seed })
    }
}

fn check_severity(severity: u8) -> Result<(), CoreError> {
    if !(1..=5).contains(&severity) {
        return Err(CoreError::InvalidArgument(format!(
            "severity must be in 1..=5, got {severity}"
        )));
    }
    Ok(())
}

/// Frozen per-severity parameter vectors (table version 1, tuned for
/// 32×32 inputs). Index with severity−1.
pub fn severity_params(kind: CorruptionKind, severity: u8) -> Result<Vec<f64>, CoreError> {
    check_severity(severity)?;
    let i = (severity - 1) as usize;
    let v: Vec<f64> = match kind {
        CorruptionKind::GaussianNoise => vec![[0.08, 0.12, 0.18, 0.26, 0.38][i]],
        CorruptionKind::ShotNoise => vec![[60.0, 25.0, 12.0, 5.0, 3.0][i]],
        CorruptionKind::ImpulseNoise => vec![[0.03, 0.06, 0.09, 0.17, 0.27][i]],
        CorruptionKind::SpeckleNoise => vec![[0.15, 0.20, 0.35, 0.45, 0.60][i]],
        CorruptionKind::GaussianBlur => vec![[0.5, 0.75, 1.0, 1.5, 2.0][i]],
        CorruptionKind::DefocusBlur => {
            let (r, a) = [(1.0, 0.3), (1.5, 0.3), (2.0, 0.4), (2.5, 0.4), (3.0, 0.5)][i];
            vec![r, a]
        }
        CorruptionKind::GlassBlur => {
            let (s, d, it) = [
                (0.4, 1.0, 1.0),
                (0.5, 1.0, 2.0),
                (0.6, 1.0, 3.0),
                (0.7, 2.0, 2.0),
                (0.9, 2.0, 3.0),
            ][i];
            vec![s, d, it]
        }
        CorruptionKind::MotionBlur => vec![[3.0, 5.0, 7.0, 9.0, 11.0][i]],
        CorruptionKind::ZoomBlur => {
            let (mz, step) = [
                (1.06, 0.01),
                (1.11, 0.01),
                (1.16, 0.01),
                (1.21, 0.01),
                (1.26, 0.01),
            ][i];
            vec![mz, step]
        }
        CorruptionKind::ElasticTransform => {
            let (a, s) = [(0.5, 3.0), (0.8, 3.0), (1.2, 2.5), (1.8, 2.5), (2.6, 2.0)][i];
            vec![a, s]
        }
        CorruptionKind::JpegCompression => vec![[25.0, 18.0, 15.0, 10.0, 7.0][i]],
        CorruptionKind::Pixelate => vec![[2.0, 3.0, 4.0, 6.0, 8.0][i]],
        CorruptionKind::Brightness => vec![[0.1, 0.2, 0.3, 0.4, 0.5][i]],
        CorruptionKind::Spatter => {
            let (s, t, o) = [
                (1.0, 2.2, 0.35),
                (1.0, 1.9, 0.42),
                (1.0, 1.6, 0.50),
                (1.0, 1.35, 0.57),
                (1.0, 1.1, 0.65),
            ][i];
            vec![s, t, o]
        }
    };
    Ok(v)
}

/// Apply one corruption. Output has the input's shape, clamped to `[0, 1]`.
pub fn apply(img: &Image, spec: &CorruptionSpec) -> Result<Image, CoreError> {
    let params = severity_params(spec.kind, spec.severity)?;
    apply_with_params(img, spec.kind, &params, spec.seed)
}

/// Apply a corruption with an explicit parameter vector.
///
/// This is the documented test hook: passing zeroed intensity
/// parameters (for example σ = 0 for gaussian noise) must reproduce
/// the input exactly.
pub fn apply_with_params(
    img: &Image,
    kind: CorruptionKind,
    params: &[f64],
    seed: u64,
) -> Result<Image, CoreError> {
    if params.len() != kind.param_names().len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} expects {} parameters, got {}",
            kind,
            kind.param_names().len(),
            params.len()
        )));
    }
    let mut rng = Philox::seed(seed);
    Ok(apply_unclamped(img, kind, params, &mut rng)?.clamp_unit())
}

/// The per-kind algorithms, before the final range clamp.
fn apply_unclamped(
    img: &Image,
    kind: CorruptionKind,
    p: &[f64],
    rng: &mut Philox,
) -> Result<Image, CoreError> {
    match kind {
        CorruptionKind::GaussianNoise => Ok(gaussian_noise(img, p[0], rng)),
        CorruptionKind::ShotNoise => Ok(shot_noise(img, p[0], rng)),
        CorruptionKind::ImpulseNoise => Ok(impulse_noise(img, p[0], rng)),
        CorruptionKind::SpeckleNoise => Ok(speckle_noise(img, p[0], rng)),
        CorruptionKind::GaussianBlur => img.convolve(&Kernel2D::gaussian(p[0])?),
        CorruptionKind::DefocusBlur => img.convolve(&Kernel2D::disk(p[0], p[1])?),
        CorruptionKind::GlassBlur => glass_blur(img, p[0], p[1] as i64, p[2] as usize, rng),
        CorruptionKind::MotionBlur => {
            let angle = rng.next_f64() * core::f64::consts::PI;
            img.convolve(&Kernel2D::line(p[0] as usize, angle)?)
        }
        CorruptionKind::ZoomBlur => Ok(zoom_blur(img, p[0], p[1])),
        CorruptionKind::ElasticTransform => Ok(elastic_transform(img, p[0], p[1], rng)?),
        CorruptionKind::JpegCompression => jpeg::round_trip(img, p[0] as u8),
        CorruptionKind::Pixelate => Ok(pixelate(img, p[0] as usize)),
        CorruptionKind::Brightness => Ok(img.map(|v| v + p[0])),
        CorruptionKind::Spatter => spatter(img, p[0], p[1], p[2], rng),
    }
}

/// Additive i.i.d. gaussian noise per sample.
fn gaussian_noise(img: &Image, sigma: f64, rng: &mut Philox) -> Image {
    img.map(|v| v + sigma * rng.next_normal())
}

/// Photon-count noise: `Poisson(v·λ)/λ` per sample.
fn shot_noise(img: &Image, lambda: f64, rng: &mut Philox) -> Image {
    if lambda <= 0.0 {
        return img.clone();
    }
    img.map(|v| rng.next_poisson(v.max(0.0) * lambda) as f64 / lambda)
}

/// Salt-and-pepper: a `ratio` fraction of pixels forced to 0 or 1
/// (all channels together). Stream discipline per pixel: one uniform
/// gate draw, then one value draw only when the gate fires.
fn impulse_noise(img: &Image, ratio: f64, rng: &mut Philox) -> Image {
    let mut out = img.clone();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    for y in 0..h {
        for x in 0..w {
            if rng.next_f64() < ratio {
                let v = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                for ch in 0..c {
                    out.set(y, x, ch, v);
                }
            }
        }
    }
    out
}

/// Multiplicative gaussian noise: `v + v·σ·z`.
fn speckle_noise(img: &Image, sigma: f64, rng: &mut Philox) -> Image {
    img.map(|v| v + v * sigma * rng.next_normal())
}

/// Gaussian blur, then iterations of random local pixel swaps within a
/// displacement radius, then gaussian blur again.
fn glass_blur(
    img: &Image,
    sigma: f64,
    max_disp: i64,
    iterations: usize,
    rng: &mut Philox,
) -> Result<Image, CoreError> {
    let kernel = Kernel2D::gaussian(sigma)?;
    let mut out = img.convolve(&kernel)?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let span = (2 * max_disp + 1) as u32;
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let dy = rng.next_below(span) as i64 - max_disp;
                let dx = rng.next_below(span) as i64 - max_disp;
                let ty = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let tx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                for ch in 0..c {
                    let a = out.get(y, x, ch);
                    let b = out.get(ty, tx, ch);
                    out.set(y, x, ch, b);
                    out.set(ty, tx, ch, a);
                }
            }
        }
    }
    out.convolve(&kernel)
}

/// Average of the original and center crops rescaled back to full size
/// at zoom factors `1 + k·step` up to `max_factor`.
fn zoom_blur(img: &Image, max_factor: f64, step: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut acc: Vec<f64> = img.pixels().to_vec();
    let mut count = 1.0;
    let mut z = 1.0 + step;
    while z <= max_factor + 1e-12 {
        let ch = (fmath::round(h as f64 / z) as usize).clamp(1, h);
        let cw = (fmath::round(w as f64 / z) as usize).clamp(1, w);
        let zoomed = img.crop_center(ch, cw).resize_bilinear(h, w);
        for (a, &b) in acc.iter_mut().zip(zoomed.pixels()) {
            *a += b;
        }
        count += 1.0;
        z += step;
    }
    let inv = 1.0 / count;
    Image::new(h, w, img.channels(), acc.iter().map(|&v| v * inv).collect())
        .expect("zoom accumulator is finite")
}

/// Random displacement field, gaussian-smoothed, standardized to the
/// requested amplitude (in pixels), applied by bilinear warping.
/// Stream discipline: the vertical field is drawn first, then the
/// horizontal one, each in scanline order.
fn elastic_transform(
    img: &Image,
    amplitude: f64,
    smoothing_sigma: f64,
    rng: &mut Philox,
) -> Result<Image, CoreError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let field = |rng: &mut Philox| -> Result<Vec<f64>, CoreError> {
        let raw = Image::new(
            h,
            w,
            1,
            (0..h * w).map(|_| 2.0 * rng.next_f64() - 1.0).collect(),
        )?;
        let smooth = raw.convolve(&Kernel2D::gaussian(smoothing_sigma)?)?;
        let data = smooth.into_pixels();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let std = fmath::sqrt(var);
        let scale = if std > 1e-12 { amplitude / std } else { 0.0 };
        Ok(data.iter().map(|&v| (v - mean) * scale).collect())
    };
    let dy = field(rng)?;
    let dx = field(rng)?;
    Ok(Image::from_fn(h, w, c, |y, x, ch| {
        let sy = y as f64 + dy[y * w + x];
        let sx = x as f64 + dx[y * w + x];
        img.sample_bilinear(sy, sx, ch)
    }))
}

/// Nearest-neighbor downsample by an integer factor, then nearest
/// upsample back.
fn pixelate(img: &Image, factor: usize) -> Image {
    let f = factor.max(1);
    let (h, w) = (img.height(), img.width());
    let (sh, sw) = (h.div_ceil(f).max(1), w.div_ceil(f).max(1));
    img.resize_nearest(sh, sw).resize_nearest(h, w)
}

/// Smoothed gaussian field thresholded into occlusion blobs and
/// composited as a semi-opaque liquid-colored layer.
fn spatter(
    img: &Image,
    smoothing_sigma: f64,
    threshold: f64,
    opacity: f64,
    rng: &mut Philox,
) -> Result<Image, CoreError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let raw = Image::new(h, w, 1, (0..h * w).map(|_| rng.next_normal()).collect())?;
    let smooth = raw.convolve(&Kernel2D::gaussian(smoothing_sigma)?)?;
    let data = smooth.into_pixels();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
    let std = fmath::sqrt(var).max(1e-12);
    // liquid color: dark reddish-brown on RGB, dark gray on single channel
    let color = if c == 3 { [0.45, 0.25, 0.20] } else { [0.30, 0.30, 0.30] };
    Ok(Image::from_fn(h, w, c, |y, x, ch| {
        let z = (data[y * w + x] - mean) / std;
        let v = img.get(y, x, ch);
        if z > threshold {
            (1.0 - opacity) * v + opacity * color[ch.min(2)]
        } else {
            v
        }
    }))
}
