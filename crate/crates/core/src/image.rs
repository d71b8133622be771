//! Pixel container and the shared signal-processing primitives.
//!
//! `Image` stores row-major, channel-interleaved `f64` samples. Values
//! are nominally in `[0, 1]`; math kernels (convolution, resampling,
//! diffusion updates) run unclamped and clamping happens explicitly at
//! module boundaries, never silently inside a kernel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::CoreError;

/// Dense H×W×C image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Build an image from raw samples. Rejects bad shapes and non-finite values.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, CoreError> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(CoreError::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{height}x{width}x{channels} = {}", height * width * channels),
                got: format!("{} samples", pixels.len()),
            });
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("image sample".into()));
        }
        Ok(Image { height, width, channels, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image::constant(height, width, channels, 0.0)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels])
            .expect("constant image shape is valid")
    }

    /// Fill from a function of (y, x, channel).
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, pixels).expect("from_fn produced a non-finite sample")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> alloc::string::String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Explicitly clamp every sample into `[0, 1]`.
    pub fn clamp_unit(mut self) -> Image {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn is_unit_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Elementwise map, preserving shape.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape images.
    pub fn zip(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Result<Image, CoreError> {
        if !self.same_shape(other) {
            return Err(CoreError::ShapeMismatch {
                expected: self.shape_string(),
                got: other.shape_string(),
            });
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self
                .pixels
                .iter()
                .zip(other.pixels.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Per-channel 2-D convolution with reflect padding. Unclamped.
    pub fn convolve(&self, kernel: &Kernel2D) -> Result<Image, CoreError> {
        if kernel.size() >= 2 * self.height.min(self.width) {
            return Err(CoreError::InvalidArgument(format!(
                "kernel size {} too large for {}x{} image",
                kernel.size(),
                self.height,
                self.width
            )));
        }
        let pixels = conv2d_reflect(
            &self.pixels,
            self.height,
            self.width,
            self.channels,
            kernel.weights(),
            kernel.size(),
        );
        Ok(Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        })
    }

    /// Nearest-neighbor resize with center-aligned index mapping.
    pub fn resize_nearest(&self, new_height: usize, new_width: usize) -> Image {
        assert!(new_height > 0 && new_width > 0);
        let mut out = Vec::with_capacity(new_height * new_width * self.channels);
        for y in 0..new_height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / new_height as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..new_width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / new_width as f64) as usize;
                let sx = sx.min(self.width - 1);
                for c in 0..self.channels {
                    out.push(self.get(sy, sx, c));
                }
            }
        }
        Image {
            height: new_height,
            width: new_width,
            channels: self.channels,
            pixels: out,
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> Image {
        assert!(new_height > 0 && new_width > 0);
        let mut out = Vec::with_capacity(new_height * new_width * self.channels);
        for y in 0..new_height {
            let sy = (y as f64 + 0.5) * self.height as f64 / new_height as f64 - 0.5;
            for x in 0..new_width {
                let sx = (x as f64 + 0.5) * self.width as f64 / new_width as f64 - 0.5;
                for c in 0..self.channels {
                    out.push(self.sample_bilinear(sy, sx, c));
                }
            }
        }
        Image {
            height: new_height,
            width: new_width,
            channels: self.channels,
            pixels: out,
        }
    }

    /// Bilinear sample at a fractional position, clamping taps to the edges.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y0f = fmath::floor(y);
        let x0f = fmath::floor(x);
        let fy = y - y0f;
        let fx = x - x0f;
        let clamp_y = |i: i64| i.clamp(0, self.height as i64 - 1) as usize;
        let clamp_x = |i: i64| i.clamp(0, self.width as i64 - 1) as usize;
        let y0 = clamp_y(y0f as i64);
        let y1 = clamp_y(y0f as i64 + 1);
        let x0 = clamp_x(x0f as i64);
        let x1 = clamp_x(x0f as i64 + 1);
        let v00 = self.get(y0, x0, c);
        let v01 = self.get(y0, x1, c);
        let v10 = self.get(y1, x0, c);
        let v11 = self.get(y1, x1, c);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    /// Crop a centered window of the given size.
    pub fn crop_center(&self, crop_height: usize, crop_width: usize) -> Image {
        assert!(crop_height >= 1 && crop_height <= self.height);
        assert!(crop_width >= 1 && crop_width <= self.width);
        let y0 = (self.height - crop_height) / 2;
        let x0 = (self.width - crop_width) / 2;
        Image::from_fn(crop_height, crop_width, self.channels, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        })
    }
}

/// Mirror an out-of-range index back into `0..n` (edge not repeated).
#[inline]
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Raw per-channel 2-D convolution with reflect padding, on an
/// interleaved buffer. Linear and unclamped.
pub fn conv2d_reflect(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    kernel: &[f64],
    ksize: usize,
) -> Vec<f64> {
    debug_assert_eq!(data.len(), height * width * channels);
    debug_assert_eq!(kernel.len(), ksize * ksize);
    let half = (ksize / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * channels;
            for c in 0..channels {
                let mut acc = 0.0;
                for ky in 0..ksize {
                    let sy = reflect_index(y as isize + ky as isize - half, height);
                    let row = sy * width;
                    for kx in 0..ksize {
                        let sx = reflect_index(x as isize + kx as isize - half, width);
                        acc += kernel[ky * ksize + kx] * data[(row + sx) * channels + c];
                    }
                }
                out[base + c] = acc;
            }
        }
    }
    out
}

/// Mean squared error between two same-shape images.
pub fn mse(a: &Image, b: &Image) -> Result<f64, CoreError> {
    if !a.same_shape(b) {
        return Err(CoreError::ShapeMismatch {
            expected: a.shape_string(),
            got: b.shape_string(),
        });
    }
    let n = a.pixels().len() as f64;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in decibels for unit-range images:
/// `10·log10(1/MSE)`, `+inf` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, CoreError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * fmath::log10(1.0 / e))
}

/// Square convolution kernel with odd side length.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self, CoreError> {
        if size == 0 || size % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{size}x{size} = {} weights", size * size),
                got: format!("{}", weights.len()),
            });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(CoreError::NonFinite("kernel weight".into()));
        }
        Ok(Kernel2D { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Dirac kernel: convolution with it is the identity.
    pub fn identity(size: usize) -> Result<Self, CoreError> {
        let mut weights = vec![0.0; size * size];
        if size % 2 == 1 {
            weights[(size / 2) * size + size / 2] = 1.0;
        }
        Kernel2D::new(size, weights)
    }

    /// Uniform box kernel, normalized to sum 1.
    pub fn uniform(size: usize) -> Result<Self, CoreError> {
        let w = 1.0 / (size * size) as f64;
        Kernel2D::new(size, vec![w; size * size])
    }

    /// Isotropic Gaussian of the given standard deviation; side length
    /// `2·ceil(3σ)+1`, normalized to sum 1.
    pub fn gaussian(sigma: f64) -> Result<Self, CoreError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let half = fmath::ceil(3.0 * sigma) as usize;
        let size = 2 * half + 1;
        let mut weights = Vec::with_capacity(size * size);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for ky in 0..size {
            let dy = ky as f64 - half as f64;
            for kx in 0..size {
                let dx = kx as f64 - half as f64;
                weights.push(fmath::exp(-(dy * dy + dx * dx) * inv));
            }
        }
        let mut k = Kernel2D::new(size, weights)?;
        k.normalize();
        Ok(k)
    }

    /// Flat disk of the given radius with a light Gaussian smoothing of
    /// the kernel itself to reduce aliasing. Normalized to sum 1.
    pub fn disk(radius: f64, alias_sigma: f64) -> Result<Self, CoreError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "disk radius must be positive, got {radius}"
            )));
        }
        let half = fmath::ceil(radius + 3.0 * alias_sigma.max(0.0)) as usize;
        let size = 2 * half + 1;
        let mut weights = Vec::with_capacity(size * size);
        for ky in 0..size {
            let dy = ky as f64 - half as f64;
            for kx in 0..size {
                let dx = kx as f64 - half as f64;
                let r = fmath::sqrt(dy * dy + dx * dx);
                weights.push(if r <= radius { 1.0 } else { 0.0 });
            }
        }
        let mut weights = weights;
        if alias_sigma > 0.0 {
            let g = Kernel2D::gaussian(alias_sigma)?;
            weights = conv2d_reflect(&weights, size, size, 1, g.weights(), g.size());
        }
        let mut k = Kernel2D::new(size, weights)?;
        k.normalize();
        Ok(k)
    }

    /// Line segment of the given length through the kernel center at the
    /// given angle (radians), rasterized with bilinear splatting and
    /// normalized to sum 1.
    pub fn line(length: usize, angle: f64) -> Result<Self, CoreError> {
        if length == 0 {
            return Err(CoreError::InvalidArgument("line length must be positive".into()));
        }
        let half = length / 2;
        let size = 2 * half + 1;
        let mut weights = vec![0.0; size * size];
        let (dy, dx) = (fmath::sin(angle), fmath::cos(angle));
        let steps = 4 * length;
        for i in 0..=steps {
            let s = (i as f64 / steps as f64 - 0.5) * (length as f64 - 1.0);
            let y = half as f64 + s * dy;
            let x = half as f64 + s * dx;
            let y0 = fmath::floor(y) as isize;
            let x0 = fmath::floor(x) as isize;
            let fy = y - y0 as f64;
            let fx = x - x0 as f64;
            for (oy, ox, w) in [
                (0, 0, (1.0 - fy) * (1.0 - fx)),
                (0, 1, (1.0 - fy) * fx),
                (1, 0, fy * (1.0 - fx)),
                (1, 1, fy * fx),
            ] {
                let yy = y0 + oy;
                let xx = x0 + ox;
                if yy >= 0 && (yy as usize) < size && xx >= 0 && (xx as usize) < size {
                    weights[yy as usize * size + xx as usize] += w;
                }
            }
        }
        let mut k = Kernel2D::new(size, weights)?;
        k.normalize();
        Ok(k)
    }

    /// Scale weights so they sum to 1.
    pub fn normalize(&mut self) {
        let sum: f64 = self.weights.iter().sum();
        assert!(sum != 0.0, "cannot normalize a zero kernel");
        for w in &mut self.weights {
            *w /= sum;
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Philox;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = Philox::seed(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.next_f64())
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(0, 4, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let img = random_image(7, 5, 3, 1);
        let k = Kernel2D::identity(3).unwrap();
        let out = img.convolve(&k).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_kernel_preserves_constant() {
        let img = Image::constant(6, 6, 1, 0.37);
        let k = Kernel2D::uniform(3).unwrap();
        let out = img.convolve(&k).unwrap();
        for &v in out.pixels() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_kernel_spreads_one_hot() {
        // 5x5 with a single 1.0 at (2,2): 3x3 box puts 1/9 in its neighborhood.
        let mut img = Image::zeros(5, 5, 1);
        img.set(2, 2, 0, 1.0);
        let k = Kernel2D::uniform(3).unwrap();
        let out = img.convolve(&k).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expected = if (1..=3).contains(&y) && (1..=3).contains(&x) {
                    1.0 / 9.0
                } else {
                    0.0
                };
                assert!((out.get(y, x, 0) - expected).abs() < 1e-12, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn convolution_is_linear() {
        let x = random_image(9, 8, 3, 2);
        let y = random_image(9, 8, 3, 3);
        let k = Kernel2D::gaussian(1.1).unwrap();
        let (a, b) = (0.7, -1.3);
        let combo = x.zip(&y, |xv, yv| a * xv + b * yv).unwrap();
        let lhs = combo.convolve(&k).unwrap();
        let cx = x.convolve(&k).unwrap();
        let cy = y.convolve(&k).unwrap();
        for i in 0..lhs.pixels().len() {
            let rhs = a * cx.pixels()[i] + b * cy.pixels()[i];
            assert!((lhs.pixels()[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn kernel_too_large_rejected() {
        let img = Image::zeros(4, 4, 1);
        let k = Kernel2D::uniform(9).unwrap();
        assert!(img.convolve(&k).is_err());
        // size 7 < 2*4 = 8 is allowed
        let k7 = Kernel2D::uniform(7).unwrap();
        assert!(img.convolve(&k7).is_ok());
    }

    #[test]
    fn gaussian_kernel_normalized() {
        for &sigma in &[0.3, 0.8, 1.5, 3.0] {
            let k = Kernel2D::gaussian(sigma).unwrap();
            assert!((k.weight_sum() - 1.0).abs() < 1e-9, "sigma {sigma}");
            assert_eq!(k.size() % 2, 1);
        }
    }

    #[test]
    fn psnr_examples() {
        let x = random_image(4, 4, 3, 4);
        assert!(psnr(&x, &x).unwrap().is_infinite());

        let a = Image::zeros(3, 3, 1);
        let b = Image::constant(3, 3, 1, 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_matches_double_loop_oracle() {
        let a = random_image(6, 7, 3, 5);
        let b = random_image(6, 7, 3, 6);
        // independent oracle: explicit loops over coordinates
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..6 {
            for x in 0..7 {
                for c in 0..3 {
                    let d = a.get(y, x, c) - b.get(y, x, c);
                    acc += d * d;
                    count += 1;
                }
            }
        }
        let expected = 10.0 * (1.0 / (acc / count as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Image::zeros(2, 2, 1);
        let b = Image::zeros(2, 3, 1);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn mean_preserved_for_constant_under_normalized_kernel() {
        let img = Image::constant(8, 8, 3, 0.42);
        for k in [Kernel2D::gaussian(1.0).unwrap(), Kernel2D::uniform(5).unwrap()] {
            let out = img.convolve(&k).unwrap();
            let mean: f64 = out.pixels().iter().sum::<f64>() / out.pixels().len() as f64;
            assert!((mean - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_nearest_identity_and_pixelate_roundtrip() {
        let img = random_image(8, 8, 3, 7);
        let same = img.resize_nearest(8, 8);
        assert_eq!(img, same);
        let down = img.resize_nearest(4, 4);
        let up = down.resize_nearest(8, 8);
        // each 2x2 block of `up` is constant
        for y in (0..8).step_by(2) {
            for x in (0..8).step_by(2) {
                for c in 0..3 {
                    let v = up.get(y, x, c);
                    assert_eq!(up.get(y + 1, x, c), v);
                    assert_eq!(up.get(y, x + 1, c), v);
                    assert_eq!(up.get(y + 1, x + 1, c), v);
                }
            }
        }
    }

    #[test]
    fn resize_bilinear_preserves_constant() {
        let img = Image::constant(6, 9, 3, 0.21);
        let out = img.resize_bilinear(13, 5);
        for &v in out.pixels() {
            assert!((v - 0.21).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn line_kernel_is_normalized_and_sized() {
        for &(len, ang) in &[(3usize, 0.0), (5, 0.7), (9, 1.3), (11, 2.9)] {
            let k = Kernel2D::line(len, ang).unwrap();
            assert!((k.weight_sum() - 1.0).abs() < 1e-9);
            assert_eq!(k.size(), 2 * (len / 2) + 1);
        }
    }
}
