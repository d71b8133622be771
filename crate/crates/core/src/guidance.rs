//! Structure-guided reverse sampling and the test-time adaptation loop.
//!
//! The guidance operator is a linear low-pass filter: block-average
//! downsampling by a scale factor followed by upsampling back to the
//! original shape. During reverse sampling, each step nudges the sample
//! so the low-pass content of its clean estimate moves toward the
//! low-pass content of the reference image.

use alloc::format;


use crate::denoiser::NoisePredictor;
use crate::diffusion::{
    forward_sample, from_model_domain, reverse_step_with_eps, to_model_domain, NoiseSchedule,
    SigmaKind,
};
use crate::image::Image;
use crate::nn::Feat;
use crate::rng::Philox;
use crate::{fmath, CoreError};

/// Interpolation used on the way back up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

impl UpsampleMode {
    pub fn name(&self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "nearest" => Ok(UpsampleMode::Nearest),
            _ => Err(CoreError::InvalidArgument(format!("unknown upsample mode '{s}'"))),
        }
    }
}

/// Linear down-then-up resampling operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowPassFilter {
    pub scale: usize,
    pub upsample: UpsampleMode,
}

impl LowPassFilter {
    pub fn new(scale: usize, upsample: UpsampleMode) -> Result<Self, CoreError> {
        if scale == 0 {
            return Err(CoreError::InvalidArgument("scale factor must be positive".into()));
        }
        Ok(LowPassFilter { scale, upsample })
    }

    fn check(&self, x: &Feat) -> Result<(), CoreError> {
        if self.scale > x.height.min(x.width) {
            return Err(CoreError::InvalidArgument(format!(
                "scale factor {} exceeds image extent {}x{}",
                self.scale, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Apply the filter: block-average down by the scale factor, then
    /// upsample back to the input shape. Linear and unclamped.
    pub fn apply(&self, x: &Feat) -> Result<Feat, CoreError> {
        self.check(x)?;
        if self.scale == 1 {
            return Ok(x.clone());
        }
        let (h, w, n) = (x.height, x.width, self.scale);
        let (sh, sw) = (h.div_ceil(n), w.div_ceil(n));
        let mut out = Feat::zeros(x.channels, h, w);
        let mut small = alloc::vec![0.0; sh * sw];
        for c in 0..x.channels {
            block_mean_down(x.plane(c), h, w, n, &mut small, sh, sw);
            match self.upsample {
                UpsampleMode::Nearest => nearest_up(&small, sh, sw, out.plane_mut(c), h, w),
                UpsampleMode::Bilinear => bilinear_up(&small, sh, sw, out.plane_mut(c), h, w),
            }
        }
        Ok(out)
    }

    /// Apply the adjoint of the filter: `⟨apply(x), y⟩ = ⟨x, apply_adjoint(y)⟩`.
    pub fn apply_adjoint(&self, y: &Feat) -> Result<Feat, CoreError> {
        self.check(y)?;
        if self.scale == 1 {
            return Ok(y.clone());
        }
        let (h, w, n) = (y.height, y.width, self.scale);
        let (sh, sw) = (h.div_ceil(n), w.div_ceil(n));
        let mut out = Feat::zeros(y.channels, h, w);
        let mut small = alloc::vec![0.0; sh * sw];
        for c in 0..y.channels {
            small.fill(0.0);
            match self.upsample {
                UpsampleMode::Nearest => nearest_up_adjoint(y.plane(c), h, w, &mut small, sh, sw),
                UpsampleMode::Bilinear => bilinear_up_adjoint(y.plane(c), h, w, &mut small, sh, sw),
            }
            block_mean_down_adjoint(&small, sh, sw, out.plane_mut(c), h, w, n);
        }
        Ok(out)
    }
}

/// Average N×N blocks; partial edge blocks replicate the last row/column.
fn block_mean_down(src: &[f64], h: usize, w: usize, n: usize, dst: &mut [f64], sh: usize, sw: usize) {
    let inv = 1.0 / (n * n) as f64;
    for by in 0..sh {
        for bx in 0..sw {
            let mut acc = 0.0;
            for iy in 0..n {
                let sy = (by * n + iy).min(h - 1);
                for ix in 0..n {
                    let sx = (bx * n + ix).min(w - 1);
                    acc += src[sy * w + sx];
                }
            }
            dst[by * sw + bx] = acc * inv;
        }
    }
}

fn block_mean_down_adjoint(src: &[f64], sh: usize, sw: usize, dst: &mut [f64], h: usize, w: usize, n: usize) {
    let inv = 1.0 / (n * n) as f64;
    for by in 0..sh {
        for bx in 0..sw {
            let v = src[by * sw + bx] * inv;
            for iy in 0..n {
                let sy = (by * n + iy).min(h - 1);
                for ix in 0..n {
                    let sx = (bx * n + ix).min(w - 1);
                    dst[sy * w + sx] += v;
                }
            }
        }
    }
}

fn nearest_src(i: usize, big: usize, small: usize) -> usize {
    (((i as f64 + 0.5) * small as f64 / big as f64) as usize).min(small - 1)
}

fn nearest_up(src: &[f64], sh: usize, sw: usize, dst: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        let sy = nearest_src(y, h, sh);
        for x in 0..w {
            let sx = nearest_src(x, w, sw);
            dst[y * w + x] = src[sy * sw + sx];
        }
    }
}

fn nearest_up_adjoint(src: &[f64], h: usize, w: usize, dst: &mut [f64], sh: usize, sw: usize) {
    for y in 0..h {
        let sy = nearest_src(y, h, sh);
        for x in 0..w {
            let sx = nearest_src(x, w, sw);
            dst[sy * sw + sx] += src[y * w + x];
        }
    }
}

/// The four bilinear taps (clamped to edges) for one output position.
fn bilinear_taps(i: usize, big: usize, small: usize) -> ((usize, f64), (usize, f64)) {
    let pos = (i as f64 + 0.5) * small as f64 / big as f64 - 0.5;
    let f = fmath::floor(pos);
    let frac = pos - f;
    let i0 = (f as i64).clamp(0, small as i64 - 1) as usize;
    let i1 = (f as i64 + 1).clamp(0, small as i64 - 1) as usize;
    ((i0, 1.0 - frac), (i1, frac))
}

fn bilinear_up(src: &[f64], sh: usize, sw: usize, dst: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        let ((y0, wy0), (y1, wy1)) = bilinear_taps(y, h, sh);
        for x in 0..w {
            let ((x0, wx0), (x1, wx1)) = bilinear_taps(x, w, sw);
            dst[y * w + x] = src[y0 * sw + x0] * wy0 * wx0
                + src[y0 * sw + x1] * wy0 * wx1
                + src[y1 * sw + x0] * wy1 * wx0
                + src[y1 * sw + x1] * wy1 * wx1;
        }
    }
}

fn bilinear_up_adjoint(src: &[f64], h: usize, w: usize, dst: &mut [f64], sh: usize, sw: usize) {
    for y in 0..h {
        let ((y0, wy0), (y1, wy1)) = bilinear_taps(y, h, sh);
        for x in 0..w {
            let ((x0, wx0), (x1, wx1)) = bilinear_taps(x, w, sw);
            let v = src[y * w + x];
            dst[y0 * sw + x0] += v * wy0 * wx0;
            dst[y0 * sw + x1] += v * wy0 * wx1;
            dst[y1 * sw + x0] += v * wy1 * wx0;
            dst[y1 * sw + x1] += v * wy1 * wx1;
        }
    }
}

/// One-step estimate of the clean signal from a noisy one:
/// `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, unclamped.
pub fn estimate_x0(
    x_t: &Feat,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<Feat, CoreError> {
    if t < 1 || t > sched.len() {
        return Err(CoreError::TimestepOutOfRange { t, max: sched.len() });
    }
    let eps = model.predict(x_t, t);
    estimate_x0_with_eps(x_t, t, &eps, sched)
}

/// As [`estimate_x0`] with the noise estimate already evaluated.
pub fn estimate_x0_with_eps(
    x_t: &Feat,
    t: usize,
    eps: &Feat,
    sched: &NoiseSchedule,
) -> Result<Feat, CoreError> {
    if t < 1 || t > sched.len() {
        return Err(CoreError::TimestepOutOfRange { t, max: sched.len() });
    }
    if !x_t.same_shape(eps) {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{}x{}x{}", x_t.channels, x_t.height, x_t.width),
            got: format!("{}x{}x{}", eps.channels, eps.height, eps.width),
        });
    }
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / fmath::sqrt(ab);
    let sb = fmath::sqrt(1.0 - ab);
    let mut out = x_t.clone();
    for (o, (&x, &e)) in out.data.iter_mut().zip(x_t.data.iter().zip(eps.data.iter())) {
        *o = inv * (x - sb * e);
    }
    Ok(out)
}

/// Norm whose gradient steers the guidance step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceNorm {
    /// Plain l2 norm; gradient stabilized by `epsilon_div` near zero.
    #[default]
    L2,
    /// Squared l2 norm; smooth gradient at zero residual.
    L2Squared,
}

impl GuidanceNorm {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceNorm::L2 => "l2",
            GuidanceNorm::L2Squared => "l2_squared",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2" => Ok(GuidanceNorm::L2),
            "l2_squared" | "l2squared" => Ok(GuidanceNorm::L2Squared),
            _ => Err(CoreError::InvalidArgument(format!("unknown guidance norm '{s}'"))),
        }
    }
}

/// Pipeline variants: the full method, forward+reverse without
/// guidance, and guided reverse from pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AdaptMode {
    #[default]
    Full,
    ForwardReverse,
    ReverseGuidance,
}

impl AdaptMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptMode::Full => "full",
            AdaptMode::ForwardReverse => "forward_reverse",
            AdaptMode::ReverseGuidance => "reverse_guidance",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(AdaptMode::Full),
            "forward_reverse" | "forward+reverse" => Ok(AdaptMode::ForwardReverse),
            "reverse_guidance" | "reverse+guidance" => Ok(AdaptMode::ReverseGuidance),
            _ => Err(CoreError::InvalidArgument(format!("unknown adapt mode '{s}'"))),
        }
    }
}

impl core::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything the adaptation loop needs beyond the model and schedule.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Guidance step size w.
    pub step_size: f64,
    /// Low-pass scale factor N.
    pub scale: usize,
    /// Forward-diffusion depth; `full`/`forward_reverse` start here.
    pub t0: usize,
    pub norm: GuidanceNorm,
    pub mode: AdaptMode,
    /// Stabilizer for the l2 norm gradient near zero residual.
    pub epsilon_div: f64,
    pub upsample: UpsampleMode,
    /// Apply guidance every `stride`-th reverse step (1 = every step).
    pub stride: usize,
    /// Differentiate through the noise predictor instead of freezing it.
    pub grad_through_model: bool,
    pub sigma: SigmaKind,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            step_size: 6.0,
            scale: 4,
            t0: 100,
            norm: GuidanceNorm::L2,
            mode: AdaptMode::Full,
            epsilon_div: 1e-8,
            upsample: UpsampleMode::Bilinear,
            stride: 1,
            grad_through_model: false,
            sigma: SigmaKind::Beta,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<(), CoreError> {
        if !(self.step_size >= 0.0) {
            return Err(CoreError::InvalidArgument("step size w must be nonnegative".into()));
        }
        if self.scale == 0 {
            return Err(CoreError::InvalidArgument("scale factor must be positive".into()));
        }
        if self.t0 > sched.len() {
            return Err(CoreError::TimestepOutOfRange { t: self.t0, max: sched.len() });
        }
        if self.stride == 0 {
            return Err(CoreError::InvalidArgument("stride must be positive".into()));
        }
        if !(self.epsilon_div > 0.0) {
            return Err(CoreError::InvalidArgument("epsilon_div must be positive".into()));
        }
        Ok(())
    }

    fn filter(&self) -> Result<LowPassFilter, CoreError> {
        LowPassFilter::new(self.scale, self.upsample)
    }
}

/// Gradient of the residual norm with respect to the current sample,
/// with the clean estimate already computed from `eps`.
///
/// Under the frozen-model convention the closed forms are
/// `−(1/√ᾱ_t)·φᵀ(v/max(‖v‖, ε))` for l2 and `−(2/√ᾱ_t)·φᵀ(v)` for
/// squared l2, where `v = φ(x0_ref) − φ(x̂_0)`. With
/// `grad_through_model` the model's input Jacobian term is added.
#[allow(clippy::too_many_arguments)]
fn guidance_gradient_with_eps(
    x_t: &Feat,
    x0_ref: &Feat,
    x0_hat: &Feat,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Feat, CoreError> {
    let filter = cfg.filter()?;
    let lp_ref = filter.apply(x0_ref)?;
    let lp_hat = filter.apply(x0_hat)?;
    let mut v = lp_ref;
    for (a, &b) in v.data.iter_mut().zip(lp_hat.data.iter()) {
        *a -= b;
    }
    // cotangent into x̂_0: d‖v‖/dx̂_0 (or its squared-norm analogue)
    let cot = match cfg.norm {
        GuidanceNorm::L2 => {
            let norm = fmath::sqrt(v.data.iter().map(|&x| x * x).sum::<f64>());
            let denom = norm.max(cfg.epsilon_div);
            let mut c = filter.apply_adjoint(&v)?;
            for x in &mut c.data {
                *x = -*x / denom;
            }
            c
        }
        GuidanceNorm::L2Squared => {
            let mut c = filter.apply_adjoint(&v)?;
            for x in &mut c.data {
                *x = -2.0 * *x;
            }
            c
        }
    };
    let ab = sched.alpha_bar(t);
    let inv_sqrt_ab = 1.0 / fmath::sqrt(ab);
    let grad = if cfg.grad_through_model {
        // dx̂_0/dx_t = (1/√ᾱ)(I − √(1−ᾱ)·J_ε), applied transposed
        let jt = model.input_vjp(x_t, t, &cot).ok_or_else(|| {
            CoreError::InvalidArgument(
                "grad_through_model requires a model with an input VJP".into(),
            )
        })?;
        let sb = fmath::sqrt(1.0 - ab);
        let mut g = cot;
        for (gv, &jv) in g.data.iter_mut().zip(jt.data.iter()) {
            *gv = inv_sqrt_ab * (*gv - sb * jv);
        }
        g
    } else {
        let mut g = cot;
        for gv in &mut g.data {
            *gv *= inv_sqrt_ab;
        }
        g
    };
    if !grad.data.iter().all(|x| x.is_finite()) {
        return Err(CoreError::NonFinite(format!("guidance gradient at t={t}")));
    }
    Ok(grad)
}

/// Gradient of the residual norm at `x_t`, evaluating the model once.
pub fn guidance_gradient(
    x_t: &Feat,
    x0_ref: &Feat,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Feat, CoreError> {
    if t < 1 || t > sched.len() {
        return Err(CoreError::TimestepOutOfRange { t, max: sched.len() });
    }
    let eps = model.predict(x_t, t);
    let x0_hat = estimate_x0_with_eps(x_t, t, &eps, sched)?;
    guidance_gradient_with_eps(x_t, x0_ref, &x0_hat, t, model, sched, cfg)
}

/// One guided reverse step: the unguided ancestral candidate minus
/// `w` times the residual-norm gradient. With `w = 0` this is exactly
/// the unguided step.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    x_t: &Feat,
    x0_ref: &Feat,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    noise: &Feat,
) -> Result<Feat, CoreError> {
    if t < 1 || t > sched.len() {
        return Err(CoreError::TimestepOutOfRange { t, max: sched.len() });
    }
    if !x_t.same_shape(x0_ref) {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{}x{}x{}", x_t.channels, x_t.height, x_t.width),
            got: format!("{}x{}x{}", x0_ref.channels, x0_ref.height, x0_ref.width),
        });
    }
    let eps = model.predict(x_t, t);
    let cand = reverse_step_with_eps(x_t, t, &eps, sched, cfg.sigma, noise)?;
    if cfg.step_size == 0.0 {
        return Ok(cand);
    }
    let x0_hat = estimate_x0_with_eps(x_t, t, &eps, sched)?;
    let grad = guidance_gradient_with_eps(x_t, x0_ref, &x0_hat, t, model, sched, cfg)?;
    let mut out = cand;
    let w = cfg.step_size;
    for (o, &g) in out.data.iter_mut().zip(grad.data.iter()) {
        *o -= w * g;
    }
    Ok(out)
}

/// Project a target image toward the source domain.
///
/// `full`: diffuse the target forward to depth t0, then run guided
/// reverse steps back to t = 1 conditioning on the target itself.
/// `forward_reverse`: the same with the guidance weight forced to zero.
/// `reverse_guidance`: start from pure noise at t = T and run guided
/// steps the whole way down.
pub fn adapt(
    x_target: &Image,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Image, CoreError> {
    cfg.validate(sched)?;
    let x0_ref = to_model_domain(x_target);
    if cfg.scale > x0_ref.height.min(x0_ref.width) {
        return Err(CoreError::InvalidArgument(format!(
            "scale factor {} exceeds image extent {}x{}",
            cfg.scale, x0_ref.height, x0_ref.width
        )));
    }
    let mut rng = Philox::seed(seed);
    let mut local = cfg.clone();
    if matches!(cfg.mode, AdaptMode::ForwardReverse) {
        local.step_size = 0.0;
    }
    let start = match cfg.mode {
        AdaptMode::Full | AdaptMode::ForwardReverse => {
            if cfg.t0 == 0 {
                return Ok(x_target.clone());
            }
            cfg.t0
        }
        AdaptMode::ReverseGuidance => sched.len(),
    };
    let mut x = match cfg.mode {
        AdaptMode::Full | AdaptMode::ForwardReverse => {
            let mut eps = Feat::zeros(x0_ref.channels, x0_ref.height, x0_ref.width);
            for v in &mut eps.data {
                *v = rng.next_normal();
            }
            forward_sample(&x0_ref, start, &eps, sched)?
        }
        AdaptMode::ReverseGuidance => {
            let mut x = Feat::zeros(x0_ref.channels, x0_ref.height, x0_ref.width);
            for v in &mut x.data {
                *v = rng.next_normal();
            }
            x
        }
    };
    let mut noise = Feat::zeros(x0_ref.channels, x0_ref.height, x0_ref.width);
    for t in (1..=start).rev() {
        if t > 1 {
            for v in &mut noise.data {
                *v = rng.next_normal();
            }
        } else {
            noise.data.fill(0.0);
        }
        let guided = local.step_size > 0.0 && (start - t) % local.stride == 0;
        x = if guided {
            guided_reverse_step(&x, &x0_ref, t, model, sched, &local, &noise)?
        } else {
            let eps = model.predict(&x, t);
            reverse_step_with_eps(&x, t, &eps, sched, local.sigma, &noise)?
        };
    }
    Ok(from_model_domain(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn predict(&self, x: &Feat, _t: usize) -> Feat {
            Feat::zeros(x.channels, x.height, x.width)
        }
        fn input_vjp(&self, x: &Feat, _t: usize, _cot: &Feat) -> Option<Feat> {
            Some(Feat::zeros(x.channels, x.height, x.width))
        }
    }

    struct ConstPredictor(Feat);
    impl NoisePredictor for ConstPredictor {
        fn predict(&self, _x: &Feat, _t: usize) -> Feat {
            self.0.clone()
        }
        fn input_vjp(&self, x: &Feat, _t: usize, _cot: &Feat) -> Option<Feat> {
            Some(Feat::zeros(x.channels, x.height, x.width))
        }
    }

    fn rand_feat(c: usize, h: usize, w: usize, seed: u64) -> Feat {
        let mut rng = Philox::seed(seed);
        let mut f = Feat::zeros(c, h, w);
        for v in &mut f.data {
            *v = rng.next_normal();
        }
        f
    }

    #[test]
    fn scale_one_is_identity() {
        let x = rand_feat(3, 5, 7, 1);
        for up in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let f = LowPassFilter::new(1, up).unwrap();
            assert_eq!(f.apply(&x).unwrap().data, x.data);
            assert_eq!(f.apply_adjoint(&x).unwrap().data, x.data);
        }
    }

    #[test]
    fn constant_image_unchanged() {
        let x = Feat {
            data: vec![0.37; 3 * 8 * 8],
            ..Feat::zeros(3, 8, 8)
        };
        for up in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            for n in [2usize, 3, 4, 8] {
                let f = LowPassFilter::new(n, up).unwrap();
                let out = f.apply(&x).unwrap();
                for &v in &out.data {
                    assert!((v - 0.37).abs() < 1e-12, "n={n}");
                }
            }
        }
    }

    #[test]
    fn block_means_on_4x4_scale_2_nearest() {
        // hand-computed: each 2x2 output block equals its input block mean
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = Feat {
            data: vals,
            ..Feat::zeros(1, 4, 4)
        };
        let f = LowPassFilter::new(2, UpsampleMode::Nearest).unwrap();
        let out = f.apply(&x).unwrap();
        let m = |a: f64, b: f64, c: f64, d: f64| (a + b + c + d) / 4.0;
        let expect = [
            m(0.0, 1.0, 4.0, 5.0),
            m(2.0, 3.0, 6.0, 7.0),
            m(8.0, 9.0, 12.0, 13.0),
            m(10.0, 11.0, 14.0, 15.0),
        ];
        for y in 0..4 {
            for xx in 0..4 {
                let b = (y / 2) * 2 + xx / 2;
                assert!((out.data[y * 4 + xx] - expect[b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_inner_product_identity() {
        for up in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            for (h, w, n) in [(8usize, 8usize, 2usize), (8, 8, 4), (7, 9, 3), (10, 6, 4)] {
                let f = LowPassFilter::new(n, up).unwrap();
                for seed in 0..5 {
                    let x = rand_feat(3, h, w, 100 + seed);
                    let y = rand_feat(3, h, w, 200 + seed);
                    let fx = f.apply(&x).unwrap();
                    let fty = f.apply_adjoint(&y).unwrap();
                    let lhs: f64 = fx.data.iter().zip(&y.data).map(|(&a, &b)| a * b).sum();
                    let rhs: f64 = x.data.iter().zip(&fty.data).map(|(&a, &b)| a * b).sum();
                    assert!(
                        (lhs - rhs).abs() < 1e-10,
                        "up {up:?} h{h} w{w} n{n}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn nearest_divisible_filter_is_symmetric() {
        // with nearest upsampling and N | dims, the filter is an
        // orthogonal projection, so adjoint == forward
        let f = LowPassFilter::new(2, UpsampleMode::Nearest).unwrap();
        let x = rand_feat(1, 8, 8, 7);
        let a = f.apply(&x).unwrap();
        let b = f.apply_adjoint(&x).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_is_linear() {
        let f = LowPassFilter::new(4, UpsampleMode::Bilinear).unwrap();
        let x = rand_feat(3, 8, 8, 8);
        let y = rand_feat(3, 8, 8, 9);
        let (a, b) = (1.7, -0.6);
        let mut combo = x.clone();
        for (cv, (&xv, &yv)) in combo.data.iter_mut().zip(x.data.iter().zip(y.data.iter())) {
            *cv = a * xv + b * yv;
        }
        let lhs = f.apply(&combo).unwrap();
        let fx = f.apply(&x).unwrap();
        let fy = f.apply(&y).unwrap();
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (a * fx.data[i] + b * fy.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_x0_cases() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = rand_feat(1, 4, 4, 10);
        let t = 6;
        let got = estimate_x0(&x, t, &ZeroPredictor, &s).unwrap();
        let inv = 1.0 / s.alpha_bar(t).sqrt();
        for (g, xv) in got.data.iter().zip(&x.data) {
            assert!((g - inv * xv).abs() < 1e-12);
        }

        // a predictor that returns the exact eps inverts the forward map
        let x0 = rand_feat(1, 4, 4, 11);
        let eps = rand_feat(1, 4, 4, 12);
        let x_t = forward_sample(&x0, t, &eps, &s).unwrap();
        let model = ConstPredictor(eps);
        let rec = estimate_x0(&x_t, t, &model, &s).unwrap();
        for (r, xv) in rec.data.iter().zip(&x0.data) {
            assert!((r - xv).abs() < 1e-10);
        }
        assert!(estimate_x0(&x, 0, &ZeroPredictor, &s).is_err());
        assert!(estimate_x0(&x, 11, &ZeroPredictor, &s).is_err());
    }

    #[test]
    fn zero_weight_reduces_to_unguided_bit_exactly() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = rand_feat(3, 8, 8, 13);
        let x0_ref = rand_feat(3, 8, 8, 14);
        let noise = rand_feat(3, 8, 8, 15);
        let eps = rand_feat(3, 8, 8, 16);
        let model = ConstPredictor(eps.clone());
        let cfg = GuidanceConfig {
            step_size: 0.0,
            ..GuidanceConfig::default()
        };
        let guided = guided_reverse_step(&x, &x0_ref, 5, &model, &s, &cfg, &noise).unwrap();
        let plain = reverse_step_with_eps(&x, 5, &eps, &s, SigmaKind::Beta, &noise).unwrap();
        assert_eq!(guided.data, plain.data);
    }

    #[test]
    fn zero_residual_gives_unguided_output() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = rand_feat(3, 8, 8, 17);
        let noise = rand_feat(3, 8, 8, 18);
        let eps = rand_feat(3, 8, 8, 19);
        let model = ConstPredictor(eps.clone());
        // reference whose low-pass equals the estimate's low-pass exactly
        let x0_hat = estimate_x0(&x, 5, &model, &s).unwrap();
        for norm in [GuidanceNorm::L2, GuidanceNorm::L2Squared] {
            let cfg = GuidanceConfig {
                step_size: 3.0,
                norm,
                ..GuidanceConfig::default()
            };
            let guided = guided_reverse_step(&x, &x0_hat, 5, &model, &s, &cfg, &noise).unwrap();
            let plain = reverse_step_with_eps(&x, 5, &eps, &s, SigmaKind::Beta, &noise).unwrap();
            for (a, b) in guided.data.iter().zip(&plain.data) {
                assert!((a - b).abs() < 1e-9, "norm {norm:?}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_frozen_model() {
        let s = NoiseSchedule::linear(20, 0.01, 0.1).unwrap();
        let t = 9;
        let x = rand_feat(1, 8, 8, 20);
        let x0_ref = rand_feat(1, 8, 8, 21);
        let eps = rand_feat(1, 8, 8, 22);
        let model = ConstPredictor(eps.clone());
        for norm in [GuidanceNorm::L2, GuidanceNorm::L2Squared] {
            let cfg = GuidanceConfig {
                norm,
                scale: 4,
                ..GuidanceConfig::default()
            };
            let grad = guidance_gradient(&x, &x0_ref, t, &model, &s, &cfg).unwrap();
            let filter = cfg.filter().unwrap();
            let scalar = |xq: &Feat| -> f64 {
                let x0_hat = estimate_x0_with_eps(xq, t, &eps, &s).unwrap();
                let d = filter
                    .apply(&x0_ref)
                    .unwrap()
                    .data
                    .iter()
                    .zip(filter.apply(&x0_hat).unwrap().data.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>();
                match norm {
                    GuidanceNorm::L2 => d.sqrt(),
                    GuidanceNorm::L2Squared => d,
                }
            };
            let mut xp = x.clone();
            let h = 1e-5;
            for i in (0..xp.data.len()).step_by(5) {
                let orig = xp.data[i];
                xp.data[i] = orig + h;
                let up = scalar(&xp);
                xp.data[i] = orig - h;
                let down = scalar(&xp);
                xp.data[i] = orig;
                let fdg = (up - down) / (2.0 * h);
                assert!(
                    (fdg - grad.data[i]).abs() <= 1e-4 * (1.0 + fdg.abs()),
                    "{norm:?} slot {i}: fd {fdg} analytic {}",
                    grad.data[i]
                );
            }
        }
    }

    #[test]
    fn guided_step_does_not_increase_frozen_distance() {
        // small-w descent property on the frozen-model distance
        let s = NoiseSchedule::linear(20, 0.01, 0.1).unwrap();
        let t = 8;
        let x = rand_feat(3, 8, 8, 23);
        let x0_ref = rand_feat(3, 8, 8, 24);
        let eps = rand_feat(3, 8, 8, 25);
        let model = ConstPredictor(eps.clone());
        let noise = Feat::zeros(3, 8, 8);
        let filter = LowPassFilter::new(4, UpsampleMode::Bilinear).unwrap();
        let dist = |y: &Feat| -> f64 {
            let x0_hat = estimate_x0_with_eps(y, t, &eps, &s).unwrap();
            filter
                .apply(&x0_ref)
                .unwrap()
                .data
                .iter()
                .zip(filter.apply(&x0_hat).unwrap().data.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let unguided = reverse_step_with_eps(&x, t, &eps, &s, SigmaKind::Beta, &noise).unwrap();
        let cfg = GuidanceConfig {
            step_size: 1e-3,
            ..GuidanceConfig::default()
        };
        let guided = guided_reverse_step(&x, &x0_ref, t, &model, &s, &cfg, &noise).unwrap();
        assert!(dist(&guided) <= dist(&unguided) + 1e-12);
    }

    #[test]
    fn adapt_degenerate_t0_returns_input() {
        let s = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
        let cfg = GuidanceConfig {
            t0: 0,
            ..GuidanceConfig::default()
        };
        let out = adapt(&img, &ZeroPredictor, &s, &cfg, 1).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn adapt_is_deterministic_and_unit_range() {
        let s = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x + c) % 11) as f64 / 11.0);
        for mode in [AdaptMode::Full, AdaptMode::ForwardReverse, AdaptMode::ReverseGuidance] {
            let cfg = GuidanceConfig {
                t0: 5,
                mode,
                scale: 2,
                step_size: 0.5,
                ..GuidanceConfig::default()
            };
            let a = adapt(&img, &ZeroPredictor, &s, &cfg, 42).unwrap();
            let b = adapt(&img, &ZeroPredictor, &s, &cfg, 42).unwrap();
            assert_eq!(a, b, "{mode:?}");
            assert!(a.is_unit_range());
            assert!(a.same_shape(&img));
        }
    }

    #[test]
    fn forward_reverse_equals_full_with_zero_weight() {
        let s = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let img = Image::from_fn(8, 8, 1, |y, x, _| ((y ^ x) % 5) as f64 / 5.0);
        let base = GuidanceConfig {
            t0: 6,
            scale: 2,
            ..GuidanceConfig::default()
        };
        let full0 = adapt(
            &img,
            &ZeroPredictor,
            &s,
            &GuidanceConfig { step_size: 0.0, mode: AdaptMode::Full, ..base.clone() },
            7,
        )
        .unwrap();
        let fr = adapt(
            &img,
            &ZeroPredictor,
            &s,
            &GuidanceConfig { mode: AdaptMode::ForwardReverse, ..base },
            7,
        )
        .unwrap();
        assert_eq!(full0, fr);
    }
}
