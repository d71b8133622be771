//! Class-unconditional DDPM: noise schedule, forward and reverse
//! processes, the simplified training loss, the trainer, and the
//! unconditional sampler.
//!
//! Pixel data enters in `[0, 1]` and is mapped to `[-1, 1]` at this
//! module's boundary; all process math runs unclamped in that domain.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::{EpsilonNet, NoisePredictor};
use crate::image::Image;
use crate::nn::{Feat, GradExecutor, Grads, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, Philox};
use crate::{fmath, CoreError};

/// The β/α/ᾱ sequences over timesteps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, CoreError> {
        if t_max < 1 {
            return Err(CoreError::InvalidArgument("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule from explicit β values. Zero β is tolerated here so tests
    /// can build degenerate schedules; `linear` rejects it.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, CoreError> {
        if betas.is_empty() {
            return Err(CoreError::InvalidArgument("empty beta sequence".into()));
        }
        if !betas.iter().all(|b| b.is_finite() && (0.0..1.0).contains(b)) {
            return Err(CoreError::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check_t(&self, t: usize) -> Result<(), CoreError> {
        if t < 1 || t > self.len() {
            return Err(CoreError::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    /// β_t for t in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, the running product of α up to t.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-process variance σ_t² under the given convention.
    pub fn sigma_sq(&self, t: usize, kind: SigmaKind) -> f64 {
        match kind {
            SigmaKind::Beta => self.beta(t),
            SigmaKind::PosteriorBeta => {
                let prev = if t == 1 { 1.0 } else { self.alpha_bar(t - 1) };
                (1.0 - prev) / (1.0 - self.alpha_bar(t)) * self.beta(t)
            }
        }
    }
}

/// Which reverse-process variance to use: the constant β_t choice
/// (default) or the posterior variance β̃_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaKind {
    #[default]
    Beta,
    PosteriorBeta,
}

impl SigmaKind {
    pub fn name(&self) -> &'static str {
        match self {
            SigmaKind::Beta => "beta",
            SigmaKind::PosteriorBeta => "posterior",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "beta" => Ok(SigmaKind::Beta),
            "posterior" | "posterior_beta" => Ok(SigmaKind::PosteriorBeta),
            _ => Err(CoreError::InvalidArgument(format!("unknown sigma kind '{s}'"))),
        }
    }
}

fn check_same_shape(a: &Feat, b: &Feat) -> Result<(), CoreError> {
    if !a.same_shape(b) {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{}x{}x{}", a.channels, a.height, a.width),
            got: format!("{}x{}x{}", b.channels, b.height, b.width),
        });
    }
    Ok(())
}

/// Closed-form forward marginal: `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`, unclamped.
pub fn forward_sample(x0: &Feat, t: usize, eps: &Feat, sched: &NoiseSchedule) -> Result<Feat, CoreError> {
    sched.check_t(t)?;
    check_same_shape(x0, eps)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (fmath::sqrt(ab), fmath::sqrt(1.0 - ab));
    let mut out = x0.clone();
    for (o, (&x, &e)) in out.data.iter_mut().zip(x0.data.iter().zip(eps.data.iter())) {
        *o = sa * x + sb * e;
    }
    Ok(out)
}

/// Single Markov step of the forward chain:
/// `x_t = √(1−β_t)·x_{t−1} + √β_t·noise`.
pub fn forward_step(
    x_prev: &Feat,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Feat,
) -> Result<Feat, CoreError> {
    sched.check_t(t)?;
    check_same_shape(x_prev, noise)?;
    let b = sched.beta(t);
    let (sa, sb) = (fmath::sqrt(1.0 - b), fmath::sqrt(b));
    let mut out = x_prev.clone();
    for (o, (&x, &e)) in out.data.iter_mut().zip(x_prev.data.iter().zip(noise.data.iter())) {
        *o = sa * x + sb * e;
    }
    Ok(out)
}

/// One ancestral reverse step given a precomputed noise estimate:
/// `μ + σ_t·noise` with `μ = (x_t − (β_t/√(1−ᾱ_t))·eps)/√α_t`.
/// The noise term is suppressed at t = 1.
pub fn reverse_step_with_eps(
    x_t: &Feat,
    t: usize,
    eps_pred: &Feat,
    sched: &NoiseSchedule,
    sigma: SigmaKind,
    noise: &Feat,
) -> Result<Feat, CoreError> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_pred)?;
    check_same_shape(x_t, noise)?;
    let inv_sqrt_a = 1.0 / fmath::sqrt(sched.alpha(t));
    let b = sched.beta(t);
    // β/√(1−ᾱ) → 0 in the degenerate all-zero-β test schedules
    let coef = if b == 0.0 { 0.0 } else { b / fmath::sqrt(1.0 - sched.alpha_bar(t)) };
    let s = if t > 1 { fmath::sqrt(sched.sigma_sq(t, sigma)) } else { 0.0 };
    let mut out = x_t.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        *o = inv_sqrt_a * (x_t.data[i] - coef * eps_pred.data[i]) + s * noise.data[i];
    }
    Ok(out)
}

/// One ancestral reverse step, evaluating the model once.
pub fn reverse_step(
    x_t: &Feat,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    sigma: SigmaKind,
    noise: &Feat,
) -> Result<Feat, CoreError> {
    sched.check_t(t)?;
    let eps = model.predict(x_t, t);
    reverse_step_with_eps(x_t, t, &eps, sched, sigma, noise)
}

/// The simplified DDPM objective for one (x0, t, eps) triple: per-pixel
/// mean of `(ε̂(x_t, t) − eps)²`.
pub fn training_loss(
    model: &dyn NoisePredictor,
    x0: &Feat,
    t: usize,
    eps: &Feat,
    sched: &NoiseSchedule,
) -> Result<f64, CoreError> {
    let x_t = forward_sample(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t);
    let n = pred.data.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(eps.data.iter())
        .map(|(&p, &e)| (p - e) * (p - e))
        .sum::<f64>()
        / n)
}

/// Map a unit-range image into the `[-1, 1]` model domain.
pub fn to_model_domain(img: &Image) -> Feat {
    let mut f = Feat::from_image(img);
    for v in &mut f.data {
        *v = 2.0 * *v - 1.0;
    }
    f
}

/// Map a model-domain tensor back to a unit-range image, clamping
/// explicitly at this boundary.
pub fn from_model_domain(f: &Feat) -> Image {
    f.map(|v| 0.5 * (v + 1.0)).to_image().clamp_unit()
}

/// Hyperparameters for the two trainers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_interval: usize,
    /// Augment with horizontal flips.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_interval: 0,
            hflip: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn flip_horizontal(x: &Feat) -> Feat {
    let (c, h, w) = (x.channels, x.height, x.width);
    let mut out = x.clone();
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[y * w + (w - 1 - xx)];
            }
        }
    }
    out
}

/// Fisher-Yates shuffle driven by the given stream.
pub(crate) fn shuffle_indices(n: usize, rng: &mut Philox) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below((i + 1) as u32) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Convert a dataset of unit-range images to model-domain tensors,
/// checking shape agreement.
fn prepare_dataset(dataset: &[Image], model: &EpsilonNet) -> Result<Vec<Feat>, CoreError> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidArgument("training dataset is empty".into()));
    }
    let first = &dataset[0];
    for img in dataset {
        if !img.same_shape(first) {
            return Err(CoreError::ShapeMismatch {
                expected: first.shape_string(),
                got: img.shape_string(),
            });
        }
    }
    if first.channels() != model.img_channels {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} channels", model.img_channels),
            got: format!("{} channels", first.channels()),
        });
    }
    Ok(dataset.iter().map(to_model_domain).collect())
}

/// Train the denoiser on the simplified objective.
///
/// Per optimizer step: draw a shuffled batch, per sample draw t uniform
/// in `1..=T` and eps ~ N(0, I), average the per-sample gradients in
/// index order, and apply one optimizer update. Per-sample randomness is
/// derived from (seed, step, slot) so results do not depend on the
/// executor's scheduling.
pub fn train(
    model: &mut EpsilonNet,
    dataset: &[Image],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    exec: &dyn GradExecutor,
    mut on_checkpoint: impl FnMut(usize, &EpsilonNet),
) -> Result<Vec<f64>, CoreError> {
    cfg.validate()?;
    let feats = prepare_dataset(dataset, model)?;
    let t_max = sched.len();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params());
    let mut history = Vec::new();
    let mut step: usize = 0;
    for epoch in 0..cfg.epochs {
        let mut order_rng = Philox::seed(derive_seed(cfg.seed, &[b"shuffle", &(epoch as u64).to_le_bytes()]));
        let order = shuffle_indices(feats.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step_u64 = step as u64;
            let task = |k: usize| -> (Grads, f64) {
                let mut rng = Philox::seed(derive_seed(
                    cfg.seed,
                    &[b"sample", &step_u64.to_le_bytes(), &(k as u64).to_le_bytes()],
                ));
                let t = 1 + rng.next_below(t_max as u32) as usize;
                let x0_ref = &feats[chunk[k]];
                let x0 = if cfg.hflip && rng.next_f64() < 0.5 {
                    flip_horizontal(x0_ref)
                } else {
                    x0_ref.clone()
                };
                let mut eps = Feat::zeros(x0.channels, x0.height, x0.width);
                for v in &mut eps.data {
                    *v = rng.next_normal();
                }
                let x_t = forward_sample(&x0, t, &eps, sched).expect("validated shapes");
                let (pred, cache) = model.forward_cached(&x_t, t);
                let n = pred.data.len() as f64;
                let mut loss = 0.0;
                let mut dout = pred.clone();
                for (d, (&p, &e)) in dout.data.iter_mut().zip(pred.data.iter().zip(eps.data.iter())) {
                    let r = p - e;
                    loss += r * r;
                    *d = 2.0 * r / n;
                }
                let (grads, _) = model.backward(&cache, &dout, false);
                (grads, loss / n)
            };
            let results = exec.run(chunk.len(), &task);
            let mut grads = Grads::zeros_like(&model.params());
            let mut loss = 0.0;
            for (g, l) in &results {
                grads.add_assign(g);
                loss += l;
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.scale(scale);
            loss *= scale;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "training diverged at step {step} (loss {loss})"
                )));
            }
            optimizer.apply(model.params_mut(), &grads);
            history.push(loss);
            step += 1;
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                on_checkpoint(step, model);
            }
        }
    }
    Ok(history)
}

/// Unconditional ancestral sampling: draw `x_T ~ N(0, I)`, run the
/// reverse chain down to t = 1, and clamp into `[0, 1]`.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    height: usize,
    width: usize,
    channels: usize,
    sigma: SigmaKind,
    seed: u64,
) -> Result<Image, CoreError> {
    let mut rng = Philox::seed(seed);
    let mut x = Feat::zeros(channels, height, width);
    for v in &mut x.data {
        *v = rng.next_normal();
    }
    let mut noise = Feat::zeros(channels, height, width);
    for t in (1..=sched.len()).rev() {
        if t > 1 {
            for v in &mut noise.data {
                *v = rng.next_normal();
            }
        } else {
            noise.data.fill(0.0);
        }
        x = reverse_step(&x, t, model, sched, sigma, &noise)?;
    }
    Ok(from_model_domain(&x))
}
