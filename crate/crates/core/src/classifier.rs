//! Source-domain classifier: probability predictions, confidence and
//! entropy, and the cross-entropy trainer.
//!
//! The network is a small convolutional stack (conv/SiLU blocks with two
//! stride-2 reductions, global average pooling, linear head) built from
//! the same hand-backpropagated layer vocabulary as the denoiser.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::to_model_domain;
use crate::image::Image;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, silu_backward, silu_forward, Conv2d, Feat,
    GradExecutor, Grads, Linear, Optimizer,
};
use crate::rng::{derive_seed, Philox};
use crate::{fmath, CoreError};

/// Probability vector on the class simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    probs: Vec<f64>,
}

impl Prediction {
    /// Validate entries: finite, nonnegative, summing to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self, CoreError> {
        if probs.is_empty() {
            return Err(CoreError::InvalidArgument("empty probability vector".into()));
        }
        if !probs.iter().all(|p| p.is_finite() && *p >= 0.0) {
            return Err(CoreError::NonFinite("probability entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Prediction { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Prediction {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stabilized (max-subtracted) softmax.
pub fn softmax(logits: &[f64]) -> Result<Prediction, CoreError> {
    if logits.is_empty() {
        return Err(CoreError::InvalidArgument("empty logit vector".into()));
    }
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(CoreError::NonFinite("logit".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| fmath::exp(l - m)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Prediction {
        probs: exps.iter().map(|&e| e / sum).collect(),
    })
}

/// Highest class probability.
pub fn confidence(p: &Prediction) -> f64 {
    p.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &Prediction) -> f64 {
    -p.probs
        .iter()
        .map(|&v| if v > 0.0 { v * fmath::ln(v) } else { 0.0 })
        .sum::<f64>()
}

/// Scores images into class probabilities. Implemented by
/// [`ClassifierNet`] and by external-prediction tables in the harness.
pub trait Predictor: Sync {
    fn classes(&self) -> usize;
    fn predict(&self, img: &Image) -> Result<Prediction, CoreError>;
}

/// Small convolutional classifier over C classes.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub img_channels: usize,
    pub base_width: usize,
    pub classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl ClassifierNet {
    pub fn new(
        img_channels: usize,
        input_height: usize,
        input_width: usize,
        base_width: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        assert!(input_height % 4 == 0 && input_width % 4 == 0);
        let mut rng = Philox::seed(seed);
        let f = base_width;
        let convs = vec![
            Conv2d::init(img_channels, f, 1, &mut rng),
            Conv2d::init(f, 2 * f, 2, &mut rng),
            Conv2d::init(2 * f, 2 * f, 1, &mut rng),
            Conv2d::init(2 * f, 4 * f, 2, &mut rng),
            Conv2d::init(4 * f, 4 * f, 1, &mut rng),
        ];
        let head = Linear::init(4 * f, classes, &mut rng);
        ClassifierNet {
            img_channels,
            base_width,
            classes,
            input_height,
            input_width,
            convs,
            head,
        }
    }

    fn check_input(&self, img: &Image) -> Result<(), CoreError> {
        if img.height() != self.input_height
            || img.width() != self.input_width
            || img.channels() != self.img_channels
        {
            return Err(CoreError::ShapeMismatch {
                expected: format!(
                    "{}x{}x{}",
                    self.input_height, self.input_width, self.img_channels
                ),
                got: img.shape_string(),
            });
        }
        Ok(())
    }

    /// Raw class scores for a unit-range image.
    pub fn logits(&self, img: &Image) -> Result<Vec<f64>, CoreError> {
        self.check_input(img)?;
        let mut a = to_model_domain(img);
        for conv in &self.convs {
            a = silu_forward(&conv.forward(&a));
        }
        Ok(self.head.forward(&global_avg_pool(&a)))
    }

    /// Forward keeping intermediates, for the trainer.
    fn forward_cached(&self, x: &Feat) -> (Vec<f64>, ClsCache) {
        let mut pres = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let pre = conv.forward(&cur);
            let act = silu_forward(&pre);
            pres.push(pre);
            acts.push(act.clone());
            cur = act;
        }
        let pooled = global_avg_pool(&cur);
        let logits = self.head.forward(&pooled);
        (
            logits,
            ClsCache {
                input: x.clone(),
                pres,
                acts,
                pooled,
            },
        )
    }

    /// Backward from a logit gradient; parameter gradients in declared order.
    fn backward(&self, cache: &ClsCache, dlogits: &[f64]) -> Grads {
        let mut g = Grads::zeros_like(&self.params());
        let n = self.convs.len();
        let head_w = 2 * n;
        let dpooled = {
            let [gw, gb] = g
                .0
                .get_disjoint_mut([head_w, head_w + 1])
                .expect("disjoint grad indices");
            self.head
                .backward(&cache.pooled, dlogits, gw, gb, true)
                .expect("head backward returns dx")
        };
        let last = &cache.acts[n - 1];
        let mut dact = global_avg_pool_backward(last.channels, last.height, last.width, &dpooled);
        for i in (0..n).rev() {
            let dpre = silu_backward(&cache.pres[i], &dact);
            let x = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            let [gw, gb] = g
                .0
                .get_disjoint_mut([2 * i, 2 * i + 1])
                .expect("disjoint grad indices");
            let dx = self.convs[i]
                .backward(x, &dpre, gw, gb, i > 0)
                .unwrap_or_else(|| Feat::zeros(1, 1, 1));
            dact = dx;
        }
        g
    }

    /// Parameter slices in declared (checkpoint) order: each conv's
    /// weight and bias in depth order, then the head.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            p.push(&c.weight);
            p.push(&c.bias);
        }
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            p.push(&mut c.weight);
            p.push(&mut c.bias);
        }
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Predictor for ClassifierNet {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, img: &Image) -> Result<Prediction, CoreError> {
        softmax(&self.logits(img)?)
    }
}

struct ClsCache {
    input: Feat,
    pres: Vec<Feat>,
    acts: Vec<Feat>,
    pooled: Vec<f64>,
}

/// Cross-entropy of a logit vector against an integer label, together
/// with the logit gradient (softmax minus one-hot).
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), CoreError> {
    if label >= logits.len() {
        return Err(CoreError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let loss = -fmath::ln(p.probs()[label].max(1e-300));
    let mut grad = p.probs().to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Accuracy/loss record for one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

fn accuracy(net: &ClassifierNet, data: &[(Feat, usize)], exec: &dyn GradExecutor) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let task = |i: usize| -> (Grads, f64) {
        let (x, label) = &data[i];
        let mut a = x.clone();
        for conv in &net.convs {
            a = silu_forward(&conv.forward(&a));
        }
        let logits = net.head.forward(&global_avg_pool(&a));
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        (Grads(Vec::new()), if best == *label { 1.0 } else { 0.0 })
    };
    let results = exec.run(data.len(), &task);
    results.iter().map(|(_, c)| c).sum::<f64>() / data.len() as f64
}

/// Train the classifier with cross-entropy. Returns per-epoch stats.
///
/// Samples are drawn in shuffled batches; gradients reduce in index
/// order so results are independent of the executor's worker count.
pub fn train_classifier(
    net: &mut ClassifierNet,
    train: &[(Image, usize)],
    val: &[(Image, usize)],
    cfg: &crate::diffusion::TrainConfig,
    exec: &dyn GradExecutor,
) -> Result<Vec<EpochStats>, CoreError> {
    if train.is_empty() {
        return Err(CoreError::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
    }
    let prep = |set: &[(Image, usize)]| -> Result<Vec<(Feat, usize)>, CoreError> {
        set.iter()
            .map(|(img, label)| {
                net.check_input(img)?;
                if *label >= net.classes {
                    return Err(CoreError::InvalidArgument(format!(
                        "label {label} out of range for {} classes",
                        net.classes
                    )));
                }
                Ok((to_model_domain(img), *label))
            })
            .collect()
    };
    let train_feats = prep(train)?;
    let val_feats = prep(val)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &net.params());
    let mut stats = Vec::new();
    let mut step: usize = 0;
    for epoch in 0..cfg.epochs {
        let mut order_rng = Philox::seed(derive_seed(
            cfg.seed,
            &[b"cls-shuffle", &(epoch as u64).to_le_bytes()],
        ));
        let order = crate::diffusion::shuffle_indices(train_feats.len(), &mut order_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let net_ref = &*net;
            let task = |k: usize| -> (Grads, f64) {
                let (x, label) = &train_feats[chunk[k]];
                let (logits, cache) = net_ref.forward_cached(x);
                let (loss, dlogits) =
                    cross_entropy_with_grad(&logits, *label).expect("validated labels");
                (net_ref.backward(&cache, &dlogits), loss)
            };
            let results = exec.run(chunk.len(), &task);
            let mut grads = Grads::zeros_like(&net.params());
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
                    "classifier training diverged at step {step} (loss {loss})"
                )));
            }
            optimizer.apply(net.params_mut(), &grads);
            loss_sum += loss;
            loss_count += 1;
            step += 1;
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            train_accuracy: accuracy(net, &train_feats, exec),
            val_accuracy: accuracy(net, &val_feats, exec),
        });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::TrainConfig;
    use crate::nn::SerialExecutor;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-15);
        assert!((p.probs()[1] - 0.5).abs() < 1e-15);

        // large equal logits: stabilized, uniform, no overflow
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_matches_unstabilized_route_on_moderate_logits() {
        // second algebraic route: direct exp ratio without max subtraction
        let mut rng = Philox::seed(3);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.next_normal() * 3.0).collect();
            let p = softmax(&logits).unwrap();
            let raw: Vec<f64> = logits.iter().map(|&l| fmath::exp(l)).collect();
            let sum: f64 = raw.iter().sum();
            for (a, b) in p.probs().iter().zip(raw.iter().map(|&e| e / sum)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = [0.3, -1.2, 2.4, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|&l| l + 123.456).collect();
        let a = softmax(&logits).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_and_entropy_examples() {
        let u4 = Prediction::uniform(4);
        assert!((confidence(&u4) - 0.25).abs() < 1e-15);
        assert!((entropy(&u4) - fmath::ln(4.0)).abs() < 1e-12);

        let onehot = Prediction::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!((confidence(&onehot) - 1.0).abs() < 1e-15);
        assert_eq!(entropy(&onehot), 0.0);

        let p = Prediction::new(vec![0.7, 0.3]).unwrap();
        assert!((confidence(&p) - 0.7).abs() < 1e-15);
        let half = Prediction::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy(&half) - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_classifier_is_uniform() {
        let mut net = ClassifierNet::new(3, 8, 8, 2, 4, 5);
        for p in net.params_mut() {
            p.fill(0.0);
        }
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y + 2 * x + c) % 9) as f64 / 9.0);
        let pred = net.predict(&img).unwrap();
        for &v in pred.probs() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_simplex_enforced_and_deterministic() {
        let net = ClassifierNet::new(1, 8, 8, 2, 3, 6);
        let img = Image::from_fn(8, 8, 1, |y, x, _| ((y * x) % 5) as f64 / 5.0);
        let a = net.predict(&img).unwrap();
        let b = net.predict(&img).unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(confidence(&a) >= 1.0 / 3.0 - 1e-12);
        assert!(entropy(&a) <= fmath::ln(3.0) + 1e-12);

        let wrong = Image::zeros(4, 4, 1);
        assert!(net.predict(&wrong).is_err());
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut net = ClassifierNet::new(1, 4, 4, 2, 3, 7);
        let img = Image::from_fn(4, 4, 1, |y, x, _| ((3 * y + x) % 7) as f64 / 7.0);
        let x = to_model_domain(&img);
        let label = 1usize;
        let (logits, cache) = net.forward_cached(&x);
        let (_, dlogits) = cross_entropy_with_grad(&logits, label).unwrap();
        let grads = net.backward(&cache, &dlogits);

        for ti in 0..grads.0.len() {
            let len = grads.0[ti].len();
            let step = (len / 5).max(1);
            for i in (0..len).step_by(step) {
                let h = 1e-5;
                let orig = net.params()[ti][i];
                net.params_mut()[ti][i] = orig + h;
                let l_up = {
                    let (lg, _) = net.forward_cached(&x);
                    cross_entropy_with_grad(&lg, label).unwrap().0
                };
                net.params_mut()[ti][i] = orig - h;
                let l_dn = {
                    let (lg, _) = net.forward_cached(&x);
                    cross_entropy_with_grad(&lg, label).unwrap().0
                };
                net.params_mut()[ti][i] = orig;
                let fd = (l_up - l_dn) / (2.0 * h);
                let an = grads.0[ti][i];
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + fd.abs().max(an.abs())),
                    "tensor {ti} slot {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let mut net = ClassifierNet::new(1, 4, 4, 2, 2, 8);
        let before: Vec<f64> = net.params().iter().flat_map(|p| p.iter().copied()).collect();
        let data = vec![(Image::constant(4, 4, 1, 0.4), 0usize)];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let stats = train_classifier(&mut net, &data, &[], &cfg, &SerialExecutor).unwrap();
        assert!(stats.is_empty());
        let after: Vec<f64> = net.params().iter().flat_map(|p| p.iter().copied()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        // two classes: bright left half vs bright right half
        let mut rng = Philox::seed(9);
        let mut data = Vec::new();
        for i in 0..60 {
            let class = i % 2;
            let img = Image::from_fn(8, 8, 1, |_, x, _| {
                let base = if (x < 4) == (class == 0) { 0.8 } else { 0.2 };
                (base + 0.05 * rng.next_normal()).clamp(0.0, 1.0)
            });
            data.push((img, class));
        }
        let (train, val) = data.split_at(40);
        let mut net = ClassifierNet::new(1, 8, 8, 2, 2, 10);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let stats = train_classifier(&mut net, train, val, &cfg, &SerialExecutor).unwrap();
        let last = stats.last().unwrap();
        assert!(
            last.val_accuracy >= 0.9,
            "val accuracy {} after {} epochs",
            last.val_accuracy,
            stats.len()
        );
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut net = ClassifierNet::new(1, 4, 4, 2, 2, 11);
        let data = vec![(Image::constant(4, 4, 1, 0.4), 5usize)];
        let cfg = TrainConfig::default();
        assert!(train_classifier(&mut net, &data, &[], &cfg, &SerialExecutor).is_err());
    }
}
