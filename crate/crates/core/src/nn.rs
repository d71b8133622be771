//! Minimal layer vocabulary with hand-derived backward rules.
//!
//! The networks in this workspace are built from exactly these pieces:
//! 3×3 convolution (stride 1 or 2, zero padding), SiLU, 2× nearest
//! upsampling, elementwise addition, per-channel bias injection, linear
//! maps, and global average pooling. Each op has a matching backward
//! function, so no autodiff framework is needed and every gradient can
//! be checked against finite differences.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::image::Image;
use crate::rng::Philox;

/// Planar (channel-major) activation tensor: `data[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Feat {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn same_shape(&self, other: &Feat) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    /// Interleaved image → planar tensor (values copied as-is).
    pub fn from_image(img: &Image) -> Self {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut out = Feat::zeros(c, h, w);
        let px = img.pixels();
        for ch in 0..c {
            let plane = out.plane_mut(ch);
            for i in 0..h * w {
                plane[i] = px[i * c + ch];
            }
        }
        out
    }

    /// Planar tensor → interleaved image (values copied as-is; caller
    /// clamps when unit range is required).
    pub fn to_image(&self) -> Image {
        let mut px = vec![0.0; self.channels * self.height * self.width];
        for ch in 0..self.channels {
            let plane = self.plane(ch);
            for i in 0..self.height * self.width {
                px[i * self.channels + ch] = plane[i];
            }
        }
        Image::new(self.height, self.width, self.channels, px).expect("planar tensor was finite")
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Feat {
        Feat {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Feat) -> Feat {
        debug_assert!(self.same_shape(other));
        Feat {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

/// 3×3 convolution, zero padding 1, stride 1 or 2.
/// Weight layout: `[out_c][in_c][ky][kx]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn init(in_c: usize, out_c: usize, stride: usize, rng: &mut Philox) -> Self {
        debug_assert!(stride == 1 || stride == 2);
        let fan_in = (in_c * 9) as f64;
        let std = fmath::sqrt(2.0 / fan_in);
        let weight = (0..out_c * in_c * 9).map(|_| rng.next_normal() * std).collect();
        Conv2d {
            in_c,
            out_c,
            stride,
            weight,
            bias: vec![0.0; out_c],
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / self.stride + 1, (w + 2 - 3) / self.stride + 1)
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        debug_assert_eq!(x.channels, self.in_c);
        let (h, w) = (x.height, x.width);
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Feat::zeros(self.out_c, oh, ow);
        let pw = w + 2;
        // zero-padded copy of every input plane
        let mut padded = vec![0.0; self.in_c * (h + 2) * pw];
        for ic in 0..self.in_c {
            let src = x.plane(ic);
            let dst = &mut padded[ic * (h + 2) * pw..];
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        for oc in 0..self.out_c {
            let b = self.bias[oc];
            let oplane = out.plane_mut(oc);
            oplane.fill(b);
            for ic in 0..self.in_c {
                let xpad = &padded[ic * (h + 2) * pw..(ic + 1) * (h + 2) * pw];
                let w = &self.weight[(oc * self.in_c + ic) * 9..(oc * self.in_c + ic) * 9 + 9];
                if self.stride == 1 {
                    // all nine taps fused into one sweep per row
                    for oy in 0..oh {
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        let r0 = &xpad[oy * pw..oy * pw + ow + 2];
                        let r1 = &xpad[(oy + 1) * pw..(oy + 1) * pw + ow + 2];
                        let r2 = &xpad[(oy + 2) * pw..(oy + 2) * pw + ow + 2];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o += w[0] * r0[ox]
                                + w[1] * r0[ox + 1]
                                + w[2] * r0[ox + 2]
                                + w[3] * r1[ox]
                                + w[4] * r1[ox + 1]
                                + w[5] * r1[ox + 2]
                                + w[6] * r2[ox]
                                + w[7] * r2[ox + 1]
                                + w[8] * r2[ox + 2];
                        }
                    }
                } else {
                    for oy in 0..oh {
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        let r0 = &xpad[(oy * 2) * pw..];
                        let r1 = &xpad[(oy * 2 + 1) * pw..];
                        let r2 = &xpad[(oy * 2 + 2) * pw..];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let x = ox * 2;
                            *o += w[0] * r0[x]
                                + w[1] * r0[x + 1]
                                + w[2] * r0[x + 2]
                                + w[3] * r1[x]
                                + w[4] * r1[x + 1]
                                + w[5] * r1[x + 2]
                                + w[6] * r2[x]
                                + w[7] * r2[x + 1]
                                + w[8] * r2[x + 2];
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward pass. Accumulates parameter gradients into `dw`/`db` and
    /// returns the input gradient when `want_dx` is set.
    pub fn backward(
        &self,
        x: &Feat,
        dout: &Feat,
        dw: &mut [f64],
        db: &mut [f64],
        want_dx: bool,
    ) -> Option<Feat> {
        let (h, w) = (x.height, x.width);
        let (oh, ow) = self.out_dims(h, w);
        debug_assert_eq!(dout.channels, self.out_c);
        debug_assert_eq!((dout.height, dout.width), (oh, ow));
        let pw = w + 2;
        let mut padded = vec![0.0; self.in_c * (h + 2) * pw];
        for ic in 0..self.in_c {
            let src = x.plane(ic);
            let dst = &mut padded[ic * (h + 2) * pw..];
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        let mut dpad = if want_dx {
            vec![0.0; self.in_c * (h + 2) * pw]
        } else {
            Vec::new()
        };
        for oc in 0..self.out_c {
            let dplane = dout.plane(oc);
            db[oc] += dplane.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let xpad = &padded[ic * (h + 2) * pw..(ic + 1) * (h + 2) * pw];
                let wbase = (oc * self.in_c + ic) * 9;
                // all nine weight gradients accumulated in one sweep
                let mut acc = [0.0f64; 9];
                for oy in 0..oh {
                    let drow = &dplane[oy * ow..(oy + 1) * ow];
                    let base = if self.stride == 1 { oy } else { oy * 2 };
                    let r0 = &xpad[base * pw..];
                    let r1 = &xpad[(base + 1) * pw..];
                    let r2 = &xpad[(base + 2) * pw..];
                    for (ox, &d) in drow.iter().enumerate() {
                        let x = if self.stride == 1 { ox } else { ox * 2 };
                        acc[0] += d * r0[x];
                        acc[1] += d * r0[x + 1];
                        acc[2] += d * r0[x + 2];
                        acc[3] += d * r1[x];
                        acc[4] += d * r1[x + 1];
                        acc[5] += d * r1[x + 2];
                        acc[6] += d * r2[x];
                        acc[7] += d * r2[x + 1];
                        acc[8] += d * r2[x + 2];
                    }
                }
                for (k, &a) in acc.iter().enumerate() {
                    dw[wbase + k] += a;
                }
                if want_dx {
                    let w = &self.weight[wbase..wbase + 9];
                    let dxp = &mut dpad[ic * (h + 2) * pw..(ic + 1) * (h + 2) * pw];
                    for oy in 0..oh {
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        let base = if self.stride == 1 { oy } else { oy * 2 };
                        let (ra, rest) = dxp[base * pw..].split_at_mut(pw);
                        let (rb, rest2) = rest.split_at_mut(pw);
                        let rc = &mut rest2[..pw];
                        for (ox, &d) in drow.iter().enumerate() {
                            let x = if self.stride == 1 { ox } else { ox * 2 };
                            ra[x] += w[0] * d;
                            ra[x + 1] += w[1] * d;
                            ra[x + 2] += w[2] * d;
                            rb[x] += w[3] * d;
                            rb[x + 1] += w[4] * d;
                            rb[x + 2] += w[5] * d;
                            rc[x] += w[6] * d;
                            rc[x + 1] += w[7] * d;
                            rc[x + 2] += w[8] * d;
                        }
                    }
                }
            }
        }
        if want_dx {
            let mut dx = Feat::zeros(self.in_c, h, w);
            for ic in 0..self.in_c {
                let src = &dpad[ic * (h + 2) * pw..(ic + 1) * (h + 2) * pw];
                let dst = dx.plane_mut(ic);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
                }
            }
            Some(dx)
        } else {
            None
        }
    }
}

/// Dense layer over flat vectors. Weight layout: `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Philox) -> Self {
        let std = fmath::sqrt(2.0 / in_dim as f64);
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.next_normal() * std).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim)) {
            *o += row.iter().zip(x).map(|(&w, &xv)| w * xv).sum::<f64>();
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f64],
        dout: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        debug_assert_eq!(dout.len(), self.out_dim);
        for (o, &d) in dout.iter().enumerate() {
            db[o] += d;
            let row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for (g, &xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
        if want_dx {
            let mut dx = vec![0.0; self.in_dim];
            for (o, &d) in dout.iter().enumerate() {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (g, &w) in dx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            Some(dx)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Stateless ops
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + fmath::exp(-x))
}

pub fn silu_forward(x: &Feat) -> Feat {
    x.map(|v| v * sigmoid(v))
}

/// Backward of SiLU given the pre-activation input.
pub fn silu_backward(x_pre: &Feat, dout: &Feat) -> Feat {
    debug_assert!(x_pre.same_shape(dout));
    let mut dx = x_pre.clone();
    for (g, (&x, &d)) in dx.data.iter_mut().zip(x_pre.data.iter().zip(dout.data.iter())) {
        let s = sigmoid(x);
        *g = d * s * (1.0 + x * (1.0 - s));
    }
    dx
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward(x_pre: &[f64], dout: &[f64]) -> Vec<f64> {
    x_pre
        .iter()
        .zip(dout)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

/// 2× nearest-neighbor upsampling.
pub fn upsample2x_forward(x: &Feat) -> Feat {
    let (h, w) = (x.height, x.width);
    let mut out = Feat::zeros(x.channels, h * 2, w * 2);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = (y * 2) * (w * 2) + xx * 2;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w * 2] = v;
                dst[base + w * 2 + 1] = v;
            }
        }
    }
    out
}

/// Backward of 2× nearest upsampling: sum each 2×2 cell.
pub fn upsample2x_backward(dout: &Feat) -> Feat {
    let (h2, w2) = (dout.height, dout.width);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Feat::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        let src = dout.plane(c);
        let dst = dx.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let base = (y * 2) * w2 + xx * 2;
                dst[y * w + xx] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    dx
}

/// Add a per-channel bias vector to every spatial position.
pub fn inject_bias(x: &Feat, bias: &[f64]) -> Feat {
    debug_assert_eq!(bias.len(), x.channels);
    let mut out = x.clone();
    for c in 0..x.channels {
        let b = bias[c];
        for v in out.plane_mut(c) {
            *v += b;
        }
    }
    out
}

/// Gradient of [`inject_bias`] with respect to the bias vector.
pub fn inject_bias_grad(dout: &Feat) -> Vec<f64> {
    (0..dout.channels).map(|c| dout.plane(c).iter().sum()).collect()
}

/// Mean over the spatial extent of each channel.
pub fn global_avg_pool(x: &Feat) -> Vec<f64> {
    let hw = (x.height * x.width) as f64;
    (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / hw).collect()
}

pub fn global_avg_pool_backward(channels: usize, height: usize, width: usize, dout: &[f64]) -> Feat {
    let mut dx = Feat::zeros(channels, height, width);
    let hw = (height * width) as f64;
    for c in 0..channels {
        let g = dout[c] / hw;
        for v in dx.plane_mut(c) {
            *v = g;
        }
    }
    dx
}

/// Sinusoidal position features for an integer timestep.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = fmath::exp(-fmath::ln(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out.push(fmath::sin(arg));
        out.push(fmath::cos(arg));
    }
    out
}

// ---------------------------------------------------------------------------
// Gradients, optimizers, executors
// ---------------------------------------------------------------------------

/// Per-parameter-tensor gradient buffers, in a net's declared order.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &[&[f64]]) -> Self {
        Grads(params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Optimizer family for the trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self, crate::CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(crate::CoreError::InvalidArgument(alloc::format!(
                "unknown optimizer '{s}'"
            ))),
        }
    }
}

/// First-order optimizer over a net's parameter list.
///
/// Momentum coefficient 0.9; Adam uses (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&[f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, mut params: Vec<&mut [f64]>, grads: &Grads) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.0.iter()) {
                    for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grads.0.iter()).zip(self.m.iter_mut()) {
                    for ((pv, &gv), mv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                        *mv = 0.9 * *mv + gv;
                        *pv -= self.lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - fmath::pow(b1, self.step as f64);
                let c2 = 1.0 - fmath::pow(b2, self.step as f64);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads.0.iter())
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for (((pv, &gv), mv), vv) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= self.lr * mhat / (fmath::sqrt(vhat) + eps);
                    }
                }
            }
        }
    }
}

/// Runs per-sample gradient tasks for a batch.
///
/// Implementations may fan the tasks out to worker threads, but the
/// returned vector must be indexed by task id so the caller can reduce
/// in a fixed order; results are then independent of worker count.
pub trait GradExecutor: Sync {
    fn run(&self, n: usize, task: &(dyn Fn(usize) -> (Grads, f64) + Sync)) -> Vec<(Grads, f64)>;
}

/// In-order, single-threaded executor. Always available.
pub struct SerialExecutor;

impl GradExecutor for SerialExecutor {
    fn run(&self, n: usize, task: &(dyn Fn(usize) -> (Grads, f64) + Sync)) -> Vec<(Grads, f64)> {
        (0..n).map(task).collect()
    }
}
