use difta_core::denoiser::{EpsilonNet, NoisePredictor};
use difta_core::nn::Feat;
use std::time::Instant;

fn main() {
    let net = EpsilonNet::new(3, 12, 1);
    let mut x = Feat::zeros(3, 32, 32);
    for (i, v) in x.data.iter_mut().enumerate() { *v = (i as f64 * 0.37).sin(); }
    // warmup
    for t in 1..20 { let _ = net.predict(&x, t); }
    let n = 300;
    let start = Instant::now();
    let mut acc = 0.0;
    for t in 0..n { acc += net.predict(&x, 1 + (t % 200)).data[0]; }
    let dt = start.elapsed().as_secs_f64();
    println!("{n} predicts in {dt:.3}s = {:.1} evals/s/core (acc {acc:.3})", n as f64 / dt);
}
