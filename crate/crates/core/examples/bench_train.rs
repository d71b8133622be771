use difta_core::denoiser::EpsilonNet;
use difta_core::nn::Feat;
use std::time::Instant;

fn main() {
    let net = EpsilonNet::new(3, 12, 1);
    let mut x = Feat::zeros(3, 32, 32);
    for (i, v) in x.data.iter_mut().enumerate() { *v = (i as f64 * 0.37).sin(); }
    for t in 1..5 { let (o, c) = net.forward_cached(&x, t); let _ = net.backward(&c, &o, false); }
    let n = 100;
    let start = Instant::now();
    let mut acc = 0.0;
    for t in 0..n {
        let (out, cache) = net.forward_cached(&x, 1 + (t % 200));
        let (g, _) = net.backward(&cache, &out, false);
        acc += g.0[0][0];
    }
    let dt = start.elapsed().as_secs_f64();
    println!("{n} fwd+bwd in {dt:.3}s = {:.1} steps/s/core (acc {acc:.3})", n as f64 / dt);
}
