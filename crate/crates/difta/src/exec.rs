//! Rayon-backed executor for the core trainers, plus a helper for
//! building a bounded thread pool.
//!
//! Results come back indexed by task id and are reduced in index order
//! by the caller, so outputs are identical for any worker count.

use difta_core::nn::{GradExecutor, Grads};
use rayon::prelude::*;

/// Fans per-sample gradient tasks out to the current rayon pool.
pub struct RayonExecutor;

impl GradExecutor for RayonExecutor {
    fn run(&self, n: usize, task: &(dyn Fn(usize) -> (Grads, f64) + Sync)) -> Vec<(Grads, f64)> {
        (0..n).into_par_iter().map(task).collect()
    }
}

/// Build a rayon pool with `workers` threads (0 = one per core).
pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, crate::CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| crate::CliError::Internal(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use difta_core::diffusion::{train, NoiseSchedule, TrainConfig};
    use difta_core::denoiser::EpsilonNet;
    use difta_core::image::Image;
    use difta_core::nn::SerialExecutor;

    #[test]
    fn rayon_training_matches_serial_bitwise() {
        let dataset: Vec<Image> = (0..12)
            .map(|i| Image::from_fn(8, 8, 1, |y, x, _| ((y * 3 + x + i) % 9) as f64 / 9.0))
            .collect();
        let sched = NoiseSchedule::linear(20, 1e-3, 2e-2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };

        let mut serial_net = EpsilonNet::new(1, 2, 42);
        let serial_hist =
            train(&mut serial_net, &dataset, &cfg, &sched, &SerialExecutor, |_, _| {}).unwrap();

        for workers in [1usize, 2, 4] {
            let pool = thread_pool(workers).unwrap();
            let mut par_net = EpsilonNet::new(1, 2, 42);
            let par_hist = pool
                .install(|| train(&mut par_net, &dataset, &cfg, &sched, &RayonExecutor, |_, _| {}))
                .unwrap();
            assert_eq!(serial_hist, par_hist, "workers={workers}");
            for (a, b) in serial_net.params().iter().zip(par_net.params().iter()) {
                assert_eq!(a, b, "workers={workers}");
            }
        }
    }
}
