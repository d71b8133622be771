//! Severity-monotonicity oracle: over a fixed 20-image set, mean PSNR
//! against the original strictly decreases as severity rises, for every
//! noise and blur kind.

use difta_core::corruption::{apply, CorruptionCategory, CorruptionSpec, ALL_KINDS};
use difta_core::image::{psnr, Image};
use difta_core::rng::{derive_seed, Philox};

/// Deterministic textured fixtures: smooth background, a soft blob, and
/// mid-frequency texture, so every corruption family has signal to destroy.
fn fixture_set() -> Vec<Image> {
    (0..20u64)
        .map(|i| {
            let mut rng = Philox::seed(derive_seed(555, &[b"psnr-fixture", &i.to_le_bytes()]));
            let cy = 10.0 + 12.0 * rng.next_f64();
            let cx = 10.0 + 12.0 * rng.next_f64();
            let phase = rng.next_f64() * 6.28;
            let freq = 0.6 + 0.5 * rng.next_f64();
            let mut grain = vec![0.0; 32 * 32];
            for g in &mut grain {
                *g = rng.next_normal();
            }
            Image::from_fn(32, 32, 3, |y, x, c| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = 0.45 * (-d2 / 40.0).exp();
                let tex = 0.12 * ((freq * x as f64 + 1.3 * c as f64 + phase).sin())
                    + 0.08 * ((freq * 0.8 * y as f64 - phase).cos());
                let g = 0.05 * grain[y * 32 + x];
                (0.55 - blob + tex + g).clamp(0.02, 0.98)
            })
        })
        .collect()
}

#[test]
fn mean_psnr_strictly_decreases_with_severity() {
    let images = fixture_set();
    for kind in ALL_KINDS {
        let cat = kind.category();
        if cat != CorruptionCategory::Noise && cat != CorruptionCategory::Blur {
            continue;
        }
        let mut prev = f64::INFINITY;
        for severity in 1..=5u8 {
            let mut total = 0.0;
            for (i, img) in images.iter().enumerate() {
                let seed = derive_seed(7, &[kind.name().as_bytes(), &[severity], &[i as u8]]);
                let spec = CorruptionSpec::new(kind, severity, seed).unwrap();
                let out = apply(img, &spec).unwrap();
                total += psnr(img, &out).unwrap();
            }
            let mean = total / images.len() as f64;
            assert!(
                mean < prev,
                "{kind}: severity {severity} mean PSNR {mean:.3} did not drop below {prev:.3}"
            );
            prev = mean;
        }
    }
}
