//! Synthetic source domain: lesion-like images in three morphologies.
//!
//! Classes share the same size and eccentricity distribution on
//! purpose — the discriminative evidence lives in boundary regularity
//! and interior texture, mid/high-frequency cues that input corruption
//! destroys and diffusion-based adaptation can restore.
//!
//! At generation time a class-conditional statistic (high-frequency
//! energy inside the lesion) is collected, and generation fails unless
//! every class pair is separated by at least `min_separation`
//! within-class standard deviations.

use std::fs;
use std::path::{Path, PathBuf};

use difta_core::image::{Image, Kernel2D};
use difta_core::rng::{derive_seed, Philox};
use rayon::prelude::*;

use crate::pngio;
use crate::CliError;

/// Interior texture of one class.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureKind {
    /// Smooth interior with a mild radial shade.
    Smooth,
    /// Luminance bands across the lesion's major axis.
    Stripes { period: f64, amplitude: f64 },
    /// Blurred per-pixel grain.
    Speckle { sigma: f64, amplitude: f64 },
}

/// Generative parameters for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub name: String,
    /// Sampled uniformly per image; shared across classes by default so
    /// shape alone cannot separate them.
    pub eccentricity: (f64, f64),
    /// Standard deviation of the radial boundary wobble.
    pub boundary_amplitude: f64,
    pub texture: TextureKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub classes: Vec<ClassParams>,
    pub seed: u64,
    /// Required pairwise class separation, in within-class standard
    /// deviations of the generation statistic.
    pub min_separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 32,
            channels: 3,
            train_per_class: 700,
            val_per_class: 100,
            test_per_class: 200,
            classes: default_classes(3),
            seed: 0,
            min_separation: 3.0,
        }
    }
}

/// The stock morphologies, cycled when more classes are requested.
pub fn default_classes(count: usize) -> Vec<ClassParams> {
    let archetypes = [
        ClassParams {
            name: String::new(),
            eccentricity: (1.0, 2.0),
            boundary_amplitude: 0.03,
            texture: TextureKind::Smooth,
        },
        ClassParams {
            name: String::new(),
            eccentricity: (1.0, 2.0),
            boundary_amplitude: 0.06,
            texture: TextureKind::Stripes {
                period: 3.5,
                amplitude: 0.13,
            },
        },
        ClassParams {
            name: String::new(),
            eccentricity: (1.0, 2.0),
            boundary_amplitude: 0.22,
            texture: TextureKind::Speckle {
                sigma: 0.6,
                amplitude: 0.20,
            },
        },
    ];
    (0..count)
        .map(|i| {
            let mut c = archetypes[i % archetypes.len()].clone();
            c.name = format!("class_{i}");
            c
        })
        .collect()
}

/// Summary returned by the generator.
#[derive(Debug, Clone)]
pub struct SynthReport {
    /// Per class: (mean, std) of the generation statistic.
    pub class_stats: Vec<(f64, f64)>,
    /// Smallest pairwise `|μ_a − μ_b| / max(σ_a, σ_b)`.
    pub separation: f64,
    pub images_written: usize,
}

struct Generated {
    image: Image,
    statistic: f64,
}

/// Render one lesion image and its statistic.
fn generate_one(spec: &SyntheticSpec, class: &ClassParams, rng: &mut Philox) -> Generated {
    let s = spec.image_size;
    let sf = s as f64;
    let c = spec.channels;

    // skin-tone background with a per-image tint and a smooth field
    let base = [0.82, 0.64, 0.58];
    let mut tint = [0.0; 3];
    for t in &mut tint {
        *t = 0.08 * rng.next_f64() - 0.04;
    }
    let raw_field = Image::new(s, s, 1, (0..s * s).map(|_| 2.0 * rng.next_f64() - 1.0).collect())
        .expect("field shape");
    let field = raw_field
        .convolve(&Kernel2D::gaussian(4.0).expect("kernel"))
        .expect("field blur");
    let fdata = field.pixels();
    let fmean = fdata.iter().sum::<f64>() / fdata.len() as f64;
    let fstd = (fdata.iter().map(|&v| (v - fmean) * (v - fmean)).sum::<f64>()
        / fdata.len() as f64)
        .sqrt()
        .max(1e-9);

    // lesion geometry
    let cy = sf / 2.0 + 6.0 * rng.next_f64() - 3.0;
    let cx = sf / 2.0 + 6.0 * rng.next_f64() - 3.0;
    let r0 = sf * (0.22 + 0.08 * rng.next_f64());
    let (e_lo, e_hi) = class.eccentricity;
    let ecc = e_lo + (e_hi - e_lo) * rng.next_f64();
    let theta = std::f64::consts::PI * rng.next_f64();
    let (sin_t, cos_t) = theta.sin_cos();
    // radial wobble: low-order harmonics scaled to the class amplitude
    let mut harm = [[0.0f64; 2]; 4];
    for (k, h) in harm.iter_mut().enumerate() {
        let scale = 1.0 / (k + 2) as f64;
        h[0] = rng.next_normal() * scale;
        h[1] = rng.next_normal() * scale;
    }
    let wobble_norm = 0.66; // approximate std of the harmonic sum
    let lesion_base = [
        0.38 + 0.10 * rng.next_f64() - 0.05,
        0.24 + 0.08 * rng.next_f64() - 0.04,
        0.20 + 0.08 * rng.next_f64() - 0.04,
    ];
    let stripe_phase = 2.0 * std::f64::consts::PI * rng.next_f64();

    // per-pixel speckle grain, blurred, standardized
    let grain = match &class.texture {
        TextureKind::Speckle { sigma, .. } => {
            let raw = Image::new(s, s, 1, (0..s * s).map(|_| rng.next_normal()).collect())
                .expect("grain shape");
            let sm = raw
                .convolve(&Kernel2D::gaussian(*sigma).expect("kernel"))
                .expect("grain blur");
            let d = sm.pixels();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64)
                .sqrt()
                .max(1e-9);
            Some(d.iter().map(|&v| (v - m) / sd).collect::<Vec<f64>>())
        }
        _ => None,
    };

    let mut alpha_mask = vec![0.0f64; s * s];
    let img = Image::from_fn(s, s, c, |y, x, ch| {
        let bg = (base[ch.min(2)] + tint[ch.min(2)]
            + 0.035 * (fdata[y * s + x] - fmean) / fstd)
            .clamp(0.0, 1.0);
        // rotated ellipse coordinates
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let u = cos_t * dx + sin_t * dy;
        let v = -sin_t * dx + cos_t * dy;
        let a = r0 * ecc.sqrt();
        let b = r0 / ecc.sqrt();
        let rho = ((u / a) * (u / a) + (v / b) * (v / b)).sqrt();
        let phi = v.atan2(u);
        let mut w = 0.0;
        for (k, h) in harm.iter().enumerate() {
            let kk = (k + 2) as f64;
            w += h[0] * (kk * phi).cos() + h[1] * (kk * phi).sin();
        }
        let modulation = 1.0 + class.boundary_amplitude * w / wobble_norm;
        let rho_eff = rho / modulation.max(0.2);
        let edge = 0.12;
        let alpha = ((1.0 + edge - rho_eff) / edge).clamp(0.0, 1.0);
        if ch == 0 {
            alpha_mask[y * s + x] = alpha;
        }
        if alpha <= 0.0 {
            return bg;
        }
        let mut lesion = lesion_base[ch.min(2)] * (1.0 - 0.12 * (1.0 - rho_eff.min(1.0)));
        match &class.texture {
            TextureKind::Smooth => {}
            TextureKind::Stripes { period, amplitude } => {
                lesion += amplitude
                    * (2.0 * std::f64::consts::PI * u / period + stripe_phase).sin();
            }
            TextureKind::Speckle { amplitude, .. } => {
                lesion += amplitude * grain.as_ref().expect("grain present")[y * s + x];
            }
        }
        (bg * (1.0 - alpha) + lesion.clamp(0.0, 1.0) * alpha).clamp(0.0, 1.0)
    });

    // statistic: high-frequency luminance energy inside the lesion
    let lum = Image::new(
        s,
        s,
        1,
        (0..s * s)
            .map(|i| {
                (0..c).map(|ch| img.pixels()[i * c + ch]).sum::<f64>() / c as f64
            })
            .collect(),
    )
    .expect("luminance shape");
    let smooth = lum
        .convolve(&Kernel2D::gaussian(1.0).expect("kernel"))
        .expect("hf blur");
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s * s {
        if alpha_mask[i] > 0.5 {
            num += (lum.pixels()[i] - smooth.pixels()[i]).abs();
            den += 1.0;
        }
    }
    let statistic = if den > 0.0 { num / den } else { 0.0 };
    Generated { image: img, statistic }
}

/// Generate the train/val/test trees, write a labels manifest, verify
/// class separability, and return the summary.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthReport, CliError> {
    if spec.classes.is_empty()
        || spec.train_per_class == 0
        || spec.val_per_class == 0
        || spec.test_per_class == 0
    {
        return Err(CliError::Data(
            "synthetic spec needs at least one class and nonzero split counts".into(),
        ));
    }
    if spec.image_size % 4 != 0 {
        return Err(CliError::Data(format!(
            "image size must be divisible by 4, got {}",
            spec.image_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let splits: [(&str, usize); 3] = [
        ("train", spec.train_per_class),
        ("val", spec.val_per_class),
        ("test", spec.test_per_class),
    ];
    let mut jobs = Vec::new();
    for (split, count) in splits {
        for (class_index, class) in spec.classes.iter().enumerate() {
            for idx in 0..count {
                jobs.push((split, class_index, class, idx));
            }
        }
    }
    let results: Vec<Result<(PathBuf, &'static str, usize, f64), CliError>> = jobs
        .par_iter()
        .map(|&(split, class_index, class, idx)| {
            let mut rng = Philox::seed(derive_seed(
                spec.seed,
                &[
                    b"synth",
                    split.as_bytes(),
                    &(class_index as u64).to_le_bytes(),
                    &(idx as u64).to_le_bytes(),
                ],
            ));
            let gen = generate_one(spec, class, &mut rng);
            let rel = PathBuf::from(split)
                .join(&class.name)
                .join(format!("img_{idx:05}.png"));
            pngio::save_image(&gen.image, &out_dir.join(&rel))?;
            Ok((rel, split, class_index, gen.statistic))
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }

    // labels manifest
    let manifest = out_dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["relative_path", "split", "class_index", "class_name"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (rel, split, class_index, _) in &rows {
        w.write_record([
            rel.to_string_lossy().to_string(),
            (*split).to_string(),
            class_index.to_string(),
            spec.classes[*class_index].name.clone(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))?;

    // class statistics and the separability gate
    let mut class_stats = Vec::new();
    for class_index in 0..spec.classes.len() {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|(_, _, ci, _)| *ci == class_index)
            .map(|(_, _, _, s)| *s)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        class_stats.push((mean, var.sqrt()));
    }
    let mut separation = f64::INFINITY;
    for i in 0..class_stats.len() {
        for j in i + 1..class_stats.len() {
            let gap = (class_stats[i].0 - class_stats[j].0).abs()
                / class_stats[i].1.max(class_stats[j].1).max(1e-12);
            separation = separation.min(gap);
        }
    }
    if class_stats.len() > 1 && separation < spec.min_separation {
        return Err(CliError::Data(format!(
            "generated classes are not separable enough: min separation {separation:.2} < {:.2}",
            spec.min_separation
        )));
    }
    Ok(SynthReport {
        class_stats,
        separation,
        images_written: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scan_labeled_tree;
    use tempfile::TempDir;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 8,
            val_per_class: 3,
            test_per_class: 4,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts_and_split_layout() {
        let dir = TempDir::new().unwrap();
        let spec = small_spec(1);
        let report = make_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(report.images_written, 3 * (8 + 3 + 4));
        for (split, per_class) in [("train", 8), ("val", 3), ("test", 4)] {
            let tree = scan_labeled_tree(&dir.path().join(split)).unwrap();
            assert_eq!(tree.items.len(), 3 * per_class, "{split}");
            assert_eq!(tree.classes, vec!["class_0", "class_1", "class_2"]);
        }
        assert!(dir.path().join("labels.csv").exists());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        make_synthetic_dataset(&small_spec(7), a.path()).unwrap();
        make_synthetic_dataset(&small_spec(7), b.path()).unwrap();
        let pa = a.path().join("train/class_2/img_00003.png");
        let pb = b.path().join("train/class_2/img_00003.png");
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());

        let c = TempDir::new().unwrap();
        make_synthetic_dataset(&small_spec(8), c.path()).unwrap();
        let pc = c.path().join("train/class_2/img_00003.png");
        assert_ne!(
            fs::read(c.path().join("train/class_2/img_00003.png")).unwrap(),
            fs::read(b.path().join("train/class_2/img_00003.png")).unwrap(),
            "{}",
            pc.display()
        );
    }

    #[test]
    fn classes_separate_by_the_statistic() {
        let dir = TempDir::new().unwrap();
        let report = make_synthetic_dataset(&small_spec(3), dir.path()).unwrap();
        assert!(
            report.separation >= 3.0,
            "separation {}",
            report.separation
        );
        // smooth < stripes < speckle in high-frequency energy
        assert!(report.class_stats[0].0 < report.class_stats[1].0);
        assert!(report.class_stats[1].0 < report.class_stats[2].0);
    }

    #[test]
    fn rejects_degenerate_spec() {
        let dir = TempDir::new().unwrap();
        let mut spec = small_spec(1);
        spec.train_per_class = 0;
        assert!(make_synthetic_dataset(&spec, dir.path()).is_err());
    }
}
