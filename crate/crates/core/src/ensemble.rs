//! Self-ensembling of the predictions on an original input and its
//! adapted counterpart.
//!
//! The default rule keeps whichever prediction is more confident.
//! The remaining rules are the ablation alternatives: entropy-based
//! selection, plain and weighted probability sums, and image-level
//! fusion (blend the two images, classify once).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::classifier::{confidence, entropy, Prediction};
use crate::fmath;
use crate::image::Image;
use crate::CoreError;

/// The selection/fusion variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnsembleRule {
    /// Keep the prediction with the higher confidence (default).
    ConfidenceSelect,
    /// Keep the prediction with the lower entropy.
    EntropySelect,
    /// Argmax of `p + p_g`.
    Sum,
    /// Argmax of `max(p)·p + max(p_g)·p_g`.
    ConfidenceSum,
    /// Argmax of `e^{−H(p)}·p + e^{−H(p_g)}·p_g`.
    EntropySum,
    /// Blend the two images by confidence weight, classify once.
    ConfidenceFuse,
    /// Blend the two images by entropy weight, classify once.
    EntropyFuse,
}

pub const ALL_RULES: [EnsembleRule; 7] = [
    EnsembleRule::ConfidenceSelect,
    EnsembleRule::EntropySelect,
    EnsembleRule::Sum,
    EnsembleRule::ConfidenceSum,
    EnsembleRule::EntropySum,
    EnsembleRule::ConfidenceFuse,
    EnsembleRule::EntropyFuse,
];

impl EnsembleRule {
    /// Canonical name; matches the ablation row labels with
    /// underscores for spaces.
    pub fn name(&self) -> &'static str {
        match self {
            EnsembleRule::ConfidenceSelect => "confidence",
            EnsembleRule::EntropySelect => "entropy",
            EnsembleRule::Sum => "sum",
            EnsembleRule::ConfidenceSum => "confidence_sum",
            EnsembleRule::EntropySum => "entropy_sum",
            EnsembleRule::ConfidenceFuse => "confidence_fuse",
            EnsembleRule::EntropyFuse => "entropy_fuse",
        }
    }

    /// Parse a rule name; spaces and underscores are interchangeable.
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        match norm.as_str() {
            "confidence" | "confidence_select" => Ok(EnsembleRule::ConfidenceSelect),
            "entropy" | "entropy_select" => Ok(EnsembleRule::EntropySelect),
            "sum" => Ok(EnsembleRule::Sum),
            "confidence_sum" => Ok(EnsembleRule::ConfidenceSum),
            "entropy_sum" => Ok(EnsembleRule::EntropySum),
            "confidence_fuse" => Ok(EnsembleRule::ConfidenceFuse),
            "entropy_fuse" => Ok(EnsembleRule::EntropyFuse),
            _ => Err(CoreError::InvalidArgument(format!("unknown ensemble rule '{s}'"))),
        }
    }

    /// Whether the rule blends images instead of probability vectors.
    pub fn is_image_fusion(&self) -> bool {
        matches!(self, EnsembleRule::ConfidenceFuse | EnsembleRule::EntropyFuse)
    }
}

impl core::fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the winning probability vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionSource {
    Original,
    Adapted,
    Combined,
}

/// Outcome of an ensembling rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDecision {
    pub chosen_class: usize,
    pub source: DecisionSource,
    /// The effective probability vector for the non-select rules,
    /// normalized back onto the simplex.
    pub combined_probs: Option<Prediction>,
}

fn check_lengths(p: &Prediction, p_g: &Prediction) -> Result<(), CoreError> {
    if p.len() != p_g.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} classes", p.len()),
            got: format!("{} classes", p_g.len()),
        });
    }
    Ok(())
}

fn weighted_sum_decision(
    p: &Prediction,
    p_g: &Prediction,
    w_a: f64,
    w_b: f64,
) -> EnsembleDecision {
    let combined: Vec<f64> = p
        .probs()
        .iter()
        .zip(p_g.probs())
        .map(|(&a, &b)| w_a * a + w_b * b)
        .collect();
    let total: f64 = combined.iter().sum();
    let normalized = Prediction::new(combined.iter().map(|&v| v / total).collect())
        .expect("weighted sum of simplex vectors normalizes");
    EnsembleDecision {
        chosen_class: normalized.argmax(),
        source: DecisionSource::Combined,
        combined_probs: Some(normalized),
    }
}

/// Apply a probability-level ensembling rule.
///
/// The two image-fusion rules cannot be decided from probabilities
/// alone: blend with [`fuse_images`], classify the blend, and wrap the
/// result with [`decide_fused`].
pub fn decide(
    p: &Prediction,
    p_g: &Prediction,
    rule: EnsembleRule,
) -> Result<EnsembleDecision, CoreError> {
    check_lengths(p, p_g)?;
    match rule {
        EnsembleRule::ConfidenceSelect => {
            // strict inequality: ties go to the adapted prediction
            let use_original = confidence(p) > confidence(p_g);
            let (sel, source) = if use_original {
                (p, DecisionSource::Original)
            } else {
                (p_g, DecisionSource::Adapted)
            };
            Ok(EnsembleDecision {
                chosen_class: sel.argmax(),
                source,
                combined_probs: None,
            })
        }
        EnsembleRule::EntropySelect => {
            let use_original = entropy(p) < entropy(p_g);
            let (sel, source) = if use_original {
                (p, DecisionSource::Original)
            } else {
                (p_g, DecisionSource::Adapted)
            };
            Ok(EnsembleDecision {
                chosen_class: sel.argmax(),
                source,
                combined_probs: None,
            })
        }
        EnsembleRule::Sum => Ok(weighted_sum_decision(p, p_g, 1.0, 1.0)),
        EnsembleRule::ConfidenceSum => {
            Ok(weighted_sum_decision(p, p_g, confidence(p), confidence(p_g)))
        }
        EnsembleRule::EntropySum => Ok(weighted_sum_decision(
            p,
            p_g,
            fmath::exp(-entropy(p)),
            fmath::exp(-entropy(p_g)),
        )),
        EnsembleRule::ConfidenceFuse | EnsembleRule::EntropyFuse => {
            Err(CoreError::InvalidArgument(format!(
                "rule '{rule}' fuses images; classify the fused image and use decide_fused"
            )))
        }
    }
}

/// Wrap the single prediction obtained from a fused image.
pub fn decide_fused(p_fused: &Prediction) -> EnsembleDecision {
    EnsembleDecision {
        chosen_class: p_fused.argmax(),
        source: DecisionSource::Combined,
        combined_probs: Some(p_fused.clone()),
    }
}

/// Pixel-wise convex blend `λ·x + (1−λ)·x_g` with λ derived from the
/// two predictions: confidence ratio for `confidence_fuse`, negative
/// exponential entropy ratio for `entropy_fuse`.
pub fn fuse_images(
    x: &Image,
    x_g: &Image,
    p: &Prediction,
    p_g: &Prediction,
    rule: EnsembleRule,
) -> Result<Image, CoreError> {
    check_lengths(p, p_g)?;
    let lambda = match rule {
        EnsembleRule::ConfidenceFuse => {
            let (a, b) = (confidence(p), confidence(p_g));
            if a + b <= 0.0 {
                1.0
            } else {
                (a / (a + b)).clamp(0.0, 1.0)
            }
        }
        EnsembleRule::EntropyFuse => {
            let (a, b) = (fmath::exp(-entropy(p)), fmath::exp(-entropy(p_g)));
            (a / (a + b)).clamp(0.0, 1.0)
        }
        _ => {
            return Err(CoreError::InvalidArgument(format!(
                "rule '{rule}' is not an image-fusion rule"
            )))
        }
    };
    Ok(x
        .zip(x_g, |a, b| lambda * a + (1.0 - lambda) * b)?
        .clamp_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Philox;
    use alloc::vec;

    fn simplex(rng: &mut Philox, c: usize) -> Prediction {
        let raw: Vec<f64> = (0..c).map(|_| rng.next_f64() + 1e-9).collect();
        let sum: f64 = raw.iter().sum();
        Prediction::new(raw.iter().map(|&v| v / sum).collect()).unwrap()
    }

    #[test]
    fn confidence_select_example() {
        let p = Prediction::new(vec![0.7, 0.3]).unwrap();
        let pg = Prediction::new(vec![0.4, 0.6]).unwrap();
        let d = decide(&p, &pg, EnsembleRule::ConfidenceSelect).unwrap();
        assert_eq!(d.chosen_class, 0);
        assert_eq!(d.source, DecisionSource::Original);
    }

    #[test]
    fn equal_predictions_agree_across_rules() {
        let p = Prediction::new(vec![0.2, 0.5, 0.3]).unwrap();
        for rule in [
            EnsembleRule::ConfidenceSelect,
            EnsembleRule::EntropySelect,
            EnsembleRule::Sum,
            EnsembleRule::ConfidenceSum,
            EnsembleRule::EntropySum,
        ] {
            let d = decide(&p, &p, rule).unwrap();
            assert_eq!(d.chosen_class, 1, "{rule}");
        }
        // ties on the select rules go to the adapted side
        let d = decide(&p, &p, EnsembleRule::ConfidenceSelect).unwrap();
        assert_eq!(d.source, DecisionSource::Adapted);
    }

    #[test]
    fn select_matches_formula_transcription() {
        // independent transcription of the selection formula
        let mut rng = Philox::seed(17);
        for _ in 0..10_000 {
            let p = simplex(&mut rng, 5);
            let pg = simplex(&mut rng, 5);
            let d = decide(&p, &pg, EnsembleRule::ConfidenceSelect).unwrap();
            let max_p = p.probs().iter().cloned().fold(f64::MIN, f64::max);
            let max_pg = pg.probs().iter().cloned().fold(f64::MIN, f64::max);
            let src = if max_p > max_pg { p.probs() } else { pg.probs() };
            let mut arg = 0;
            for (i, &v) in src.iter().enumerate() {
                if v > src[arg] {
                    arg = i;
                }
            }
            assert_eq!(d.chosen_class, arg);
        }
    }

    #[test]
    fn rules_are_permutation_equivariant() {
        let mut rng = Philox::seed(19);
        for _ in 0..200 {
            let p = simplex(&mut rng, 4);
            let pg = simplex(&mut rng, 4);
            // a random permutation of class indices
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                let j = rng.next_below((i + 1) as u32) as usize;
                perm.swap(i, j);
            }
            let apply = |pr: &Prediction| {
                let mut v = vec![0.0; 4];
                for (i, &pi) in perm.iter().enumerate() {
                    v[pi] = pr.probs()[i];
                }
                Prediction::new(v).unwrap()
            };
            for rule in [
                EnsembleRule::ConfidenceSelect,
                EnsembleRule::EntropySelect,
                EnsembleRule::Sum,
                EnsembleRule::ConfidenceSum,
                EnsembleRule::EntropySum,
            ] {
                let d = decide(&p, &pg, rule).unwrap();
                let dp = decide(&apply(&p), &apply(&pg), rule).unwrap();
                assert_eq!(dp.chosen_class, perm[d.chosen_class], "{rule}");
            }
        }
    }

    #[test]
    fn select_rules_never_mix() {
        let mut rng = Philox::seed(23);
        for _ in 0..1000 {
            let p = simplex(&mut rng, 3);
            let pg = simplex(&mut rng, 3);
            for rule in [EnsembleRule::ConfidenceSelect, EnsembleRule::EntropySelect] {
                let d = decide(&p, &pg, rule).unwrap();
                let expected = match d.source {
                    DecisionSource::Original => p.argmax(),
                    DecisionSource::Adapted => pg.argmax(),
                    DecisionSource::Combined => unreachable!("select rules never combine"),
                };
                assert_eq!(d.chosen_class, expected);
                assert!(d.combined_probs.is_none());
            }
        }
    }

    #[test]
    fn fuse_images_weights() {
        let x = Image::constant(4, 4, 1, 1.0);
        let xg = Image::constant(4, 4, 1, 0.0);
        let p = Prediction::new(vec![0.5, 0.5]).unwrap();
        // equal predictions: λ = 0.5, pixel-wise average
        let fused = fuse_images(&x, &xg, &p, &p, EnsembleRule::ConfidenceFuse).unwrap();
        for &v in fused.pixels() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let fused_e = fuse_images(&x, &xg, &p, &p, EnsembleRule::EntropyFuse).unwrap();
        for &v in fused_e.pixels() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_matches_arithmetic_oracle() {
        let mut rng = Philox::seed(29);
        let x = Image::from_fn(4, 4, 3, |_, _, _| rng.next_f64());
        let xg = Image::from_fn(4, 4, 3, |_, _, _| rng.next_f64());
        let p = Prediction::new(vec![0.6, 0.25, 0.15]).unwrap();
        let pg = Prediction::new(vec![0.34, 0.33, 0.33]).unwrap();

        let fused = fuse_images(&x, &xg, &p, &pg, EnsembleRule::ConfidenceFuse).unwrap();
        let lam = 0.6 / (0.6 + 0.34);
        for i in 0..fused.pixels().len() {
            let want = lam * x.pixels()[i] + (1.0 - lam) * xg.pixels()[i];
            assert!((fused.pixels()[i] - want.clamp(0.0, 1.0)).abs() < 1e-12);
        }

        let fused_e = fuse_images(&x, &xg, &p, &pg, EnsembleRule::EntropyFuse).unwrap();
        let (ea, eb) = (fmath::exp(-entropy(&p)), fmath::exp(-entropy(&pg)));
        let lam_e = ea / (ea + eb);
        for i in 0..fused_e.pixels().len() {
            let want = lam_e * x.pixels()[i] + (1.0 - lam_e) * xg.pixels()[i];
            assert!((fused_e.pixels()[i] - want.clamp(0.0, 1.0)).abs() < 1e-12);
        }
        assert!((0.0..=1.0).contains(&lam) && (0.0..=1.0).contains(&lam_e));
    }

    #[test]
    fn fuse_rules_rejected_by_decide() {
        let p = Prediction::uniform(3);
        assert!(decide(&p, &p, EnsembleRule::ConfidenceFuse).is_err());
        assert!(decide(&p, &p, EnsembleRule::EntropyFuse).is_err());
        let d = decide_fused(&p);
        assert_eq!(d.source, DecisionSource::Combined);
    }

    #[test]
    fn rule_names_round_trip() {
        for rule in ALL_RULES {
            assert_eq!(EnsembleRule::parse(rule.name()).unwrap(), rule);
        }
        // the ablation row labels with spaces parse too
        assert_eq!(
            EnsembleRule::parse("entropy fuse").unwrap(),
            EnsembleRule::EntropyFuse
        );
        assert_eq!(
            EnsembleRule::parse("confidence sum").unwrap(),
            EnsembleRule::ConfidenceSum
        );
        assert!(EnsembleRule::parse("majority vote").is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = Prediction::uniform(3);
        let q = Prediction::uniform(4);
        assert!(decide(&p, &q, EnsembleRule::Sum).is_err());
    }
}
