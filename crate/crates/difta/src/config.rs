//! Run configuration: a single TOML document, validated strictly.
//!
//! Unknown keys anywhere in the document are rejected, and validation
//! reports every offending key and out-of-range value in one pass.
//! Command-line flags override file values; the merged (effective)
//! config is echoed into each run's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use difta_core::corruption::{CorruptionKind, ALL_KINDS};
use difta_core::diffusion::{SigmaKind, TrainConfig};
use difta_core::ensemble::EnsembleRule;
use difta_core::guidance::{AdaptMode, GuidanceConfig, GuidanceNorm, UpsampleMode};
use difta_core::nn::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::synth::{default_classes, SyntheticSpec};
use crate::CliError;

/// Environment variable that supplies the config path when no
/// `--config` flag is given.
pub const CONFIG_ENV: &str = "DIFTA_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub image_size: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub min_separation: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            image_size: 32,
            classes: 3,
            train_per_class: 700,
            val_per_class: 100,
            test_per_class: 200,
            min_separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub checkpoint_interval: usize,
    pub hflip: bool,
    pub sigma: String,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
            width: 12,
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            optimizer: "adam".into(),
            checkpoint_interval: 0,
            hflip: false,
            sigma: "beta".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            width: 12,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: "adam".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub step_size: f64,
    pub scale: usize,
    pub t0: usize,
    pub norm: String,
    pub mode: String,
    pub epsilon_div: f64,
    pub upsample: String,
    pub stride: usize,
    pub grad_through_model: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        GuidanceSection {
            step_size: g.step_size,
            scale: g.scale,
            t0: g.t0,
            norm: g.norm.name().into(),
            mode: g.mode.name().into(),
            epsilon_div: g.epsilon_div,
            upsample: g.upsample.name().into(),
            stride: g.stride,
            grad_through_model: g.grad_through_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptSection {
    /// Kind names, or the single entry "all".
    pub kinds: Vec<String>,
    pub severities: Vec<u8>,
}

impl Default for CorruptSection {
    fn default() -> Self {
        CorruptSection {
            kinds: vec!["all".into()],
            severities: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub modes: Vec<String>,
    pub rules: Vec<String>,
    pub keep_artifacts: bool,
    pub model_tag: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            modes: vec!["full".into()],
            rules: vec!["confidence".into()],
            keep_artifacts: true,
            model_tag: "classifier".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub diffusion: DiffusionSection,
    pub classifier: ClassifierSection,
    pub guidance: GuidanceSection,
    pub corrupt: CorruptSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    /// Load and validate a config file, reporting every unknown key and
    /// invalid value at once.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|_| CliError::ConfigFile {
            path: path.to_path_buf(),
            message: "config file not found or unreadable".into(),
        })?;
        Self::parse(&text).map_err(|message| CliError::ConfigFile {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parse from TOML text with exhaustive key checking.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let value: toml::Value = toml::from_str(text).map_err(|e| e.to_string())?;
        let schema = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut issues = Vec::new();
        check_unknown_keys(&value, &schema, "", &mut issues);
        if issues.is_empty() {
            match toml::from_str::<RunConfig>(text) {
                Ok(cfg) => {
                    let mut range_issues = cfg.validate();
                    if range_issues.is_empty() {
                        return Ok(cfg);
                    }
                    issues.append(&mut range_issues);
                }
                Err(e) => issues.push(e.message().to_string()),
            }
        }
        Err(format!("{} issue(s): {}", issues.len(), issues.join("; ")))
    }

    /// Collect all out-of-range or unparsable values.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.synth.image_size == 0 || self.synth.image_size % 4 != 0 {
            issues.push(format!(
                "synth.image_size must be a positive multiple of 4, got {}",
                self.synth.image_size
            ));
        }
        if self.synth.classes == 0 {
            issues.push("synth.classes must be positive".into());
        }
        if self.diffusion.timesteps == 0 {
            issues.push("diffusion.timesteps must be positive".into());
        }
        if !(self.diffusion.beta_start > 0.0
            && self.diffusion.beta_start <= self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            issues.push(format!(
                "diffusion betas must satisfy 0 < start <= end < 1, got [{}, {}]",
                self.diffusion.beta_start, self.diffusion.beta_end
            ));
        }
        for (name, width, batch, lr) in [
            (
                "diffusion",
                self.diffusion.width,
                self.diffusion.batch_size,
                self.diffusion.learning_rate,
            ),
            (
                "classifier",
                self.classifier.width,
                self.classifier.batch_size,
                self.classifier.learning_rate,
            ),
        ] {
            if width == 0 {
                issues.push(format!("{name}.width must be positive"));
            }
            if batch == 0 {
                issues.push(format!("{name}.batch_size must be positive"));
            }
            if !(lr > 0.0) {
                issues.push(format!("{name}.learning_rate must be positive"));
            }
        }
        if let Err(e) = OptimizerKind::parse(&self.diffusion.optimizer) {
            issues.push(format!("diffusion.optimizer: {e}"));
        }
        if let Err(e) = OptimizerKind::parse(&self.classifier.optimizer) {
            issues.push(format!("classifier.optimizer: {e}"));
        }
        if let Err(e) = SigmaKind::parse(&self.diffusion.sigma) {
            issues.push(format!("diffusion.sigma: {e}"));
        }
        if !(self.guidance.step_size >= 0.0) {
            issues.push("guidance.step_size must be nonnegative".into());
        }
        if self.guidance.scale == 0 {
            issues.push("guidance.scale must be positive".into());
        }
        if self.guidance.stride == 0 {
            issues.push("guidance.stride must be positive".into());
        }
        if self.guidance.t0 > self.diffusion.timesteps {
            issues.push(format!(
                "guidance.t0 ({}) exceeds diffusion.timesteps ({})",
                self.guidance.t0, self.diffusion.timesteps
            ));
        }
        if !(self.guidance.epsilon_div > 0.0) {
            issues.push("guidance.epsilon_div must be positive".into());
        }
        if let Err(e) = GuidanceNorm::parse(&self.guidance.norm) {
            issues.push(format!("guidance.norm: {e}"));
        }
        if let Err(e) = AdaptMode::parse(&self.guidance.mode) {
            issues.push(format!("guidance.mode: {e}"));
        }
        if let Err(e) = UpsampleMode::parse(&self.guidance.upsample) {
            issues.push(format!("guidance.upsample: {e}"));
        }
        if let Err(e) = self.corrupt_kinds() {
            issues.push(e.to_string());
        }
        for &s in &self.corrupt.severities {
            if !(1..=5).contains(&s) {
                issues.push(format!("corrupt.severities entry {s} out of range 1..=5"));
            }
        }
        for m in &self.evaluate.modes {
            if let Err(e) = AdaptMode::parse(m) {
                issues.push(format!("evaluate.modes: {e}"));
            }
        }
        for r in &self.evaluate.rules {
            if let Err(e) = EnsembleRule::parse(r) {
                issues.push(format!("evaluate.rules: {e}"));
            }
        }
        issues
    }

    pub fn diffusion_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.diffusion.epochs,
            batch_size: self.diffusion.batch_size,
            learning_rate: self.diffusion.learning_rate,
            optimizer: OptimizerKind::parse(&self.diffusion.optimizer).expect("validated"),
            seed: difta_core::rng::derive_seed(self.run.seed, &[b"stage", b"train-diffusion"]),
            checkpoint_interval: self.diffusion.checkpoint_interval,
            hflip: self.diffusion.hflip,
        }
    }

    pub fn classifier_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            learning_rate: self.classifier.learning_rate,
            optimizer: OptimizerKind::parse(&self.classifier.optimizer).expect("validated"),
            seed: difta_core::rng::derive_seed(self.run.seed, &[b"stage", b"train-classifier"]),
            checkpoint_interval: 0,
            hflip: false,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            step_size: self.guidance.step_size,
            scale: self.guidance.scale,
            t0: self.guidance.t0,
            norm: GuidanceNorm::parse(&self.guidance.norm).expect("validated"),
            mode: AdaptMode::parse(&self.guidance.mode).expect("validated"),
            epsilon_div: self.guidance.epsilon_div,
            upsample: UpsampleMode::parse(&self.guidance.upsample).expect("validated"),
            stride: self.guidance.stride,
            grad_through_model: self.guidance.grad_through_model,
            sigma: SigmaKind::parse(&self.diffusion.sigma).expect("validated"),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.synth.image_size,
            channels: 3,
            train_per_class: self.synth.train_per_class,
            val_per_class: self.synth.val_per_class,
            test_per_class: self.synth.test_per_class,
            classes: default_classes(self.synth.classes),
            seed: difta_core::rng::derive_seed(self.run.seed, &[b"stage", b"synth"]),
            min_separation: self.synth.min_separation,
        }
    }

    pub fn corrupt_kinds(&self) -> Result<Vec<CorruptionKind>, CliError> {
        if self.corrupt.kinds.len() == 1 && self.corrupt.kinds[0].eq_ignore_ascii_case("all") {
            return Ok(ALL_KINDS.to_vec());
        }
        self.corrupt
            .kinds
            .iter()
            .map(|k| {
                CorruptionKind::parse(k)
                    .map_err(|e| CliError::Config(format!("corrupt.kinds: {e}")))
            })
            .collect()
    }

    pub fn eval_modes(&self) -> Vec<AdaptMode> {
        self.evaluate
            .modes
            .iter()
            .map(|m| AdaptMode::parse(m).expect("validated"))
            .collect()
    }

    pub fn eval_rules(&self) -> Vec<EnsembleRule> {
        self.evaluate
            .rules
            .iter()
            .map(|r| EnsembleRule::parse(r).expect("validated"))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Recursively flag keys not present in the schema value.
fn check_unknown_keys(
    value: &toml::Value,
    schema: &toml::Value,
    prefix: &str,
    issues: &mut Vec<String>,
) {
    if let (toml::Value::Table(tv), toml::Value::Table(ts)) = (value, schema) {
        for (key, sub) in tv {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match ts.get(key) {
                None => issues.push(format!("unknown key '{path}'")),
                Some(sub_schema) => check_unknown_keys(sub, sub_schema, &path, issues),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_echo() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_empty());
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let text = r#"
            [run]
            seed = 3
            sneaky = 1

            [diffusion]
            timesteps = 50
            typo_key = "x"

            [nonexistent]
            a = 1
        "#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.contains("run.sneaky"), "{err}");
        assert!(err.contains("diffusion.typo_key"), "{err}");
        assert!(err.contains("nonexistent"), "{err}");
        assert!(err.starts_with("3 issue(s)"), "{err}");
    }

    #[test]
    fn range_violations_are_all_reported() {
        let text = r#"
            [diffusion]
            timesteps = 0
            beta_start = 0.5
            beta_end = 0.1

            [guidance]
            scale = 0
        "#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.contains("timesteps"), "{err}");
        assert!(err.contains("betas"), "{err}");
        assert!(err.contains("guidance.scale"), "{err}");
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg = RunConfig::parse("[run]\nseed = 42\n").unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert_eq!(cfg.diffusion.timesteps, 200);
        assert_eq!(cfg.guidance_config().scale, 4);
    }

    #[test]
    fn kind_lists_parse() {
        let cfg =
            RunConfig::parse("[corrupt]\nkinds = [\"gaussian_noise\", \"spatter\"]\n").unwrap();
        let kinds = cfg.corrupt_kinds().unwrap();
        assert_eq!(kinds.len(), 2);
        let all = RunConfig::default().corrupt_kinds().unwrap();
        assert_eq!(all.len(), 14);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(
            cfg.diffusion_train_config().seed,
            cfg.classifier_train_config().seed
        );
    }
}
