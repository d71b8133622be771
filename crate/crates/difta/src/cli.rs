//! The `difta` command-line surface: subcommands for dataset synthesis,
//! training, corruption, adaptation, evaluation, ablation, and report
//! formatting.
//!
//! Configuration comes from an optional TOML file (`--config` flag or
//! the `DIFTA_CONFIG` environment variable) with command-line flags
//! taking precedence. Every run echoes its effective config and a run
//! record into its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use difta_core::classifier::{train_classifier, ClassifierNet};
use difta_core::denoiser::EpsilonNet;
use difta_core::diffusion::{train, NoiseSchedule};
use difta_core::guidance::{adapt, AdaptMode};
use difta_core::rng::derive_seed;

use crate::bench::{self, AblationSuite, EvalConfig};
use crate::checkpoint;
use crate::config::{RunConfig, CONFIG_ENV};
use crate::corrupt::{corrupt_dataset, severity_table_csv, CorruptOptions};
use crate::dataset::scan_labeled_tree;
use crate::exec::{thread_pool, RayonExecutor};
use crate::pngio;
use crate::{CliError, ARTIFACT_VERSION};

#[derive(Debug, Parser)]
#[command(
    name = "difta",
    version,
    about = "Diffusion-driven test-time image adaptation toolkit"
)]
pub struct Cli {
    /// Config file (TOML); defaults to $DIFTA_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap override (0 = one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Dataset root override.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Checkpoint directory override.
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Report directory override.
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    /// Training tree (defaults to <data_root>/train).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic source-domain dataset.
    Synth {
        /// Output root (defaults to <data_root>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        val_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Train the diffusion denoiser on the source training split.
    TrainDiffusion {
        #[command(flatten)]
        flags: TrainFlags,
        /// Diffusion timesteps T.
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Train the source classifier.
    TrainClassifier {
        #[command(flatten)]
        flags: TrainFlags,
        /// Validation tree (defaults to <data_root>/val).
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Corrupt a test tree into <kind>/<severity>/<class>/<file>.png.
    Corrupt {
        /// Source tree (defaults to <data_root>/test).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output tree (defaults to <data_root>/corrupted).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated kind names, or "all".
        #[arg(long)]
        kinds: Option<String>,
        /// Comma-separated severities in 1..=5.
        #[arg(long)]
        severities: Option<String>,
        /// Print the frozen severity table as CSV and exit.
        #[arg(long)]
        print_table: bool,
    },
    /// Adapt one image or every PNG under a directory.
    Adapt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Diffusion checkpoint (defaults to <checkpoint_dir>/diffusion.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        t0: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Evaluate pipelines over a corrupted tree.
    Evaluate {
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Run an ablation suite (diffusion_updates or selection_module).
    Ablate {
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Reformat a results CSV into the text report.
    Report {
        /// Results CSV (defaults to <report_dir>/results.csv).
        #[arg(long)]
        results: Option<PathBuf>,
        /// Output directory (defaults to <report_dir>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default, Clone)]
pub struct EvalFlags {
    /// Clean test tree (defaults to <data_root>/test).
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Corrupted tree (defaults to <data_root>/corrupted).
    #[arg(long)]
    pub corrupted: Option<PathBuf>,
    /// Output directory (defaults to <report_dir>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub diffusion_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub classifier_ckpt: Option<PathBuf>,
    /// Comma-separated pipeline modes.
    #[arg(long)]
    pub modes: Option<String>,
    /// Comma-separated ensemble rules.
    #[arg(long)]
    pub rules: Option<String>,
    /// Retain adapted PNGs and the prediction dump.
    #[arg(long)]
    pub keep_artifacts: Option<bool>,
    /// Guidance step size w.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Guidance low-pass scale factor N.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Forward-diffusion depth t0.
    #[arg(long)]
    pub t0: Option<usize>,
}

/// Resolve the config (file → defaults) and apply global flag overrides.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.run.workers = workers;
    }
    if let Some(p) = &cli.data_root {
        cfg.paths.data_root = p.clone();
    }
    if let Some(p) = &cli.checkpoint_dir {
        cfg.paths.checkpoint_dir = p.clone();
    }
    if let Some(p) = &cli.report_dir {
        cfg.paths.report_dir = p.clone();
    }
    Ok(cfg)
}

/// Echo the effective config and a run record into `dir`.
fn write_run_record(dir: &Path, subcommand: &str, cfg: &RunConfig, started: Instant) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let cfg_path = dir.join("effective_config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;
    let record = format!(
        "subcommand = {subcommand:?}\nartifact_version = {ARTIFACT_VERSION:?}\n\
         severity_table_version = {:?}\nseed = {}\nworkers = {}\n\
         wall_time_secs = {:.3}\neffective_config = \"effective_config.toml\"\n",
        difta_core::corruption::SEVERITY_TABLE_VERSION,
        cfg.run.seed,
        cfg.run.workers,
        started.elapsed().as_secs_f64(),
    );
    let rec_path = dir.join("run_record.toml");
    fs::write(&rec_path, record).map_err(|e| CliError::io(&rec_path, e))?;
    Ok(())
}

fn parse_list<T, F: Fn(&str) -> Result<T, CliError>>(s: &str, f: F) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(f)
        .collect()
}

/// Entry point: returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category().name());
            match e.category() {
                crate::ErrorCategory::Config => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = effective_config(cli)?;
    match &cli.command {
        Command::Synth {
            out,
            classes,
            train_per_class,
            val_per_class,
            test_per_class,
        } => {
            if let Some(c) = classes {
                cfg.synth.classes = *c;
            }
            if let Some(n) = train_per_class {
                cfg.synth.train_per_class = *n;
            }
            if let Some(n) = val_per_class {
                cfg.synth.val_per_class = *n;
            }
            if let Some(n) = test_per_class {
                cfg.synth.test_per_class = *n;
            }
            let out_dir = out.clone().unwrap_or_else(|| cfg.paths.data_root.clone());
            let pool = thread_pool(cfg.run.workers)?;
            let report = pool.install(|| crate::synth::make_synthetic_dataset(&cfg.synthetic_spec(), &out_dir))?;
            println!(
                "synth: wrote {} images to {} (class separation {:.2})",
                report.images_written,
                out_dir.display(),
                report.separation
            );
            write_run_record(&out_dir, "synth", &cfg, started)
        }
        Command::TrainDiffusion { flags, timesteps } => {
            if let Some(t) = timesteps {
                cfg.diffusion.timesteps = *t;
            }
            apply_train_flags(&mut cfg, flags, true);
            let data_dir = flags
                .data
                .clone()
                .unwrap_or_else(|| cfg.paths.data_root.join("train"));
            let tree = scan_labeled_tree(&data_dir)?;
            let images: Vec<_> = tree.load_all()?.into_iter().map(|(img, _)| img).collect();
            let sched = NoiseSchedule::linear(
                cfg.diffusion.timesteps,
                cfg.diffusion.beta_start,
                cfg.diffusion.beta_end,
            )
            .map_err(|e| CliError::Train(e.to_string()))?;
            let init_seed = derive_seed(cfg.run.seed, &[b"stage", b"init-diffusion"]);
            let mut net = EpsilonNet::new(3, cfg.diffusion.width, init_seed);
            let tcfg = cfg.diffusion_train_config();
            let ckpt_dir = cfg.paths.checkpoint_dir.clone();
            let (b0, b1) = (cfg.diffusion.beta_start, cfg.diffusion.beta_end);
            let pool = thread_pool(cfg.run.workers)?;
            let history = pool.install(|| {
                train(
                    &mut net,
                    &images,
                    &tcfg,
                    &sched,
                    &RayonExecutor,
                    |step, model| {
                        let p = ckpt_dir.join(format!("diffusion_step{step:07}.ckpt"));
                        if let Err(e) =
                            checkpoint::save_diffusion(model, &sched, b0, b1, step as u64, tcfg.seed, &p)
                        {
                            eprintln!("warning: checkpoint at step {step} failed: {e}");
                        }
                    },
                )
            })
            .map_err(|e| CliError::Train(e.to_string()))?;
            let ckpt = ckpt_dir.join("diffusion.ckpt");
            checkpoint::save_diffusion(&net, &sched, b0, b1, history.len() as u64, tcfg.seed, &ckpt)?;
            checkpoint::save_loss_history(&history, &ckpt_dir.join("diffusion_loss.csv"))?;
            let tail = history.iter().rev().take(50).sum::<f64>() / history.len().min(50).max(1) as f64;
            println!(
                "train-diffusion: {} steps on {} images, final smoothed loss {tail:.4}, checkpoint {}",
                history.len(),
                images.len(),
                ckpt.display()
            );
            write_run_record(&ckpt_dir, "train-diffusion", &cfg, started)
        }
        Command::TrainClassifier { flags, val } => {
            apply_train_flags(&mut cfg, flags, false);
            let train_dir = flags
                .data
                .clone()
                .unwrap_or_else(|| cfg.paths.data_root.join("train"));
            let val_dir = val.clone().unwrap_or_else(|| cfg.paths.data_root.join("val"));
            let train_tree = scan_labeled_tree(&train_dir)?;
            let val_tree = scan_labeled_tree(&val_dir)?;
            if train_tree.classes != val_tree.classes {
                return Err(CliError::Data(
                    "train and val trees disagree on class directories".into(),
                ));
            }
            let train_set = train_tree.load_all()?;
            let val_set = val_tree.load_all()?;
            let (h, w) = (train_set[0].0.height(), train_set[0].0.width());
            let init_seed = derive_seed(cfg.run.seed, &[b"stage", b"init-classifier"]);
            let mut net = ClassifierNet::new(
                3,
                h,
                w,
                cfg.classifier.width,
                train_tree.classes.len(),
                init_seed,
            );
            let tcfg = cfg.classifier_train_config();
            let pool = thread_pool(cfg.run.workers)?;
            let stats = pool
                .install(|| train_classifier(&mut net, &train_set, &val_set, &tcfg, &RayonExecutor))
                .map_err(|e| CliError::Train(e.to_string()))?;
            let ckpt_dir = cfg.paths.checkpoint_dir.clone();
            let ckpt = ckpt_dir.join("classifier.ckpt");
            checkpoint::save_classifier(&net, stats.len() as u64, tcfg.seed, &ckpt)?;
            let hist_path = ckpt_dir.join("classifier_history.csv");
            let mut wtr = csv::Writer::from_path(&hist_path).map_err(|e| CliError::Data(e.to_string()))?;
            wtr.write_record(["epoch", "mean_loss", "train_accuracy", "val_accuracy"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            for s in &stats {
                wtr.write_record([
                    s.epoch.to_string(),
                    s.mean_loss.to_string(),
                    s.train_accuracy.to_string(),
                    s.val_accuracy.to_string(),
                ])
                .map_err(|e| CliError::Data(e.to_string()))?;
            }
            wtr.flush().map_err(|e| CliError::io(&hist_path, e))?;
            if let Some(last) = stats.last() {
                println!(
                    "train-classifier: {} epochs, train acc {:.4}, val acc {:.4}, checkpoint {}",
                    stats.len(),
                    last.train_accuracy,
                    last.val_accuracy,
                    ckpt.display()
                );
            }
            write_run_record(&ckpt_dir, "train-classifier", &cfg, started)
        }
        Command::Corrupt {
            input,
            output,
            kinds,
            severities,
            print_table,
        } => {
            if *print_table {
                print!("{}", severity_table_csv());
                return Ok(());
            }
            if let Some(k) = kinds {
                cfg.corrupt.kinds = k.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(s) = severities {
                cfg.corrupt.severities = parse_list(s, |p| {
                    p.parse::<u8>()
                        .map_err(|_| CliError::Config(format!("bad severity '{p}'")))
                })?;
            }
            let input_dir = input
                .clone()
                .unwrap_or_else(|| cfg.paths.data_root.join("test"));
            let output_dir = output
                .clone()
                .unwrap_or_else(|| cfg.paths.data_root.join("corrupted"));
            let opts = CorruptOptions {
                kinds: cfg.corrupt_kinds()?,
                severities: cfg.corrupt.severities.clone(),
                seed: cfg.run.seed,
            };
            let pool = thread_pool(cfg.run.workers)?;
            let manifest = pool.install(|| corrupt_dataset(&input_dir, &output_dir, &opts))?;
            println!(
                "corrupt: wrote {} images to {}",
                manifest.len(),
                output_dir.display()
            );
            write_run_record(&output_dir, "corrupt", &cfg, started)
        }
        Command::Adapt {
            input,
            output,
            ckpt,
            mode,
            t0,
            step_size,
            scale,
        } => {
            if let Some(m) = mode {
                cfg.guidance.mode = m.clone();
            }
            if let Some(v) = t0 {
                cfg.guidance.t0 = *v;
            }
            if let Some(v) = step_size {
                cfg.guidance.step_size = *v;
            }
            if let Some(v) = scale {
                cfg.guidance.scale = *v;
            }
            let issues = cfg.validate();
            if !issues.is_empty() {
                return Err(CliError::Config(issues.join("; ")));
            }
            let ckpt_path = ckpt
                .clone()
                .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("diffusion.ckpt"));
            let (net, sched, _) = checkpoint::load_diffusion(&ckpt_path)?;
            let gcfg = cfg.guidance_config();
            let inputs: Vec<PathBuf> = if input.is_dir() {
                let mut v = Vec::new();
                collect_pngs(input, &mut v)?;
                v.sort();
                v
            } else {
                vec![input.clone()]
            };
            if inputs.is_empty() {
                return Err(CliError::Data(format!(
                    "{}: no PNG images found",
                    input.display()
                )));
            }
            let pool = thread_pool(cfg.run.workers)?;
            let gcfg_ref = &gcfg;
            let net_ref = &net;
            let sched_ref = &sched;
            let rows: Vec<Result<(PathBuf, u64), CliError>> = pool.install(|| {
                use rayon::prelude::*;
                inputs
                    .par_iter()
                    .map(|p| {
                        let rel = if input.is_dir() {
                            p.strip_prefix(input).unwrap_or(p).to_path_buf()
                        } else {
                            PathBuf::from(p.file_name().unwrap_or_default())
                        };
                        let img = pngio::load_image(p)?;
                        let seed = derive_seed(
                            cfg.run.seed,
                            &[b"adapt", gcfg_ref.mode.name().as_bytes(), rel.to_string_lossy().as_bytes()],
                        );
                        let adapted = adapt(&img, net_ref, sched_ref, gcfg_ref, seed)
                            .map_err(|e| CliError::Adapt(format!("{}: {e}", p.display())))?;
                        pngio::save_image(&adapted, &output.join(&rel))?;
                        Ok((rel, seed))
                    })
                    .collect()
            });
            let mut sidecar = csv::Writer::from_path(output.join("adapted_index.csv"))
                .map_err(|e| CliError::Data(e.to_string()))?;
            sidecar
                .write_record(["source_file", "mode", "t0", "step_size", "scale_factor", "seed"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut count = 0usize;
            for row in rows {
                let (rel, seed) = row?;
                sidecar
                    .write_record([
                        rel.to_string_lossy().to_string(),
                        gcfg.mode.name().to_string(),
                        gcfg.t0.to_string(),
                        gcfg.step_size.to_string(),
                        gcfg.scale.to_string(),
                        seed.to_string(),
                    ])
                    .map_err(|e| CliError::Data(e.to_string()))?;
                count += 1;
            }
            sidecar
                .flush()
                .map_err(|e| CliError::io(output.join("adapted_index.csv"), e))?;
            println!("adapt: wrote {count} adapted images to {}", output.display());
            write_run_record(output, "adapt", &cfg, started)
        }
        Command::Evaluate { flags } => {
            let (outcome, out_dir, classes) = run_evaluation(&mut cfg, flags, None)?;
            bench::emit_report(&outcome.result, &out_dir)?;
            bench::write_dump_csv(&outcome.dump, classes, &out_dir.join("predictions.csv"))?;
            print_summary(&outcome.result);
            write_run_record(&out_dir, "evaluate", &cfg, started)
        }
        Command::Ablate { suite, flags } => {
            let suite = AblationSuite::parse(suite)?;
            let (outcome, table, out_dir, classes) = run_ablation_cmd(&mut cfg, flags, suite)?;
            bench::emit_report(&outcome.result, &out_dir)?;
            bench::write_dump_csv(&outcome.dump, classes, &out_dir.join("predictions.csv"))?;
            let text = bench::format_ablation(&table);
            fs::write(out_dir.join("ablation.txt"), &text)
                .map_err(|e| CliError::io(out_dir.join("ablation.txt"), e))?;
            let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))
                .map_err(|e| CliError::Data(e.to_string()))?;
            w.write_record(["suite", "group", "entry", "accuracy", "cells"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            for row in &table.rows {
                w.write_record([
                    table.suite.name().to_string(),
                    row.group.clone(),
                    row.entry.clone(),
                    row.accuracy.to_string(),
                    row.cells.to_string(),
                ])
                .map_err(|e| CliError::Data(e.to_string()))?;
            }
            w.flush()
                .map_err(|e| CliError::io(out_dir.join("ablation.csv"), e))?;
            print!("{text}");
            write_run_record(&out_dir, "ablate", &cfg, started)
        }
        Command::Report { results, out } => {
            let results_path = results
                .clone()
                .unwrap_or_else(|| cfg.paths.report_dir.join("results.csv"));
            let out_dir = out.clone().unwrap_or_else(|| cfg.paths.report_dir.clone());
            let result = bench::read_results_csv(&results_path)?;
            bench::emit_report(&result, &out_dir)?;
            print_summary(&result);
            write_run_record(&out_dir, "report", &cfg, started)
        }
    }
}

fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags, diffusion: bool) {
    if diffusion {
        if let Some(v) = flags.epochs {
            cfg.diffusion.epochs = v;
        }
        if let Some(v) = flags.width {
            cfg.diffusion.width = v;
        }
        if let Some(v) = flags.batch_size {
            cfg.diffusion.batch_size = v;
        }
        if let Some(v) = flags.learning_rate {
            cfg.diffusion.learning_rate = v;
        }
    } else {
        if let Some(v) = flags.epochs {
            cfg.classifier.epochs = v;
        }
        if let Some(v) = flags.width {
            cfg.classifier.width = v;
        }
        if let Some(v) = flags.batch_size {
            cfg.classifier.batch_size = v;
        }
        if let Some(v) = flags.learning_rate {
            cfg.classifier.learning_rate = v;
        }
    }
}

fn apply_eval_flags(cfg: &mut RunConfig, flags: &EvalFlags) -> Result<(), CliError> {
    if let Some(m) = &flags.modes {
        cfg.evaluate.modes = m.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(r) = &flags.rules {
        cfg.evaluate.rules = r
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(k) = flags.keep_artifacts {
        cfg.evaluate.keep_artifacts = k;
    }
    if let Some(v) = flags.step_size {
        cfg.guidance.step_size = v;
    }
    if let Some(v) = flags.scale {
        cfg.guidance.scale = v;
    }
    if let Some(v) = flags.t0 {
        cfg.guidance.t0 = v;
    }
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(issues.join("; ")))
    }
}

type EvalSetup = (
    ClassifierNet,
    EpsilonNet,
    NoiseSchedule,
    PathBuf,
    PathBuf,
    PathBuf,
);

fn eval_setup(cfg: &mut RunConfig, flags: &EvalFlags) -> Result<EvalSetup, CliError> {
    apply_eval_flags(cfg, flags)?;
    let original = flags
        .original
        .clone()
        .unwrap_or_else(|| cfg.paths.data_root.join("test"));
    let corrupted = flags
        .corrupted
        .clone()
        .unwrap_or_else(|| cfg.paths.data_root.join("corrupted"));
    let out_dir = flags
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.report_dir.clone());
    let cls_path = flags
        .classifier_ckpt
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("classifier.ckpt"));
    let dif_path = flags
        .diffusion_ckpt
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("diffusion.ckpt"));
    let (classifier, _) = checkpoint::load_classifier(&cls_path)?;
    let (denoiser, sched, _) = checkpoint::load_diffusion(&dif_path)?;
    if cfg.guidance.t0 > sched.len() {
        return Err(CliError::Config(format!(
            "guidance.t0 ({}) exceeds the checkpoint's timesteps ({})",
            cfg.guidance.t0,
            sched.len()
        )));
    }
    Ok((classifier, denoiser, sched, original, corrupted, out_dir))
}

fn run_evaluation(
    cfg: &mut RunConfig,
    flags: &EvalFlags,
    override_modes: Option<Vec<AdaptMode>>,
) -> Result<(bench::EvalOutcome, PathBuf, usize), CliError> {
    let (classifier, denoiser, sched, original, corrupted, out_dir) = eval_setup(cfg, flags)?;
    let ecfg = EvalConfig {
        model_tag: cfg.evaluate.model_tag.clone(),
        modes: override_modes.unwrap_or_else(|| cfg.eval_modes()),
        rules: cfg.eval_rules(),
        guidance: cfg.guidance_config(),
        seed: derive_seed(cfg.run.seed, &[b"stage", b"evaluate"]),
        keep_artifacts: cfg.evaluate.keep_artifacts,
        artifacts_dir: Some(out_dir.clone()),
    };
    let pool = thread_pool(cfg.run.workers)?;
    let classes = classifier.classes;
    let outcome = pool.install(|| {
        bench::evaluate(&classifier, &denoiser, &sched, &original, &corrupted, &ecfg)
    })?;
    Ok((outcome, out_dir, classes))
}

fn run_ablation_cmd(
    cfg: &mut RunConfig,
    flags: &EvalFlags,
    suite: AblationSuite,
) -> Result<(bench::EvalOutcome, bench::AblationTable, PathBuf, usize), CliError> {
    let (classifier, denoiser, sched, original, corrupted, out_dir) = eval_setup(cfg, flags)?;
    let base = EvalConfig {
        model_tag: cfg.evaluate.model_tag.clone(),
        modes: cfg.eval_modes(),
        rules: cfg.eval_rules(),
        guidance: cfg.guidance_config(),
        seed: derive_seed(cfg.run.seed, &[b"stage", b"evaluate"]),
        keep_artifacts: cfg.evaluate.keep_artifacts,
        artifacts_dir: Some(out_dir.clone()),
    };
    let pool = thread_pool(cfg.run.workers)?;
    let classes = classifier.classes;
    let (outcome, table) = pool.install(|| {
        bench::run_ablation(suite, &classifier, &denoiser, &sched, &original, &corrupted, &base)
    })?;
    Ok((outcome, table, out_dir, classes))
}

fn print_summary(result: &bench::EvalResult) {
    if let Some(orig) = result.find(bench::PIPELINE_ORIGINAL, 0, bench::PIPELINE_ORIGINAL) {
        println!("original: {:.4} (n={})", orig.accuracy(), orig.n);
    }
    let mut pipelines: Vec<String> = Vec::new();
    for r in &result.rows {
        if r.severity >= 1 && !pipelines.contains(&r.pipeline) {
            pipelines.push(r.pipeline.clone());
        }
    }
    pipelines.sort();
    for p in pipelines {
        if let Some(mean) = result.pipeline_mean(&p, None) {
            println!("{p}: mean over cells {mean:.4}");
        }
    }
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if p
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false)
        {
            out.push(p);
        }
    }
    Ok(())
}
