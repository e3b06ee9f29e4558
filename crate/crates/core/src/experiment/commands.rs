//! The commands behind the `swa` binary. Every command is a plain function so tests can
//! drive it without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ScheduleVariant};
use super::report;
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::flatness::{self, FlatnessReport};
use crate::model::Evaluation;
use crate::param::ParamVector;
use crate::swa;
use crate::train::{self, PhaseTiming, Split, TrainOutcome, Weights};

pub const MIN_COMPARISON_SEEDS: usize = 3;
pub const MIN_COMPARISON_VARIANTS: usize = 2;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replaces the config's seed list with this single seed.
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

/// A loaded config plus the original text, for copying into run directories.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, text) = ExperimentConfig::load(path)?;
        Ok(LoadedConfig { config, text })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(LoadedConfig {
            config: ExperimentConfig::from_toml_str(text)?,
            text: text.to_string(),
        })
    }

    fn with_options(&self, opts: &RunOptions) -> Result<ExperimentConfig> {
        let mut cfg = self.config.clone();
        if let Some(s) = opts.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &opts.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Error::config("output_dir", "no output directory (set output_dir or pass --out)"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(p, &bytes)
}

fn progress(opts: &RunOptions, msg: impl AsRef<str>) {
    if !opts.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn weights_sha256(w: &ParamVector) -> String {
    hex::encode(Sha256::digest(checkpoint::encode(w)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightsSummary {
    pub sha256: String,
    pub train: Evaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub total_steps: u64,
    pub final_train_loss: f64,
    #[serde(rename = "final")]
    pub final_weights: WeightsSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa: Option<WeightsSummary>,
    /// Components in the average, the stage-2 start included.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa_components: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub crate_version: String,
    pub seeds: Vec<u64>,
}

/// Per-seed results returned to callers (and summarised on disk).
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: SeedSummary,
    pub timing: PhaseTiming,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub config_digest: String,
    pub seeds: Vec<SeedRun>,
}

fn weights_summary(outcome: &TrainOutcome, which: Weights, w: &ParamVector) -> Result<WeightsSummary> {
    let train = *outcome
        .log
        .final_eval(which, Split::Train)
        .ok_or_else(|| Error::InvalidArgument("run produced no final evaluation".into()))?;
    Ok(WeightsSummary {
        sha256: weights_sha256(w),
        train,
        test: outcome.log.final_eval(which, Split::Test).copied(),
    })
}

/// Plain training for every seed.
pub fn cmd_train(loaded: &LoadedConfig, opts: &RunOptions) -> Result<RunResult> {
    run_command("train", loaded, opts, false)
}

/// Two-stage training with weight averaging for every seed.
pub fn cmd_swa_train(loaded: &LoadedConfig, opts: &RunOptions) -> Result<RunResult> {
    run_command("swa-train", loaded, opts, true)
}

fn run_command(command: &str, loaded: &LoadedConfig, opts: &RunOptions, averaging: bool) -> Result<RunResult> {
    let cfg = loaded.with_options(opts)?;
    let policy = if averaging { Some(cfg.swa_policy()?) } else { None };
    let model = cfg.model()?;
    let optimizer = cfg.optimizer_config()?;
    let schedule = cfg.schedule()?;
    let digest = cfg.digest();
    let dir = output_dir(&cfg)?;
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), loaded.text.as_bytes())?;
    write_json(
        &dir.join("run.json"),
        &RunManifest {
            command: command.to_string(),
            config_digest: digest.clone(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: cfg.seeds.clone(),
        },
    )?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        progress(opts, format!("{command}: seed {seed}"));
        let data = cfg.dataset(seed)?;
        let settings = cfg.settings(seed);
        let outcome = match &policy {
            Some(p) => train::swa_train(&model, &data, optimizer, &schedule, p, &settings)?,
            None => train::train(&model, &data, optimizer, &schedule, &settings)?,
        };
        let seed_dir = dir.join(format!("seed-{seed}"));
        create_dir(&seed_dir)?;
        let meta = |step| CheckpointMeta::now(step, seed, &digest);
        checkpoint::write_with_meta(seed_dir.join("initial.swck"), &outcome.initial, &meta(0))?;
        checkpoint::write_with_meta(seed_dir.join("final.swck"), &outcome.final_weights, &meta(cfg.total_steps))?;
        if let Some(w) = &outcome.swa {
            checkpoint::write_with_meta(seed_dir.join("swa.swck"), w, &meta(cfg.total_steps))?;
        }
        if !outcome.collections.is_empty() {
            let cdir = seed_dir.join("collect");
            create_dir(&cdir)?;
            for c in &outcome.collections {
                let p = cdir.join(format!("stage2-{:08}.swck", c.stage2_step));
                checkpoint::write_with_meta(p, &c.weights, &meta(c.global_step))?;
            }
        }
        write_json(&seed_dir.join("metrics.json"), &outcome.log)?;
        write_json(&seed_dir.join("timing.json"), &outcome.log.timing)?;

        let summary = SeedSummary {
            command: command.to_string(),
            config_digest: digest.clone(),
            seed,
            total_steps: cfg.total_steps,
            final_train_loss: outcome.log.steps.last().map_or(f64::NAN, |s| s.train_loss),
            final_weights: weights_summary(&outcome, Weights::Iterate, &outcome.final_weights)?,
            swa: outcome
                .swa
                .as_ref()
                .map(|w| weights_summary(&outcome, Weights::Swa, w))
                .transpose()?,
            swa_components: outcome.swa.as_ref().map(|_| outcome.components),
        };
        write_json(&seed_dir.join("summary.json"), &summary)?;
        progress(opts, report::seed_line(&summary));
        runs.push(SeedRun {
            seed,
            dir: seed_dir,
            timing: outcome.log.timing,
            summary,
            outcome,
        });
    }
    let summaries: Vec<&SeedSummary> = runs.iter().map(|r| &r.summary).collect();
    write_json(&dir.join("summary.json"), &summaries)?;
    Ok(RunResult {
        dir,
        config_digest: digest,
        seeds: runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatnessOutput {
    pub config_digest: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub report: FlatnessReport,
}

/// Curvature of a checkpoint on the training split the config produces for `seed`
/// (the first config seed unless overridden). Writes `<out>/<stem>.flatness.json`
/// when an output directory is given.
pub fn cmd_flatness(checkpoint_path: &Path, loaded: &LoadedConfig, opts: &RunOptions) -> Result<FlatnessOutput> {
    let cfg = loaded.with_options(opts)?;
    let seed = cfg.seeds[0];
    let w = checkpoint::read(checkpoint_path)?;
    let model = cfg.model()?;
    let w = ParamVector::new(w.values().to_vec(), model.layout()).map_err(|_| {
        Error::Dimension(format!(
            "{} has {} parameters, model needs {}",
            checkpoint_path.display(),
            w.len(),
            model.param_count()
        ))
    })?;
    let data = cfg.dataset(seed)?;
    let mask = cfg.flatness_mask(&w)?;
    progress(opts, format!("flatness: {}", checkpoint_path.display()));
    let report = flatness::flatness_report(&model, &w, &data, &mask, &cfg.flatness_config(), seed)?;
    let out = FlatnessOutput {
        config_digest: cfg.digest(),
        checkpoint: checkpoint_path.display().to_string(),
        checkpoint_sha256: weights_sha256(&w),
        seed,
        report,
    };
    if let Some(dir) = &cfg.output_dir {
        create_dir(dir)?;
        let stem = checkpoint_path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        write_json(&dir.join(format!("{stem}.flatness.json")), &out)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SoupOutput {
    pub out: String,
    pub components: usize,
    pub sha256: String,
}

/// Average checkpoint files into `out`.
pub fn cmd_soup<P: AsRef<Path>>(paths: &[P], out: &Path) -> Result<SoupOutput> {
    let w = swa::soup_average(paths)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::write(out, &w)?;
    Ok(SoupOutput {
        out: out.display().to_string(),
        components: paths.len(),
        sha256: weights_sha256(&w),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub swa_test: f64,
    pub final_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: ScheduleVariant,
    pub per_seed: Vec<SeedResult>,
    pub swa_mean: f64,
    pub swa_std: f64,
    pub final_mean: f64,
    pub final_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub config_digest: String,
    /// `accuracy` for classifiers, `rmse` for regression.
    pub metric: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().fold(0.0, |a, x| a + x) / n;
    let std = if xs.len() > 1 {
        (xs.iter().fold(0.0, |a, x| a + (x - mean) * (x - mean)) / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Run every stage-2 schedule variant over every seed and compare the averaged models
/// on the held-out split. Writes `comparison.json` and `comparison.txt` when an output
/// directory is configured.
pub fn cmd_compare_schedules(loaded: &LoadedConfig, opts: &RunOptions) -> Result<ComparisonReport> {
    let cfg = loaded.with_options(opts)?;
    if cfg.variants.len() < MIN_COMPARISON_VARIANTS {
        return Err(Error::config(
            "variants",
            format!("need at least {MIN_COMPARISON_VARIANTS} schedule variants, got {}", cfg.variants.len()),
        ));
    }
    if cfg.seeds.len() < MIN_COMPARISON_SEEDS {
        return Err(Error::config(
            "seeds",
            format!("need at least {MIN_COMPARISON_SEEDS} seeds, got {}", cfg.seeds.len()),
        ));
    }
    let model = cfg.model()?;
    let optimizer = cfg.optimizer_config()?;
    let schedule = cfg.schedule()?;
    let policies = cfg
        .variants
        .iter()
        .map(|v| cfg.variant_policy(v))
        .collect::<Result<Vec<_>>>()?;
    let datasets = cfg.seeds.iter().map(|&s| cfg.dataset(s)).collect::<Result<Vec<_>>>()?;
    if datasets.iter().any(|d| d.test.is_empty()) {
        return Err(Error::config("test_fraction", "comparison needs a non-empty test split"));
    }
    let classification = datasets[0].num_classes().is_some();
    let metric = |e: &Evaluation| if classification { e.accuracy } else { e.rmse }.expect("metric present");

    let jobs: Vec<(usize, usize)> = (0..policies.len())
        .flat_map(|v| (0..cfg.seeds.len()).map(move |s| (v, s)))
        .collect();
    progress(opts, format!("compare-schedules: {} runs", jobs.len()));
    let results = jobs
        .par_iter()
        .map(|&(v, s)| {
            let mut settings = cfg.settings(cfg.seeds[s]);
            settings.keep_collections = false;
            let out = train::swa_train(&model, &datasets[s], optimizer, &schedule, &policies[v], &settings)?;
            let swa = out.log.final_eval(Weights::Swa, Split::Test).expect("test split present");
            let fin = out.log.final_eval(Weights::Iterate, Split::Test).expect("test split present");
            Ok(SeedResult {
                seed: cfg.seeds[s],
                swa_test: metric(swa),
                final_test: metric(fin),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let variants = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let per_seed: Vec<SeedResult> = results[v * cfg.seeds.len()..(v + 1) * cfg.seeds.len()].to_vec();
            let swa: Vec<f64> = per_seed.iter().map(|r| r.swa_test).collect();
            let fin: Vec<f64> = per_seed.iter().map(|r| r.final_test).collect();
            let (swa_mean, swa_std) = mean_std(&swa);
            let (final_mean, final_std) = mean_std(&fin);
            VariantResult {
                variant: variant.clone(),
                per_seed,
                swa_mean,
                swa_std,
                final_mean,
                final_std,
            }
        })
        .collect();
    let report = ComparisonReport {
        config_digest: cfg.digest(),
        metric: if classification { "accuracy" } else { "rmse" }.to_string(),
        split: "test".to_string(),
        seeds: cfg.seeds.clone(),
        variants,
    };
    if let Some(dir) = &cfg.output_dir {
        create_dir(dir)?;
        write_json(&dir.join("comparison.json"), &report)?;
        write_file(&dir.join("comparison.txt"), report::comparison_table(&report).as_bytes())?;
    }
    Ok(report)
}
