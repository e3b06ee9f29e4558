//! Experiment configuration: a flat TOML document with a fixed schema.
//!
//! Unknown keys are rejected. The digest is the SHA-256 of the canonical JSON form of
//! the parsed config with `output_dir` removed, so the same experiment written to two
//! directories carries the same digest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::flatness::{self, FlatnessConfig};
use crate::model::{Activation, LossKind, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerKind, Schedule, ScheduleKind};
use crate::param::{GroupMask, ParamVector};
use crate::swa::{SwaPolicy, DEFAULT_START_FRACTION};
use crate::train::TrainSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianBlobs,
    Csv,
}

/// One stage-2 schedule in a comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleVariant {
    pub name: String,
    pub swa_schedule: ScheduleKind,
    pub swa_lr_max: f64,
    #[serde(default)]
    pub swa_lr_min: Option<f64>,
    #[serde(default)]
    pub swa_cycle_len: Option<u64>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_loss() -> LossKind {
    LossKind::SoftmaxCrossEntropy
}
fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub l2_coeff: f64,

    pub dataset: DatasetKind,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub noise_sd: Option<f64>,
    #[serde(default)]
    pub blob_centers: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub blob_sd: Option<f64>,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub batch_size: usize,

    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub adam_eps: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,

    pub schedule: ScheduleKind,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: Option<f64>,
    #[serde(default)]
    pub cycle_len: Option<u64>,

    #[serde(default)]
    pub swa_interval: Option<u64>,
    #[serde(default)]
    pub swa_start_fraction: Option<f64>,
    #[serde(default)]
    pub swa_schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub swa_lr_max: Option<f64>,
    #[serde(default)]
    pub swa_lr_min: Option<f64>,
    #[serde(default)]
    pub swa_cycle_len: Option<u64>,
    #[serde(default = "default_true")]
    pub save_collections: bool,

    pub total_steps: u64,
    #[serde(default)]
    pub eval_every: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,

    #[serde(default)]
    pub hvp_epsilon: Option<f64>,
    #[serde(default)]
    pub power_tol: Option<f64>,
    #[serde(default)]
    pub power_max_iter: Option<usize>,
    #[serde(default)]
    pub hutchinson_samples: Option<usize>,
    /// Parameter groups left out of the curvature estimates.
    #[serde(default)]
    pub flatness_exclude: Vec<String>,

    #[serde(default)]
    pub variants: Vec<ScheduleVariant>,
}

fn at<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml_str(&text)?, text))
    }

    /// Check every section by building the runtime objects it describes.
    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.optimizer_config()?;
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must be in [0, 1)"));
        }
        match self.dataset {
            DatasetKind::TwoMoons => {
                self.require(self.n_samples.is_some(), "n_samples", "two-moons")?;
            }
            DatasetKind::GaussianBlobs => {
                self.require(self.n_samples.is_some(), "n_samples", "gaussian-blobs")?;
                self.require(self.blob_centers.is_some(), "blob_centers", "gaussian-blobs")?;
            }
            DatasetKind::Csv => self.require(self.csv_path.is_some(), "csv_path", "csv")?,
        }
        if self.swa_interval.is_some() {
            self.swa_policy()?;
        }
        for (k, v) in self.variants.iter().enumerate() {
            at(&format!("variants[{k}]"), self.variant_policy(v).map(|_| ()))?;
        }
        let f = self.flatness_config();
        if !(f.hvp_epsilon > 0.0) {
            return Err(Error::config("hvp_epsilon", "must be positive"));
        }
        if !(f.tol > 0.0) {
            return Err(Error::config("power_tol", "must be positive"));
        }
        if f.max_iter == 0 {
            return Err(Error::config("power_max_iter", "must be positive"));
        }
        if f.samples == 0 {
            return Err(Error::config("hutchinson_samples", "must be positive"));
        }
        Ok(())
    }

    fn require(&self, present: bool, key: &str, kind: &str) -> Result<()> {
        if present {
            Ok(())
        } else {
            Err(Error::config(key, format!("required for dataset `{kind}`")))
        }
    }

    /// Hex SHA-256 of the canonical JSON form, `output_dir` excluded.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn model(&self) -> Result<ModelSpec> {
        at(
            "layer_sizes",
            ModelSpec::new(self.layer_sizes.clone(), self.activation, self.loss, self.l2_coeff),
        )
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let base = match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(),
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd_momentum(0.9),
            OptimizerKind::AdamW => OptimizerConfig::adamw(),
        };
        let cfg = OptimizerConfig {
            momentum: self.momentum.unwrap_or(base.momentum),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            eps: self.adam_eps.unwrap_or(base.eps),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            grad_clip: self.grad_clip,
            ..base
        };
        at("optimizer", cfg.validate().map(|_| cfg))
    }

    /// Schedule for the whole run (plain training) or stage 1 (averaging runs).
    pub fn schedule(&self) -> Result<Schedule> {
        at(
            "schedule",
            build_schedule(self.schedule, self.lr_max, self.lr_min, self.cycle_len, self.total_steps),
        )
    }

    pub fn swa_policy(&self) -> Result<SwaPolicy> {
        let interval = self
            .swa_interval
            .ok_or_else(|| Error::config("swa_interval", "required for averaging runs"))?;
        let kind = self.swa_schedule.unwrap_or(ScheduleKind::HighConstant);
        let lr = self.swa_lr_max.unwrap_or(self.lr_max);
        self.policy_with(interval, kind, lr, self.swa_lr_min, self.swa_cycle_len)
    }

    pub fn variant_policy(&self, v: &ScheduleVariant) -> Result<SwaPolicy> {
        let interval = self
            .swa_interval
            .ok_or_else(|| Error::config("swa_interval", "required for schedule comparisons"))?;
        self.policy_with(interval, v.swa_schedule, v.swa_lr_max, v.swa_lr_min, v.swa_cycle_len)
    }

    fn policy_with(&self, interval: u64, kind: ScheduleKind, lr_max: f64, lr_min: Option<f64>, cycle: Option<u64>) -> Result<SwaPolicy> {
        let start = self.swa_start_fraction.unwrap_or(DEFAULT_START_FRACTION);
        let probe = SwaPolicy::new(interval, start, Schedule::constant(0.0, 1)?);
        let probe = at("swa_interval", probe)?;
        let (_, stage2) = at("swa_start_fraction", probe.split(self.total_steps))?;
        let schedule = at("swa_schedule", build_schedule(kind, lr_max, lr_min, cycle, stage2))?;
        Ok(SwaPolicy { schedule, ..probe })
    }

    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            seed,
            keep_collections: self.save_collections,
        }
    }

    /// The dataset for `seed`, drawn from that seed's data stream and encoded for the model.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let mut d = match self.dataset {
            DatasetKind::TwoMoons => data::two_moons(self.n_samples.unwrap_or(0), self.noise_sd.unwrap_or(0.0), seed),
            DatasetKind::GaussianBlobs => data::gaussian_blobs(
                self.n_samples.unwrap_or(0),
                self.blob_centers.as_deref().unwrap_or(&[]),
                self.blob_sd.unwrap_or(1.0),
                seed,
            ),
            DatasetKind::Csv => data::load_csv(self.csv_path.as_ref().expect("validated")),
        };
        if let Ok(d) = d.as_mut() {
            d.resplit(self.test_fraction, seed)?;
            d.seed = seed;
        }
        let d = match d {
            Err(e @ (Error::Io { .. } | Error::Parse { .. } | Error::EmptyDataset(_))) => return Err(e),
            other => at("dataset", other)?,
        };
        if d.train.is_empty() {
            return Err(Error::config("test_fraction", "leaves no training rows"));
        }
        at("dataset", d.for_model(&self.model()?))
    }

    pub fn flatness_config(&self) -> FlatnessConfig {
        FlatnessConfig {
            hvp_epsilon: self.hvp_epsilon.unwrap_or(flatness::DEFAULT_HVP_EPSILON),
            tol: self.power_tol.unwrap_or(flatness::DEFAULT_TOL),
            max_iter: self.power_max_iter.unwrap_or(flatness::DEFAULT_MAX_ITER),
            samples: self.hutchinson_samples.unwrap_or(flatness::DEFAULT_SAMPLES),
        }
    }

    pub fn flatness_mask(&self, w: &ParamVector) -> Result<GroupMask> {
        at("flatness_exclude", GroupMask::excluding(w, &self.flatness_exclude))
    }
}

fn build_schedule(kind: ScheduleKind, lr_max: f64, lr_min: Option<f64>, cycle: Option<u64>, total: u64) -> Result<Schedule> {
    match kind {
        ScheduleKind::Constant => Schedule::constant(lr_max, total),
        ScheduleKind::HighConstant => Schedule::high_constant(lr_max, total),
        ScheduleKind::LinearDecay => Schedule::linear_decay(lr_max, total),
        ScheduleKind::Cyclical => {
            let min = lr_min.ok_or_else(|| Error::InvalidArgument("cyclical schedule needs a minimum rate".into()))?;
            let k = cycle.ok_or_else(|| Error::InvalidArgument("cyclical schedule needs a cycle length".into()))?;
            Schedule::cyclical(lr_max, min, k, total)
        }
    }
}
