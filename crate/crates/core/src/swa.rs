//! Online weight averaging and offline checkpoint soups.
//!
//! The running average follows the classic two-stage recipe: when averaging begins the
//! current weights become the first component, then every `K`-th stage-2 step folds the
//! current iterate in with `w_swa <- (w_swa * n + w) / (n + 1)`, where `n = i / K` is the
//! number of components already averaged and `i` counts stage-2 steps from 1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::Schedule;
use crate::param::ParamVector;

/// Fraction of the step budget spent before averaging starts.
pub const DEFAULT_START_FRACTION: f64 = 0.5;
/// Start point of the original computer-vision recipe, kept for comparisons.
pub const CLASSIC_START_FRACTION: f64 = 0.75;

/// When and how often to average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwaPolicy {
    /// Collection interval `K`, counted in optimizer steps.
    pub interval: u64,
    pub start_fraction: f64,
    /// Stage-2 schedule; its step budget is re-fitted to the stage-2 length at run time.
    pub schedule: Schedule,
}

impl SwaPolicy {
    pub fn new(interval: u64, start_fraction: f64, schedule: Schedule) -> Result<Self> {
        let p = SwaPolicy {
            interval,
            start_fraction,
            schedule,
        };
        if interval == 0 {
            return Err(Error::InvalidArgument("averaging interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&start_fraction) {
            return Err(Error::InvalidArgument(format!("start fraction {start_fraction} not in [0, 1)")));
        }
        Ok(p)
    }

    /// Steps run before averaging begins: `ceil(start_fraction * total_steps)`.
    pub fn stage1_steps(&self, total_steps: u64) -> u64 {
        (self.start_fraction * total_steps as f64).ceil() as u64
    }

    /// `(stage1, stage2)` step counts, checking stage 2 fits at least one collection.
    pub fn split(&self, total_steps: u64) -> Result<(u64, u64)> {
        let s1 = self.stage1_steps(total_steps).min(total_steps);
        let s2 = total_steps - s1;
        if s2 < self.interval {
            return Err(Error::InvalidArgument(format!(
                "averaging stage has {s2} steps, fewer than the interval {}",
                self.interval
            )));
        }
        Ok((s1, s2))
    }

    /// Number of collections a stage of `stage2_steps` performs.
    pub fn collections(&self, stage2_steps: u64) -> u64 {
        stage2_steps / self.interval
    }

    /// Stage-2 schedule fitted to `stage2_steps`.
    pub fn stage2_schedule(&self, stage2_steps: u64) -> Result<Schedule> {
        self.schedule.with_total_steps(stage2_steps)
    }
}

/// Running average `W_SWA` and its bookkeeping.
#[derive(Clone, Debug)]
pub struct SwaState {
    w_swa: ParamVector,
    components: u64,
    steps_in_stage2: u64,
    interval: u64,
}

impl SwaState {
    /// Start averaging from `w`, which counts as the first component.
    pub fn init(w: &ParamVector, interval: u64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidArgument("averaging interval must be >= 1".into()));
        }
        w.ensure_finite("averaging start weights")?;
        Ok(SwaState {
            w_swa: w.clone(),
            components: 1,
            steps_in_stage2: 0,
            interval,
        })
    }

    /// Feed the post-update weights of stage-2 step `i`. Returns whether `w` was absorbed.
    pub fn observe(&mut self, w: &ParamVector, i: u64) -> Result<bool> {
        if i != self.steps_in_stage2 + 1 {
            return Err(Error::InvalidArgument(format!(
                "stage-2 step {i} observed after step {}",
                self.steps_in_stage2
            )));
        }
        self.w_swa.check_layout(w)?;
        self.steps_in_stage2 = i;
        if !i.is_multiple_of(self.interval) {
            return Ok(false);
        }
        let n_model = i / self.interval;
        debug_assert_eq!(n_model, self.components);
        self.w_swa.running_mean_update(w, n_model)?;
        self.components = n_model + 1;
        Ok(true)
    }

    pub fn average(&self) -> &ParamVector {
        &self.w_swa
    }

    pub fn into_average(self) -> ParamVector {
        self.w_swa
    }

    /// Components in the average, the starting weights included.
    pub fn components(&self) -> u64 {
        self.components
    }

    pub fn steps_in_stage2(&self) -> u64 {
        self.steps_in_stage2
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }
}

/// Arithmetic mean of same-layout vectors, summed in input order.
pub fn average(vectors: &[ParamVector]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut sum = first.zeros_like();
    for v in vectors {
        sum.axpy_in_place(1.0, v)?;
    }
    sum.scale_in_place(1.0 / vectors.len() as f64)?;
    Ok(sum)
}

/// Load `paths` and return their mean.
pub fn soup_average<P: AsRef<Path>>(paths: &[P]) -> Result<ParamVector> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("soup needs at least one checkpoint".into()));
    }
    let vectors = paths.iter().map(checkpoint::read).collect::<Result<Vec<_>>>()?;
    for (p, v) in paths.iter().zip(&vectors).skip(1) {
        vectors[0]
            .check_layout(v)
            .map_err(|e| Error::Layout(format!("{}: {e}", p.as_ref().display())))?;
    }
    average(&vectors)
}
