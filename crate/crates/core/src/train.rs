//! The training loop shared by plain runs and averaging runs.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, Evaluation, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerState, Schedule};
use crate::param::ParamVector;
use crate::swa::{SwaPolicy, SwaState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub total_steps: u64,
    /// Evaluate every this many steps; 0 only evaluates at the end.
    pub eval_every: u64,
    pub seed: u64,
    /// Keep copies of the averaging start point and of every collected iterate.
    pub keep_collections: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    Iterate,
    Swa,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub weights: Weights,
    pub split: Split,
    #[serde(flatten)]
    pub eval: Evaluation,
}

/// Optimizer-loop wall clock per phase. Evaluation and I/O are excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub stage1_secs: f64,
    pub stage2_secs: f64,
    pub loop_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Not deterministic; serialized separately from the rest of the log.
    #[serde(skip)]
    pub timing: PhaseTiming,
}

impl MetricsLog {
    /// Last evaluation of `weights` on `split`.
    pub fn final_eval(&self, weights: Weights, split: Split) -> Option<&Evaluation> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.weights == weights && e.split == split)
            .map(|e| &e.eval)
    }
}

/// An iterate absorbed into the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct Collected {
    /// Stage-2 step index; 0 is the averaging start point.
    pub stage2_step: u64,
    pub global_step: u64,
    pub weights: ParamVector,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ParamVector,
    pub final_weights: ParamVector,
    pub swa: Option<ParamVector>,
    pub components: u64,
    pub collections: Vec<Collected>,
    pub log: MetricsLog,
}

/// Cycles through seeded epochs of minibatches.
struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let current = data.batches(batch_size, seed, 0)?.into_iter();
        Ok(BatchStream {
            data,
            batch_size,
            seed,
            epoch: 0,
            current,
        })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.current.next() {
                return Ok(b);
            }
            self.epoch += 1;
            self.current = self.data.batches(self.batch_size, self.seed, self.epoch)?.into_iter();
        }
    }
}

/// Plain training: `schedule` drives all `total_steps` steps.
pub fn train(
    model: &ModelSpec,
    data: &Dataset,
    optimizer: OptimizerConfig,
    schedule: &Schedule,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    run(model, data, optimizer, schedule, None, settings)
}

/// Two-stage training with weight averaging.
///
/// Stage 1 runs `ceil(start_fraction * total_steps)` steps with `pre_schedule`. Stage 2
/// starts averaging from the weights reached there, follows the policy's schedule with
/// a local step index starting at 1, and absorbs the iterate every `interval` steps.
pub fn swa_train(
    model: &ModelSpec,
    data: &Dataset,
    optimizer: OptimizerConfig,
    pre_schedule: &Schedule,
    policy: &SwaPolicy,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    run(model, data, optimizer, pre_schedule, Some(policy), settings)
}

fn run(
    model: &ModelSpec,
    data: &Dataset,
    optimizer: OptimizerConfig,
    pre_schedule: &Schedule,
    policy: Option<&SwaPolicy>,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    model.validate()?;
    let n = settings.total_steps;
    if n == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    let (stage1, stage2_schedule) = match policy {
        Some(p) => {
            let (s1, s2) = p.split(n)?;
            (s1, Some(p.stage2_schedule(s2)?))
        }
        None => (n, None),
    };
    if pre_schedule.total_steps < stage1 {
        return Err(Error::InvalidArgument(format!(
            "pre-averaging schedule covers {} steps but stage 1 needs {stage1}",
            pre_schedule.total_steps
        )));
    }

    let train_eval = data.train_batch()?;
    let test_eval = if data.test.is_empty() { None } else { Some(data.test_batch()?) };
    let initial = model.init(settings.seed);
    let mut w = initial.clone();
    let mut opt = OptimizerState::new(optimizer, &w)?;
    let mut batches = BatchStream::new(data, settings.batch_size, settings.seed)?;
    let mut log = MetricsLog {
        steps: Vec::with_capacity(n as usize),
        ..Default::default()
    };
    let mut collections = Vec::new();
    let mut swa: Option<SwaState> = None;

    let evaluate = |log: &mut MetricsLog, step: u64, w: &ParamVector, swa: Option<&SwaState>| -> Result<()> {
        let mut push = |weights, split, b: &Batch, w: &ParamVector| -> Result<()> {
            log.evals.push(EvalRecord {
                step,
                weights,
                split,
                eval: model.evaluate(w, b)?,
            });
            Ok(())
        };
        push(Weights::Iterate, Split::Train, &train_eval, w)?;
        if let Some(t) = &test_eval {
            push(Weights::Iterate, Split::Test, t, w)?;
        }
        if let Some(s) = swa {
            push(Weights::Swa, Split::Train, &train_eval, s.average())?;
            if let Some(t) = &test_eval {
                push(Weights::Swa, Split::Test, t, s.average())?;
            }
        }
        Ok(())
    };

    let mut stage_time = [Duration::ZERO; 2];
    let start_swa = |w: &ParamVector, step: u64, collections: &mut Vec<Collected>| -> Result<SwaState> {
        let p = policy.expect("averaging policy");
        if settings.keep_collections {
            collections.push(Collected {
                stage2_step: 0,
                global_step: step,
                weights: w.clone(),
            });
        }
        SwaState::init(w, p.interval)
    };
    if policy.is_some() && stage1 == 0 {
        swa = Some(start_swa(&w, 0, &mut collections)?);
    }

    let mut last_eval = None;
    for step in 1..=n {
        let t0 = Instant::now();
        let in_stage2 = step > stage1;
        let lr = match (&stage2_schedule, in_stage2) {
            (Some(s), true) => s.lr_at(step - stage1)?,
            _ => pre_schedule.lr_at(step)?,
        };
        let batch = batches.next_batch()?;
        let (loss, g) = model.loss_and_grad(&w, &batch)?;
        opt.step(&mut w, &g, lr)?;
        log.steps.push(StepRecord {
            step,
            lr,
            train_loss: loss,
        });
        if let Some(st) = swa.as_mut() {
            let local = step - stage1;
            if st.observe(&w, local)? && settings.keep_collections {
                collections.push(Collected {
                    stage2_step: local,
                    global_step: step,
                    weights: w.clone(),
                });
            }
        } else if policy.is_some() && step == stage1 {
            swa = Some(start_swa(&w, step, &mut collections)?);
        }
        stage_time[in_stage2 as usize] += t0.elapsed();

        if settings.eval_every > 0 && step % settings.eval_every == 0 {
            evaluate(&mut log, step, &w, swa.as_ref())?;
            last_eval = Some(step);
        }
    }
    if last_eval != Some(n) {
        evaluate(&mut log, n, &w, swa.as_ref())?;
    }

    log.timing = PhaseTiming {
        stage1_secs: stage_time[0].as_secs_f64(),
        stage2_secs: stage_time[1].as_secs_f64(),
        loop_secs: (stage_time[0] + stage_time[1]).as_secs_f64(),
    };
    let components = swa.as_ref().map_or(0, SwaState::components);
    Ok(TrainOutcome {
        initial,
        final_weights: w,
        swa: swa.map(SwaState::into_average),
        components,
        collections,
        log,
    })
}
