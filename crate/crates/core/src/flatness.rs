//! Curvature diagnostics: the largest Hessian eigenvalue and the Hessian trace.
//!
//! Both estimators only touch the Hessian through matrix-free products computed by
//! central differences of the analytic gradient. A [`GroupMask`] restricts the operator
//! to a subset of parameter groups: excluded coordinates are zeroed on the way in and on
//! the way out of every product, which is exactly the Hessian block of the included
//! groups.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Objective};
use crate::param::{dot, GroupMask, ParamVector};
use crate::rng::{self, Stream};

pub const DEFAULT_HVP_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_SAMPLES: usize = 100;

/// Hessian-vector product `H v ~ (g(w + e v) - g(w - e v)) / 2e` with
/// `e = eps0 / max(|v|, tiny)`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, w: &ParamVector, v: &ParamVector, eps0: f64) -> Result<ParamVector> {
    w.check_layout(v)?;
    if !(eps0 > 0.0 && eps0.is_finite()) {
        return Err(Error::InvalidArgument(format!("hvp epsilon must be positive, got {eps0}")));
    }
    let norm = v.norm2();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("hvp direction is the zero vector".into()));
    }
    let eps = eps0 / norm.max(f64::MIN_POSITIVE);
    let mut plus = w.clone();
    plus.axpy_in_place(eps, v)?;
    let mut minus = w.clone();
    minus.axpy_in_place(-eps, v)?;
    let gp = obj.grad(&plus)?;
    let gm = obj.grad(&minus)?;
    let inv = 1.0 / (2.0 * eps);
    let out: Vec<f64> = gp.values().iter().zip(gm.values()).map(|(a, b)| (a - b) * inv).collect();
    let out = w.with_values(out)?;
    out.ensure_finite("hessian-vector product")?;
    Ok(out)
}

/// The Hessian block selected by `mask`, applied to `v`.
pub fn masked_hvp<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    mask: &GroupMask,
    v: &ParamVector,
    eps0: f64,
) -> Result<ParamVector> {
    let mut v = v.clone();
    v.zero_excluded(mask)?;
    let mut hv = hvp(obj, w, &v, eps0)?;
    hv.zero_excluded(mask)?;
    Ok(hv)
}

/// Dense Hessian block over the coordinates included by `mask`, one product per column,
/// returned row-major together with the included coordinate indices. Meant for small
/// problems and cross-checks.
pub fn dense_hessian<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    mask: &GroupMask,
    eps0: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let idx = included_indices(w, mask)?;
    let n = idx.len();
    let mut h = vec![0.0; n * n];
    for (c, &j) in idx.iter().enumerate() {
        let mut e = w.zeros_like();
        e.values_mut()[j] = 1.0;
        let col = hvp(obj, w, &e, eps0)?;
        for (r, &i) in idx.iter().enumerate() {
            h[r * n + c] = col.values()[i];
        }
    }
    Ok((h, idx))
}

fn included_indices(w: &ParamVector, mask: &GroupMask) -> Result<Vec<usize>> {
    mask.validate(w)?;
    let idx: Vec<usize> = w
        .groups()
        .iter()
        .filter(|g| mask.includes(&g.name))
        .flat_map(|g| g.offset..g.offset + g.len)
        .collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("mask selects no parameters".into()));
    }
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    /// Rayleigh quotient of the dominant (largest-magnitude) eigenpair; the sign is kept.
    pub lambda: f64,
    pub iterations: usize,
    /// `|H v - lambda v|` for the final unit vector.
    pub residual: f64,
    pub converged: bool,
}

/// Power iteration on the masked Hessian.
///
/// Converges when successive Rayleigh quotients differ by less than `tol * |lambda|` or
/// the residual drops below the same bound. Hitting `max_iter` returns the last estimate
/// with `converged = false`.
pub fn lambda_max<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    mask: &GroupMask,
    tol: f64,
    max_iter: usize,
    eps0: f64,
    seed: u64,
) -> Result<PowerIteration> {
    let idx = included_indices(w, mask)?;
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let mut rng = rng::stream(seed, Stream::Power);
    let mut v = w.zeros_like();
    for &i in &idx {
        v.values_mut()[i] = StandardNormal.sample(&mut rng);
    }
    let n = v.norm2();
    v.scale_in_place(1.0 / n)?;

    let mut prev: Option<f64> = None;
    let mut result = PowerIteration {
        lambda: 0.0,
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for it in 1..=max_iter {
        let hv = masked_hvp(obj, w, mask, &v, eps0)?;
        let lambda = dot(&v, &hv)?;
        let mut r = hv.clone();
        r.axpy_in_place(-lambda, &v)?;
        let residual = r.norm2();
        result = PowerIteration {
            lambda,
            iterations: it,
            residual,
            converged: false,
        };
        let bound = tol * lambda.abs();
        let hv_norm = hv.norm2();
        if hv_norm == 0.0 || residual <= bound || prev.is_some_and(|p| (lambda - p).abs() < bound) {
            result.converged = true;
            break;
        }
        prev = Some(lambda);
        v = hv;
        v.scale_in_place(1.0 / hv_norm)?;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Sample standard deviation of the probes over `sqrt(samples)`; 0 for one sample.
    pub stderr: f64,
    pub samples: usize,
}

/// Hutchinson estimate of the masked Hessian trace with Rademacher probes.
///
/// Probe `k` draws from its own substream, so probes are evaluated in parallel and the
/// result does not depend on scheduling; the mean is accumulated in probe order.
pub fn trace_hutchinson<O: Objective + Sync + ?Sized>(
    obj: &O,
    w: &ParamVector,
    mask: &GroupMask,
    samples: usize,
    eps0: f64,
    seed: u64,
) -> Result<TraceEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("Hutchinson needs at least one sample".into()));
    }
    let idx = included_indices(w, mask)?;
    let quads = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::substream(seed, Stream::Hutchinson, k as u64);
            let mut v = w.zeros_like();
            for &i in &idx {
                v.values_mut()[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            let hv = masked_hvp(obj, w, mask, &v, eps0)?;
            dot(&v, &hv)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = samples as f64;
    let mean = quads.iter().fold(0.0, |a, q| a + q) / m;
    let stderr = if samples > 1 {
        let var = quads.iter().fold(0.0, |a, q| a + (q - mean) * (q - mean)) / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        trace: mean,
        stderr,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatnessConfig {
    pub hvp_epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        FlatnessConfig {
            hvp_epsilon: DEFAULT_HVP_EPSILON,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub lambda_max: f64,
    pub lambda_max_iterations: usize,
    pub lambda_max_residual: f64,
    pub lambda_max_converged: bool,
    pub trace_estimate: f64,
    pub trace_samples: usize,
    pub trace_stderr: f64,
    pub mask: GroupMask,
    pub hvp_epsilon: f64,
    /// Mean training loss at the evaluated point.
    pub train_loss: f64,
    pub train_rows: usize,
}

/// Both estimators on the full training split of `data`.
pub fn flatness_report(
    model: &ModelSpec,
    w: &ParamVector,
    data: &Dataset,
    mask: &GroupMask,
    config: &FlatnessConfig,
    seed: u64,
) -> Result<FlatnessReport> {
    let batch = data.train_batch()?;
    let obj = model.objective(&batch);
    let train_loss = obj.loss(w)?;
    let power = lambda_max(&obj, w, mask, config.tol, config.max_iter, config.hvp_epsilon, seed)?;
    let trace = trace_hutchinson(&obj, w, mask, config.samples, config.hvp_epsilon, seed)?;
    Ok(FlatnessReport {
        lambda_max: power.lambda,
        lambda_max_iterations: power.iterations,
        lambda_max_residual: power.residual,
        lambda_max_converged: power.converged,
        trace_estimate: trace.trace,
        trace_samples: trace.samples,
        trace_stderr: trace.stderr,
        mask: mask.clone(),
        hvp_epsilon: config.hvp_epsilon,
        train_loss,
        train_rows: batch.rows(),
    })
}
