//! Oracles shared by the integration tests. Nothing here calls into the code under test
//! except to build inputs.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swa_core::model::{Activation, Batch, LossKind, ModelSpec, Targets};
use swa_core::param::Layout;
use swa_core::ParamVector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Loss of an MLP computed with nothing but loops over the flat weight vector, where
/// layer k stores an `out x in` row-major weight block followed by its bias.
pub fn reference_loss(sizes: &[usize], act: Activation, loss: LossKind, l2: f64, w: &[f64], batch: &Batch) -> f64 {
    let mut weight_at = Vec::new();
    let mut off = 0;
    for p in sizes.windows(2) {
        weight_at.push(off);
        off += p[0] * p[1];
        off += p[1];
    }
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let mut a: Vec<f64> = batch.row(r).to_vec();
        for (k, p) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (p[0], p[1]);
            let wo = weight_at[k];
            let bo = wo + n_in * n_out;
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = w[bo + o];
                for i in 0..n_in {
                    s += w[wo + o * n_in + i] * a[i];
                }
                z[o] = s;
            }
            let last = k + 2 == sizes.len();
            a = if last {
                z
            } else {
                z.iter()
                    .map(|&v| match act {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    })
                    .collect()
            };
        }
        total += match (&batch.targets, loss) {
            (Targets::Classes(c), LossKind::SoftmaxCrossEntropy) => {
                let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - a[c[r]]
            }
            (Targets::Values { data, dim }, LossKind::MeanSquaredError) => {
                (0..*dim).map(|j| (a[j] - data[r * dim + j]).powi(2)).sum()
            }
            _ => panic!("unsupported target/loss pairing"),
        };
    }
    let penalty = 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    total / batch.rows() as f64 + penalty
}

/// Central differences of `reference_loss`.
pub fn reference_grad(sizes: &[usize], act: Activation, loss: LossKind, l2: f64, w: &[f64], batch: &Batch, h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = reference_loss(sizes, act, loss, l2, &x, batch);
            x[i] = orig - h;
            let down = reference_loss(sizes, act, loss, l2, &x, batch);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_vector(r: &mut impl Rng) -> ParamVector {
    let groups = r.random_range(1..=6);
    let parts: Vec<(String, usize)> = (0..groups).map(|g| (format!("g{g}.{}", r.random_range(0..1000)), r.random_range(0..=40))).collect();
    let layout = Arc::new(Layout::from_lengths(parts).unwrap());
    let values = (0..layout.len())
        .map(|_| match r.random_range(0..4) {
            0 => f64::from_bits(r.random::<u64>() & !(0x7ffu64 << 52) | (r.random_range(1..0x7fe) << 52)),
            1 => -0.0,
            2 => f64::MIN_POSITIVE / 4.0,
            _ => r.random_range(-1e3..1e3),
        })
        .collect();
    ParamVector::new(values, layout).unwrap()
}

/// Every file below `dir` with its contents, minus the wall-clock fields.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.file_name().unwrap().to_str().unwrap();
                if name == "timing.json" {
                    continue;
                }
                let mut bytes = fs::read(&p).unwrap();
                if name.ends_with(".meta.json") {
                    let mut meta: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                    meta.as_object_mut().unwrap().remove("created_at");
                    bytes = serde_json::to_vec(&meta).unwrap();
                }
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

pub struct Instance {
    pub spec: ModelSpec,
    pub batch: Batch,
    pub weights: Vec<f64>,
}

/// A random small network, loss and batch.
pub fn random_instance(r: &mut impl Rng) -> Instance {
    let depth = r.random_range(1..=3);
    let mut sizes = vec![r.random_range(1..=4)];
    for _ in 1..depth {
        sizes.push(r.random_range(2..=6));
    }
    let loss = if r.random_bool(0.5) { LossKind::SoftmaxCrossEntropy } else { LossKind::MeanSquaredError };
    let out = match loss {
        LossKind::SoftmaxCrossEntropy => r.random_range(2..=4),
        LossKind::MeanSquaredError => r.random_range(1..=3),
    };
    sizes.push(out);
    let act = if r.random_bool(0.7) { Activation::Tanh } else { Activation::Relu };
    let l2 = if r.random_bool(0.3) { r.random_range(0.0..0.1) } else { 0.0 };
    let spec = ModelSpec::new(sizes.clone(), act, loss, l2).unwrap();
    let rows = r.random_range(1..=12);
    let inputs: Vec<f64> = (0..rows * sizes[0]).map(|_| r.random_range(-2.0..2.0)).collect();
    let targets = match loss {
        LossKind::SoftmaxCrossEntropy => Targets::Classes((0..rows).map(|_| r.random_range(0..out)).collect()),
        LossKind::MeanSquaredError => Targets::Values {
            data: (0..rows * out).map(|_| r.random_range(-1.0..1.0)).collect(),
            dim: out,
        },
    };
    let batch = Batch::new(inputs, sizes[0], targets).unwrap();
    let weights = (0..spec.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
    Instance { spec, batch, weights }
}

/// Random symmetric matrix `Q diag(eigs) Q^T` with `Q` from Gram-Schmidt.
pub fn symmetric_with_spectrum(eigs: &[f64], r: &mut impl Rng) -> Vec<f64> {
    let n = eigs.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|k| q[k][i] * eigs[k] * q[k][j]).sum();
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    m
}

/// Eigenvalues of a dense symmetric matrix via nalgebra.
pub fn dense_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let a = nalgebra::DMatrix::from_row_slice(n, n, m);
    let sym = (&a + a.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().copied().collect()
}

/// The eigenvalue of largest magnitude.
pub fn dominant(eigs: &[f64]) -> f64 {
    eigs.iter().copied().fold(0.0, |best, e| if e.abs() > best.abs() { e } else { best })
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// The two-moons flatness workload: a 2-16-2 tanh net, 5 seeds, 2000 steps, averaging
/// from the halfway point at a high constant rate.
pub const TWO_MOONS: &str = r#"
layer_sizes = [2, 16, 2]
activation = "tanh"
dataset = "two-moons"
n_samples = 1000
noise_sd = 0.25
batch_size = 16
optimizer = "adamw"
weight_decay = 0.01
schedule = "constant"
lr_max = 0.03
swa_interval = 10
swa_start_fraction = 0.5
swa_schedule = "high-constant"
swa_lr_max = 0.3
total_steps = 2000
eval_every = 200
seeds = [1, 2, 3, 4, 5]
"#;

/// A cheap config for command-level tests.
pub const SMALL: &str = r#"
layer_sizes = [2, 6, 2]
dataset = "two-moons"
n_samples = 120
noise_sd = 0.2
batch_size = 16
optimizer = "sgd-momentum"
momentum = 0.9
schedule = "constant"
lr_max = 0.05
swa_interval = 4
swa_start_fraction = 0.5
swa_schedule = "cyclical"
swa_lr_max = 0.05
swa_lr_min = 0.01
swa_cycle_len = 4
total_steps = 80
eval_every = 20
seeds = [7, 8, 9]
hutchinson_samples = 20

[[variants]]
name = "constant"
swa_schedule = "high-constant"
swa_lr_max = 0.05

[[variants]]
name = "cyclical"
swa_schedule = "cyclical"
swa_lr_max = 0.05
swa_lr_min = 0.01
swa_cycle_len = 4
"#;
