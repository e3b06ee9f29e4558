//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters are laid out layer by layer as `layer{k}.weight` (row-major
//! `n_out x n_in`) followed by `layer{k}.bias`. Hidden layers apply the configured
//! activation; the output layer is linear and feeds either softmax cross-entropy or
//! squared error. Losses are means over batch rows.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Layout, ParamVector};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// ReLU uses 0 at the kink.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::InvalidArgument(format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Regression or classification targets for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `rows x dim`.
    Values { data: Vec<f64>, dim: usize },
}

impl Targets {
    pub fn rows(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values { data, dim } => {
                if *dim == 0 {
                    0
                } else {
                    data.len() / dim
                }
            }
        }
    }

    /// Select rows by index.
    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values { data, dim } => Targets::Values {
                data: idx
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        }
    }

    /// Class labels as one-hot rows of width `classes`.
    pub fn to_one_hot(&self, classes: usize) -> Result<Targets> {
        match self {
            Targets::Classes(c) => {
                let mut data = vec![0.0; c.len() * classes];
                for (r, &k) in c.iter().enumerate() {
                    if k >= classes {
                        return Err(Error::Dimension(format!("class {k} >= {classes}")));
                    }
                    data[r * classes + k] = 1.0;
                }
                Ok(Targets::Values { data, dim: classes })
            }
            Targets::Values { .. } => Ok(self.clone()),
        }
    }
}

/// One minibatch: row-major inputs plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub cols: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, cols: usize, targets: Targets) -> Result<Self> {
        if cols == 0 || !inputs.len().is_multiple_of(cols) {
            return Err(Error::Dimension(format!(
                "{} input values do not form rows of width {cols}",
                inputs.len()
            )));
        }
        let rows = inputs.len() / cols;
        if rows == 0 {
            return Err(Error::EmptyDataset("batch has no rows".into()));
        }
        if targets.rows() != rows {
            return Err(Error::Dimension(format!(
                "{rows} input rows but {} target rows",
                targets.rows()
            )));
        }
        Ok(Batch {
            inputs,
            cols,
            targets,
        })
    }

    pub fn rows(&self) -> usize {
        self.inputs.len() / self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.cols..(r + 1) * self.cols]
    }
}

/// Anything with a scalar loss and its gradient over a [`ParamVector`].
pub trait Objective {
    fn loss_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)>;

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        Ok(self.loss_and_grad(w)?.0)
    }

    fn grad(&self, w: &ParamVector) -> Result<ParamVector> {
        Ok(self.loss_and_grad(w)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    /// Coefficient of an optional `0.5 * l2 * |w|^2` penalty in the loss. Weight decay
    /// proper lives in the optimizer.
    pub l2_coeff: f64,
}

/// Aggregate metrics of a model on a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Classification accuracy in `[0, 1]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Root mean squared error over all target entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind, l2_coeff: f64) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            activation,
            loss,
            l2_coeff,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least an input and an output layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::InvalidArgument("l2_coeff must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn layout(&self) -> Arc<Layout> {
        let parts = self.layer_sizes.windows(2).enumerate().flat_map(|(k, p)| {
            [
                (format!("layer{k}.weight"), p[0] * p[1]),
                (format!("layer{k}.bias"), p[1]),
            ]
        });
        Arc::new(Layout::from_lengths(parts).expect("generated layout is contiguous"))
    }

    /// Weights uniform in `[-s, s]`, `s = sqrt(6 / (n_in + n_out))`; biases zero.
    /// Draws from the `init` stream of `seed`.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, Stream::Init);
        let mut values = Vec::with_capacity(self.param_count());
        for p in self.layer_sizes.windows(2) {
            let s = (6.0 / (p[0] + p[1]) as f64).sqrt();
            values.extend((0..p[0] * p[1]).map(|_| rng.random_range(-s..=s)));
            values.extend(std::iter::repeat_n(0.0, p[1]));
        }
        ParamVector::new(values, self.layout()).expect("init matches layout")
    }

    fn check(&self, w: &ParamVector, b: &Batch) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "weights have {} entries, model needs {}",
                w.len(),
                self.param_count()
            )));
        }
        if b.cols != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch rows have width {}, model input is {}",
                b.cols,
                self.input_dim()
            )));
        }
        match (&b.targets, self.loss) {
            (Targets::Classes(c), LossKind::SoftmaxCrossEntropy) => {
                if let Some(bad) = c.iter().find(|&&k| k >= self.output_dim()) {
                    return Err(Error::Dimension(format!(
                        "class index {bad} with {} outputs",
                        self.output_dim()
                    )));
                }
            }
            (Targets::Values { dim, .. }, LossKind::MeanSquaredError) => {
                if *dim != self.output_dim() {
                    return Err(Error::Dimension(format!(
                        "targets have width {dim}, model output is {}",
                        self.output_dim()
                    )));
                }
            }
            _ => {
                return Err(Error::Dimension(
                    "target kind does not match the loss (classes need cross-entropy, values need squared error)".into(),
                ))
            }
        }
        Ok(())
    }

    /// Per-layer (weight offset, bias offset, n_in, n_out).
    fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let (n_in, n_out) = (p[0], p[1]);
                let w_off = off;
                let b_off = off + n_in * n_out;
                off = b_off + n_out;
                (w_off, b_off, n_in, n_out)
            })
            .collect()
    }

    /// Forward pass for one row; fills `pre[k]` and `post[k]` for each layer (`post[0]`
    /// is the input). Returns the output-layer pre-activations.
    fn forward_row<'a>(
        &self,
        w: &[f64],
        layers: &[(usize, usize, usize, usize)],
        x: &[f64],
        pre: &mut [Vec<f64>],
        post: &'a mut [Vec<f64>],
        row: usize,
    ) -> Result<()> {
        post[0].clear();
        post[0].extend_from_slice(x);
        let last = layers.len() - 1;
        for (k, &(w_off, b_off, n_in, n_out)) in layers.iter().enumerate() {
            let (before, after) = post.split_at_mut(k + 1);
            let input = &before[k];
            let z = &mut pre[k];
            let a = &mut after[0];
            z.clear();
            a.clear();
            for o in 0..n_out {
                let wrow = &w[w_off + o * n_in..w_off + (o + 1) * n_in];
                let mut s = w[b_off + o];
                for (wi, xi) in wrow.iter().zip(input.iter()) {
                    s += wi * xi;
                }
                if !s.is_finite() {
                    return Err(Error::non_finite(format!("layer {k} pre-activation, row {row}")));
                }
                z.push(s);
                a.push(if k == last { s } else { self.activation.apply(s) });
            }
        }
        Ok(())
    }

    /// Loss of one row and `dL/dz` for the output layer.
    fn output_loss(&self, z: &[f64], targets: &Targets, row: usize, delta: &mut Vec<f64>) -> f64 {
        delta.clear();
        match targets {
            Targets::Classes(c) => {
                let y = c[row];
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                delta.extend(z.iter().map(|v| (v - lse).exp()));
                delta[y] -= 1.0;
                lse - z[y]
            }
            Targets::Values { data, dim } => {
                let t = &data[row * dim..(row + 1) * dim];
                let mut l = 0.0;
                for (zi, ti) in z.iter().zip(t) {
                    let r = zi - ti;
                    l += r * r;
                    delta.push(2.0 * r);
                }
                l
            }
        }
    }

    fn run(&self, w: &ParamVector, b: &Batch, want_grad: bool) -> Result<(f64, Option<ParamVector>)> {
        self.check(w, b)?;
        let wv = w.values();
        let layers = self.layer_offsets();
        let n_layers = layers.len();
        let mut pre = vec![Vec::new(); n_layers];
        let mut post = vec![Vec::new(); n_layers + 1];
        let mut grad = if want_grad { vec![0.0; wv.len()] } else { Vec::new() };
        let mut delta = Vec::new();
        let mut next = Vec::new();
        let mut total = 0.0;
        let rows = b.rows();
        for r in 0..rows {
            self.forward_row(wv, &layers, b.row(r), &mut pre, &mut post, r)?;
            let l = self.output_loss(&pre[n_layers - 1], &b.targets, r, &mut delta);
            if !l.is_finite() {
                return Err(Error::non_finite(format!("loss, row {r}")));
            }
            total += l;
            if !want_grad {
                continue;
            }
            for k in (0..n_layers).rev() {
                let (w_off, b_off, n_in, n_out) = layers[k];
                let input = &post[k];
                for o in 0..n_out {
                    let d = delta[o];
                    grad[b_off + o] += d;
                    let g = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                if k == 0 {
                    break;
                }
                next.clear();
                next.resize(n_in, 0.0);
                for o in 0..n_out {
                    let d = delta[o];
                    let wrow = &wv[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (ni, wi) in next.iter_mut().zip(wrow) {
                        *ni += d * wi;
                    }
                }
                for (i, ni) in next.iter_mut().enumerate() {
                    *ni *= self.activation.derivative(pre[k - 1][i], post[k][i]);
                }
                std::mem::swap(&mut delta, &mut next);
            }
        }
        let inv = 1.0 / rows as f64;
        let mut loss = total * inv;
        if self.l2_coeff > 0.0 {
            loss += 0.5 * self.l2_coeff * wv.iter().fold(0.0, |a, v| a + v * v);
        }
        if !loss.is_finite() {
            return Err(Error::non_finite("mean loss"));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        for (g, wi) in grad.iter_mut().zip(wv) {
            *g = *g * inv + self.l2_coeff * wi;
        }
        let grad = w.with_values(grad)?;
        grad.ensure_finite("gradient")?;
        Ok((loss, Some(grad)))
    }

    pub fn loss(&self, w: &ParamVector, b: &Batch) -> Result<f64> {
        Ok(self.run(w, b, false)?.0)
    }

    pub fn grad(&self, w: &ParamVector, b: &Batch) -> Result<ParamVector> {
        Ok(self.run(w, b, true)?.1.expect("gradient requested"))
    }

    pub fn loss_and_grad(&self, w: &ParamVector, b: &Batch) -> Result<(f64, ParamVector)> {
        let (l, g) = self.run(w, b, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    /// Output-layer values for every row (logits for classifiers).
    pub fn predict(&self, w: &ParamVector, b: &Batch) -> Result<Vec<Vec<f64>>> {
        self.check(w, b)?;
        let layers = self.layer_offsets();
        let mut pre = vec![Vec::new(); layers.len()];
        let mut post = vec![Vec::new(); layers.len() + 1];
        (0..b.rows())
            .map(|r| {
                self.forward_row(w.values(), &layers, b.row(r), &mut pre, &mut post, r)?;
                Ok(post[layers.len()].clone())
            })
            .collect()
    }

    pub fn evaluate(&self, w: &ParamVector, b: &Batch) -> Result<Evaluation> {
        let loss = self.loss(w, b)?;
        let out = self.predict(w, b)?;
        Ok(match &b.targets {
            Targets::Classes(c) => {
                let hits = out.iter().zip(c).filter(|(o, &y)| argmax(o) == y).count();
                Evaluation {
                    loss,
                    accuracy: Some(hits as f64 / c.len() as f64),
                    rmse: None,
                }
            }
            Targets::Values { data, dim } => {
                let mut sq = 0.0;
                for (r, o) in out.iter().enumerate() {
                    for (oi, ti) in o.iter().zip(&data[r * dim..(r + 1) * dim]) {
                        sq += (oi - ti) * (oi - ti);
                    }
                }
                Evaluation {
                    loss,
                    accuracy: None,
                    rmse: Some((sq / data.len() as f64).sqrt()),
                }
            }
        })
    }

    /// Borrow this model and a batch as an [`Objective`].
    pub fn objective<'a>(&'a self, batch: &'a Batch) -> ModelObjective<'a> {
        ModelObjective { spec: self, batch }
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl Objective for ModelObjective<'_> {
    fn loss_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        self.spec.loss_and_grad(w, self.batch)
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        self.spec.loss(w, self.batch)
    }
}

/// `0.5 * w^T A w` for a dense symmetric `A`; handy as a surrogate with a known Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    /// Row-major `n x n`.
    pub matrix: Vec<f64>,
    pub dim: usize,
    pub layout: Arc<Layout>,
}

impl Quadratic {
    pub fn new(matrix: Vec<f64>, dim: usize) -> Result<Self> {
        let layout = Arc::new(Layout::from_lengths([("w", dim)])?);
        Self::with_layout(matrix, layout)
    }

    /// Use an explicit group layout (e.g. to exercise masks on a known spectrum).
    pub fn with_layout(matrix: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        let dim = layout.len();
        if matrix.len() != dim * dim {
            return Err(Error::Dimension(format!("{} entries for a {dim}x{dim} matrix", matrix.len())));
        }
        for i in 0..dim {
            for j in 0..i {
                if matrix[i * dim + j] != matrix[j * dim + i] {
                    return Err(Error::InvalidArgument("quadratic matrix must be symmetric".into()));
                }
            }
        }
        Ok(Quadratic { matrix, dim, layout })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            m[i * n + i] = *d;
        }
        Quadratic::new(m, n).expect("diagonal is symmetric")
    }

    pub fn point(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(values, self.layout.clone())
    }
}

impl Objective for Quadratic {
    fn loss_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        if w.len() != self.dim {
            return Err(Error::Dimension(format!("{} weights for dimension {}", w.len(), self.dim)));
        }
        let x = w.values();
        let g: Vec<f64> = (0..self.dim)
            .map(|i| {
                self.matrix[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .fold(0.0, |a, (m, xi)| a + m * xi)
            })
            .collect();
        let loss = 0.5 * x.iter().zip(&g).fold(0.0, |a, (xi, gi)| a + xi * gi);
        Ok((loss, w.with_values(g)?))
    }
}
