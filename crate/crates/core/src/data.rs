//! Synthetic datasets, CSV ingestion and seeded minibatching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Batch, LossKind, ModelSpec, Targets};
use crate::rng::{self, Rng, Stream};

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `rows x cols`.
    pub inputs: Vec<f64>,
    pub cols: usize,
    pub targets: Targets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    fn from_parts(inputs: Vec<f64>, cols: usize, targets: Targets, seed: u64, test_fraction: f64, rng: &mut Rng) -> Result<Self> {
        let mut d = Dataset {
            inputs,
            cols,
            targets,
            train: Vec::new(),
            test: Vec::new(),
            seed,
        };
        d.split_with(test_fraction, rng)?;
        Ok(d)
    }

    pub fn rows(&self) -> usize {
        self.targets.rows()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes(c) => c.iter().max().map(|m| m + 1),
            Targets::Values { .. } => None,
        }
    }

    /// Reassign the train/test split with a seeded shuffle; `floor(rows * test_fraction)`
    /// rows go to test.
    pub fn resplit(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        let mut rng = rng::substream(seed, Stream::Data, 1);
        self.split_with(test_fraction, &mut rng)
    }

    fn split_with(&mut self, test_fraction: f64, rng: &mut Rng) -> Result<()> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let n = self.rows();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_test = (n as f64 * test_fraction).floor() as usize;
        let mut test = idx.split_off(n - n_test);
        idx.sort_unstable();
        test.sort_unstable();
        self.train = idx;
        self.test = test;
        Ok(())
    }

    /// Rows `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let inputs = idx
            .iter()
            .flat_map(|&i| self.inputs[i * self.cols..(i + 1) * self.cols].iter().copied())
            .collect();
        Batch::new(inputs, self.cols, self.targets.gather(idx))
    }

    pub fn train_batch(&self) -> Result<Batch> {
        self.gather(&self.train)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        self.gather(&self.test)
    }

    /// Shuffle the training split with the `(seed, epoch)` shuffle stream and cut it into
    /// batches of `batch_size`; the last partial batch is kept.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.train.is_empty() {
            return Err(Error::EmptyDataset("training split is empty".into()));
        }
        let mut order = self.train.clone();
        order.shuffle(&mut rng::substream(seed, Stream::Shuffle, epoch));
        order.chunks(batch_size).map(|c| self.gather(c)).collect()
    }

    /// Check the dataset fits `spec` and encode targets for its loss (class labels become
    /// one-hot rows for squared error).
    pub fn for_model(mut self, spec: &ModelSpec) -> Result<Self> {
        if self.cols != spec.input_dim() {
            return Err(Error::Dimension(format!(
                "dataset has {} features, model input is {}",
                self.cols,
                spec.input_dim()
            )));
        }
        if let (Targets::Classes(_), LossKind::MeanSquaredError) = (&self.targets, spec.loss) {
            self.targets = self.targets.to_one_hot(spec.output_dim())?;
        }
        if let (Targets::Values { .. }, LossKind::SoftmaxCrossEntropy) = (&self.targets, spec.loss) {
            return Err(Error::Dimension("real-valued labels need the squared-error loss".into()));
        }
        Ok(self)
    }
}

/// Two interleaved half circles: class 0 on the upper unit arc centred at the origin,
/// class 1 on the lower unit arc centred at `(1, -0.5)`. Gaussian noise is added per
/// coordinate.
pub fn two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two_moons needs n >= 2, got {n}")));
    }
    let noise = normal(noise_sd)?;
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let arc = |k: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (count - 1) as f64
        }
    };
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n_outer {
        let t = arc(k, n_outer);
        inputs.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..n_inner {
        let t = arc(k, n_inner);
        inputs.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    let mut rng = rng::stream(seed, Stream::Data);
    if let Some(noise) = noise {
        for v in &mut inputs {
            *v += noise.sample(&mut rng);
        }
    }
    Dataset::from_parts(inputs, 2, Targets::Classes(labels), seed, DEFAULT_TEST_FRACTION, &mut rng)
}

/// Isotropic Gaussian clusters; row `i` belongs to centre `i mod centres.len()`.
pub fn gaussian_blobs(n: usize, centers: &[Vec<f64>], sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("gaussian_blobs needs n >= 2, got {n}")));
    }
    let dim = centers
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("no blob centres".into()))?;
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::InvalidArgument("blob centres must share a positive dimension".into()));
    }
    let noise = normal(sd)?;
    let mut rng = rng::stream(seed, Stream::Data);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % centers.len();
        for c in &centers[k] {
            let e = noise.map_or(0.0, |d| d.sample(&mut rng));
            inputs.push(c + e);
        }
        labels.push(k);
    }
    Dataset::from_parts(inputs, dim, Targets::Classes(labels), seed, DEFAULT_TEST_FRACTION, &mut rng)
}

fn normal(sd: f64) -> Result<Option<Normal<f64>>> {
    if !(sd >= 0.0 && sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sd must be finite and >= 0, got {sd}")));
    }
    Ok(if sd == 0.0 {
        None
    } else {
        Some(Normal::new(0.0, sd).expect("positive sd"))
    })
}

/// Read a comma-separated file with a mandatory header; the last column is the label.
///
/// Labels that are all nonnegative integers become class indices, anything else is
/// treated as a regression target. Error positions are 1-based, with row 1 being the
/// first data row after the header. The split uses [`DEFAULT_TEST_FRACTION`] and seed 0;
/// call [`Dataset::resplit`] to change it.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header_len = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if header_len == 0 {
        return Err(Error::EmptyDataset(format!("{} has no header", path.display())));
    }
    if header_len < 2 {
        return Err(Error::Parse {
            row: 0,
            column: 1,
            message: "need at least one feature column and a label column".into(),
        });
    }
    let cols = header_len - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header_len {
            return Err(Error::Parse {
                row,
                column: record.len().min(header_len) + 1,
                message: format!("expected {header_len} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("`{cell}` is not finite"),
                });
            }
            if c < cols {
                inputs.push(v);
            } else {
                labels.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no data rows", path.display())));
    }
    let targets = if labels.iter().all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < u32::MAX as f64) {
        Targets::Classes(labels.iter().map(|v| *v as usize).collect())
    } else {
        Targets::Values { data: labels, dim: 1 }
    };
    let mut rng = rng::substream(0, Stream::Data, 1);
    Dataset::from_parts(inputs, cols, targets, 0, DEFAULT_TEST_FRACTION, &mut rng)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            row: 0,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}
