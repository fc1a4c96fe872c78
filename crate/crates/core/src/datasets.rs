//! Desk-scale datasets: Gaussian blobs, a sinusoidal tabular regression
//! target, CSV tables and IDX digit files, plus splitting and
//! train-only standardisation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{RngStream, Target, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression { outputs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// n x k
    Values(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// n x d
    pub inputs: Tensor,
    pub targets: Targets,
    /// Statistics applied to `inputs`; zeros and ones for raw data.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl Dataset {
    pub fn new(task: Task, inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset inputs must be a non-empty n x d matrix, got {:?}",
                inputs.shape()
            )));
        }
        let n = inputs.rows();
        let tn = match &targets {
            Targets::Labels(l) => {
                if let Task::Classification { classes } = task {
                    if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                        return Err(Error::LabelOutOfRange { label: bad, classes });
                    }
                }
                l.len()
            }
            Targets::Values(v) => v.rows(),
        };
        if tn != n {
            return Err(Error::InvalidArgument(format!("{n} inputs but {tn} targets")));
        }
        let d = inputs.cols();
        Ok(Self {
            task,
            inputs,
            targets,
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification { classes } => classes,
            Task::Regression { outputs } => outputs,
        }
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match &self.targets {
            Targets::Labels(l) => Target::Class(l[i]),
            Targets::Values(v) => Target::Values(v.row(i)),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                let k = v.cols();
                let mut out = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    out.extend_from_slice(v.row(i));
                }
                Targets::Values(Tensor::new(vec![indices.len(), k], out).expect("consistent"))
            }
        };
        Dataset {
            task: self.task,
            inputs: Tensor::new(vec![indices.len(), d], data).expect("consistent"),
            targets,
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
        }
    }
}

/// Per-column standardisation statistics (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on raw inputs. Constant columns keep std = 1.
    pub fn fit(inputs: &Tensor) -> Self {
        let (n, d) = (inputs.rows(), inputs.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(inputs.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(inputs.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Standardise a raw dataset, recording the statistics on it.
    pub fn apply(&self, raw: &Dataset) -> Dataset {
        let mut out = raw.clone();
        let d = raw.dim();
        for i in 0..raw.len() {
            let row = out.inputs.row_mut(i);
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out.feature_mean = self.mean.clone();
        out.feature_std = self.std.clone();
        out
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Fit on `train` only and apply to all three splits.
pub fn standardize_splits(train: &Dataset, val: &Dataset, test: &Dataset) -> (Dataset, Dataset, Dataset, Standardizer) {
    let st = Standardizer::fit(&train.inputs);
    (st.apply(train), st.apply(val), st.apply(test), st)
}

/// Gaussian mixture with `classes` centres evenly spaced on a circle of
/// radius 2 in the first two coordinates; labels are balanced round-robin
/// before shuffling.
pub fn gen_blobs(seed: u64, n: usize, classes: usize, spread: f64, dim: usize) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "blobs need n >= classes >= 2 (n={n}, classes={classes})"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument("blobs need at least 2 dimensions".into()));
    }
    let mut rng = RngStream::new(seed, 0xB10B);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut data = vec![0.0; n * dim];
    for (i, &y) in labels.iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
        let row = &mut data[i * dim..(i + 1) * dim];
        rng.fill_normal(row);
        for v in row.iter_mut() {
            *v *= spread;
        }
        row[0] += 2.0 * angle.cos();
        row[1] += 2.0 * angle.sin();
    }
    Dataset::new(
        Task::Classification { classes },
        Tensor::new(vec![n, dim], data)?,
        Targets::Labels(labels),
    )
}

/// Random-feature sinusoid `y = Σ_k a sin(w_k · x)` over `x ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGenerator {
    pub frequencies: Vec<Vec<f64>>,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl TabularGenerator {
    pub const TERMS: usize = 6;

    pub fn new(seed: u64, d: usize, noise_std: f64) -> Self {
        let mut rng = RngStream::new(seed, 0x7AB0);
        let scale = 1.5 / (d as f64).sqrt();
        let frequencies = (0..Self::TERMS)
            .map(|_| (0..d).map(|_| scale * rng.normal()).collect())
            .collect();
        Self {
            frequencies,
            amplitude: (2.0 / Self::TERMS as f64).sqrt(),
            noise_std,
        }
    }

    pub fn signal(&self, x: &[f64]) -> f64 {
        self.frequencies
            .iter()
            .map(|w| self.amplitude * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().sin())
            .sum()
    }

    /// Exact variance of the target under `x ~ N(0, I)`:
    /// `E[sin(u·x) sin(v·x)] = (e^{-|u-v|²/2} - e^{-|u+v|²/2}) / 2`, and the
    /// mean is zero by symmetry.
    pub fn analytic_variance(&self) -> f64 {
        let mut var = 0.0;
        for u in &self.frequencies {
            for v in &self.frequencies {
                let minus: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                let plus: f64 = u.iter().zip(v).map(|(a, b)| (a + b) * (a + b)).sum();
                var += 0.5 * ((-minus / 2.0).exp() - (-plus / 2.0).exp());
            }
        }
        self.amplitude * self.amplitude * var + self.noise_std * self.noise_std
    }
}

pub fn gen_tabular_reg(seed: u64, n: usize, d: usize, noise_std: f64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("tabular data needs n, d >= 1".into()));
    }
    let gen = TabularGenerator::new(seed, d, noise_std);
    let mut rng = RngStream::new(seed, 0x7AB1);
    let x = rng.gaussian(&[n, d]);
    let y: Vec<f64> = (0..n)
        .map(|i| gen.signal(x.row(i)) + noise_std * rng.normal())
        .collect();
    Dataset::new(
        Task::Regression { outputs: 1 },
        x,
        Targets::Values(Tensor::new(vec![n, 1], y)?),
    )
}

/// Numeric CSV with a header row; the named column becomes a scalar
/// regression target and every other column a feature.
pub fn load_csv_table(path: &Path, target_column: &str) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_csv_table(&bytes, target_column)
}

pub fn parse_csv_table(bytes: &[u8], target_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = rdr.headers()?.clone();
    let tcol = headers
        .iter()
        .position(|h| h.trim() == target_column)
        .ok_or_else(|| Error::InvalidArgument(format!("target column {target_column:?} not in header")))?;
    let width = headers.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow { line, msg: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::MalformedRow {
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::MalformedRow {
                line,
                msg: format!("field {j} ({field:?}) is not a number"),
            })?;
            if j == tcol {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::InvalidArgument("CSV has no data rows".into()));
    }
    Dataset::new(
        Task::Regression { outputs: 1 },
        Tensor::new(vec![n, width - 1], xs)?,
        Targets::Values(Tensor::new(vec![n, 1], ys)?),
    )
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

pub fn load_idx(path_images: &Path, path_labels: &Path, limit: usize) -> Result<Dataset> {
    let images = fs::read(path_images)?;
    let labels = fs::read(path_labels)?;
    parse_idx(&images, &labels, limit)
}

/// Parse IDX image/label containers, keeping the first `limit` items and
/// scaling pixels to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], limit: usize) -> Result<Dataset> {
    if limit == 0 {
        return Err(Error::InvalidArgument("IDX limit must be positive".into()));
    }
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS {
        return Err(Error::Format(format!("label magic {lmagic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let lcount = be_u32(labels, 4)? as usize;
    if count != lcount {
        return Err(Error::Format(format!("{count} images but {lcount} labels")));
    }
    let pixels = rows * cols;
    if images.len() != 16 + count * pixels {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header implies {}",
            images.len() - 16,
            count * pixels
        )));
    }
    if labels.len() != 8 + count {
        return Err(Error::Format(format!(
            "label payload is {} bytes, header implies {count}",
            labels.len() - 8
        )));
    }
    let n = count.min(limit);
    let data = images[16..16 + n * pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = 10.max(ys.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        Task::Classification { classes },
        Tensor::new(vec![n, pixels], data)?,
        Targets::Labels(ys),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.train + self.val + self.test;
        if (s - 1.0).abs() > 1e-12 || [self.train, self.val, self.test].iter().any(|f| *f < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative and sum to 1 (got {s})"
            )));
        }
        Ok(())
    }

    /// Index sets for a dataset of size `n`: disjoint and exhaustive.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        if self.train < 1.0 {
            RngStream::new(self.seed, 0x5B17).shuffle(&mut idx);
        }
        let n_train = ((self.train * n as f64).round() as usize).min(n);
        let n_val = ((self.val * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok((idx, val, test))
    }
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = spec.indices(dataset.len())?;
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}
