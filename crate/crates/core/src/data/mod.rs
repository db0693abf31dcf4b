//! Datasets: MNIST IDX files, synthetic blobs, splits and batching.

mod blobs;
mod idx;
mod split;

pub use blobs::{blob_centers, synth_blobs, BlobSpec};
pub use idx::{encode_idx, load_mnist_idx, parse_idx, write_mnist_idx, IdxArray, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::{batches, holdout_split, mnist_train_val, train_test_split, HoldoutSplit, LabelMap, MNIST_VAL_COUNT};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Samples of held-out classes, labels kept in the original indexing.
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// One mean and scale over every input value (images).
    Global,
    /// Mean and scale per input coordinate (tabular features).
    PerFeature,
}

/// Standardization statistics estimated on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: NormalizationMode,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn fit(train: &Dataset, mode: NormalizationMode) -> Result<Self> {
        let n = train.len();
        if n == 0 {
            return Err(Error::Input("cannot fit normalization on an empty dataset".into()));
        }
        let d = train.sample_len();
        let (mean, scale) = match mode {
            NormalizationMode::Global => {
                let m = train.inputs.iter().sum::<f64>() / train.inputs.len() as f64;
                let v = train.inputs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / train.inputs.len() as f64;
                (vec![m], vec![guard_scale(v.sqrt())])
            }
            NormalizationMode::PerFeature => {
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    mean.iter_mut().zip(train.sample(i)).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    var.iter_mut()
                        .zip(train.sample(i))
                        .zip(&mean)
                        .for_each(|((v, x), m)| *v += (x - m) * (x - m));
                }
                (mean, var.into_iter().map(|v| guard_scale((v / n as f64).sqrt())).collect())
            }
        };
        Ok(Self { mode, mean, scale })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.sample_len();
        if self.mode == NormalizationMode::PerFeature && self.mean.len() != d {
            return Err(Error::dim(format!("normalization for {} features applied to {d}", self.mean.len())));
        }
        let inputs = ds
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let j = if self.mode == NormalizationMode::Global { 0 } else { i % d };
                (x - self.mean[j]) / self.scale[j]
            })
            .collect();
        Ok(Dataset {
            inputs,
            normalization: Some(self.clone()),
            ..ds.clone()
        })
    }
}

fn guard_scale(s: f64) -> f64 {
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

/// Samples of one fixed shape with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, sample_shape: Vec<usize>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 {
            return Err(Error::dim(format!("sample shape {sample_shape:?} is empty")));
        }
        if inputs.len() != d * labels.len() {
            return Err(Error::dim(format!(
                "{} input values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            sample_shape,
            labels,
            num_classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Inputs `[B, sample_shape...]` and labels of the given samples.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Self {
        let mut inputs = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            inputs.extend_from_slice(self.sample(i));
        }
        Self {
            inputs,
            sample_shape: self.sample_shape.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
            normalization: self.normalization.clone(),
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dim("label count mismatch"));
        }
        let mut ds = Dataset::new(self.inputs.clone(), self.sample_shape.clone(), labels, num_classes, self.split)?;
        ds.normalization = self.normalization.clone();
        Ok(ds)
    }

    /// CSV with header `label,f0,...,f{d-1}`; reals printed with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.sample_len();
        let mut s = String::from("label");
        for j in 0..d {
            write!(s, ",f{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(s, "{}", self.labels[i]).unwrap();
            for x in self.sample(i) {
                write!(s, ",{}", fmt_real(*x)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, num_classes: usize, split: Split) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Input("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.len().saturating_sub(1);
        let header_ok = cols.first() == Some(&"label") && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
        if d == 0 || !header_ok {
            return Err(Error::Input(format!("bad dataset csv header '{header}'")));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Input(format!("csv line {} has {} fields", ln + 2, fields.len())));
            }
            labels.push(
                fields[0]
                    .parse()
                    .map_err(|_| Error::Input(format!("csv line {}: bad label", ln + 2)))?,
            );
            for f in &fields[1..] {
                inputs.push(
                    f.parse()
                        .map_err(|_| Error::Input(format!("csv line {}: bad value '{f}'", ln + 2)))?,
                );
            }
        }
        Dataset::new(inputs, vec![d], labels, num_classes, split)
    }
}

/// Lossless decimal form: 17 significant digits, '.' separator.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
