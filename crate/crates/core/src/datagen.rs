//! Imbalanced Gaussian-mixture datasets: generation, stratified splitting
//! and a plain-text CSV file format.
//!
//! File layout: three header lines `n,<rows>`, `d,<dims>`, `c,<classes>`,
//! then one line per sample `x_1,...,x_d,label,provenance` where provenance
//! is `real` or `synthetic`. Floats are written in shortest round-trip form,
//! so save/load is lossless.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::NumArray;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// Feature rows with class labels and a real/synthetic flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: NumArray,
    labels: Vec<usize>,
    classes: usize,
    provenance: Vec<Provenance>,
}

impl LabeledDataset {
    pub fn new(
        features: NumArray,
        labels: Vec<usize>,
        classes: usize,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.shape().len() != 2 || features.rows() != n || provenance.len() != n {
            return Err(Error::Dimension(format!(
                "features {:?}, {n} labels and {} provenance flags disagree",
                features.shape(),
                provenance.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Class {
                class: bad,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance,
        })
    }

    /// A dataset with every row flagged as `provenance`.
    pub fn uniform_provenance(
        features: NumArray,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = labels.len();
        Self::new(features, labels, classes, vec![provenance; n])
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            features: NumArray::zeros(vec![0, dim]),
            labels: Vec::new(),
            classes,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &NumArray {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn count_of(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&x| x == p).count()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    /// Only the rows flagged as `p`.
    pub fn filter_provenance(&self, p: Provenance) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.provenance[i] == p).collect();
        self.subset(&idx)
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.classes != other.classes || (!other.is_empty() && self.dim() != other.dim()) {
            return Err(Error::Dimension(format!(
                "cannot merge a {}-class, {}-dim dataset into a {}-class, {}-dim one",
                other.classes,
                other.dim(),
                self.classes,
                self.dim()
            )));
        }
        Ok(LabeledDataset {
            features: NumArray::vstack(&[&self.features, &other.features])?
                .reshaped(vec![self.len() + other.len(), self.dim()])?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            classes: self.classes,
            provenance: self
                .provenance
                .iter()
                .chain(&other.provenance)
                .copied()
                .collect(),
        })
    }
}

/// Class-conditional isotropic Gaussians with geometrically decaying class sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    /// One mean vector per class; all of the same dimension.
    pub means: Vec<Vec<f64>>,
    /// Standard deviation per class.
    pub stds: Vec<f64>,
    /// Size of the largest (first) class.
    pub n_max: usize,
    /// Largest over smallest class size, at least 1.
    pub imbalance_ratio: f64,
    /// Explicit class sizes; when present they replace the decay formula.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
}

impl Default for MixtureSpec {
    /// Three overlapping 2-D classes with 500/150/50 samples.
    fn default() -> Self {
        Self {
            means: vec![vec![0.0, 0.0], vec![1.5, 0.0], vec![0.75, 1.3]],
            stds: vec![0.7, 0.7, 0.7],
            n_max: 500,
            imbalance_ratio: 10.0,
            class_counts: Some(vec![500, 150, 50]),
        }
    }
}

impl MixtureSpec {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c == 0 {
            return Err(Error::Spec("at least one class mean is required".into()));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Spec("class means must share a non-zero dimension".into()));
        }
        if self.means.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Spec("class means must be finite".into()));
        }
        if self.stds.len() != c || self.stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Spec(format!(
                "expected {c} positive standard deviations, got {:?}",
                self.stds
            )));
        }
        if !(self.imbalance_ratio.is_finite() && self.imbalance_ratio >= 1.0) {
            return Err(Error::Spec(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.n_max < c {
            return Err(Error::Spec(format!(
                "n_max ({}) must be at least the class count ({c})",
                self.n_max
            )));
        }
        if let Some(counts) = &self.class_counts {
            if counts.len() != c || counts.contains(&0) {
                return Err(Error::Spec(format!(
                    "explicit class counts {counts:?} must list {c} positive sizes"
                )));
            }
        }
        Ok(())
    }

    /// `n_i = round(n_max * r^(-i/(c-1)))`, or the explicit counts when given.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        if let Some(counts) = &self.class_counts {
            return Ok(counts.clone());
        }
        let sizes = decay_counts(self.n_max, self.imbalance_ratio, self.classes());
        if let Some(i) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Spec(format!(
                "class {i} rounds to zero samples; increase n_max"
            )));
        }
        Ok(sizes)
    }
}

/// Geometric class-size decay from `n_max` down to `n_max / ratio`.
pub fn decay_counts(n_max: usize, ratio: f64, classes: usize) -> Vec<usize> {
    if classes == 1 {
        return vec![n_max];
    }
    (0..classes)
        .map(|i| {
            let exponent = -(i as f64) / (classes - 1) as f64;
            (n_max as f64 * ratio.powf(exponent)).round() as usize
        })
        .collect()
}

/// Draw the mixture. Rows are grouped by class in ascending order.
pub fn make_imbalanced_mixture(spec: &MixtureSpec, seed: u64) -> Result<LabeledDataset> {
    let sizes = spec.class_sizes()?;
    let d = spec.dim();
    let mut data = Vec::with_capacity(sizes.iter().sum::<usize>() * d);
    let mut labels = Vec::new();
    for (class, &n) in sizes.iter().enumerate() {
        let mut r = rng::stream(seed, &[tag::DATA, class as u64]);
        for _ in 0..n {
            for (mu, _) in spec.means[class].iter().zip(0..d) {
                let z: f64 = r.sample(StandardNormal);
                data.push(mu + spec.stds[class] * z);
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    LabeledDataset::uniform_provenance(
        NumArray::matrix(n, d, data)?,
        labels,
        spec.classes(),
        Provenance::Real,
    )
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Stratified split: every class is shuffled and divided independently,
/// `round(n_i * val)` and `round(n_i * test)` samples go to validation and
/// test, the remainder to training, so every part is within one sample of its
/// exact share. Each part keeps the original row order.
pub fn split_dataset(
    ds: &LabeledDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let SplitFractions { train, val, test } = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!(
            "split fractions must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..ds.classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::Stratification {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng::stream(seed, &[tag::SPLIT, class as u64]));
        let n = idx.len() as f64;
        let n_val = (n * val).round() as usize;
        let n_test = (n * test).round() as usize;
        let n_train = idx.len() - n_val - n_test;
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [a, b, c] = parts;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Serialize to the dataset text format.
pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n,{}", ds.len());
    let _ = writeln!(out, "d,{}", ds.dim());
    let _ = writeln!(out, "c,{}", ds.classes());
    for i in 0..ds.len() {
        for x in ds.features.row(i) {
            let _ = write!(out, "{x},");
        }
        let _ = writeln!(out, "{},{}", ds.labels[i], ds.provenance[i].as_str());
    }
    out
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

/// Parse the dataset text format; `origin` is only used in error messages.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<LabeledDataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let mut header = |key: &str| -> Result<usize> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| err(1, format!("missing header line `{key},<value>`")))?;
        let value = line
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(','))
            .ok_or_else(|| err(no, format!("expected header `{key},<value>`, found `{line}`")))?;
        value
            .trim()
            .parse()
            .map_err(|_| err(no, format!("header `{key}` is not a non-negative integer")))
    };
    let n = header("n")?;
    let d = header("d")?;
    let c = header("c")?;
    if d == 0 || c == 0 {
        return Err(err(3, "dimension and class count must be positive".into()));
    }

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(err(no, format!("expected {} fields, found {}", d + 2, fields.len())));
        }
        for (j, f) in fields[..d].iter().enumerate() {
            let x: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(no, format!("feature {j} `{f}` is not a number")))?;
            if !x.is_finite() {
                return Err(err(no, format!("feature {j} is not finite")));
            }
            data.push(x);
        }
        let label: usize = fields[d]
            .trim()
            .parse()
            .map_err(|_| err(no, format!("label `{}` is not a class id", fields[d])))?;
        if label >= c {
            return Err(Error::Validation(format!(
                "{}: line {no}: label {label} outside the declared {c} classes",
                origin.display()
            )));
        }
        labels.push(label);
        provenance.push(match fields[d + 1].trim() {
            "real" => Provenance::Real,
            "synthetic" => Provenance::Synthetic,
            other => return Err(err(no, format!("unknown provenance `{other}`"))),
        });
    }
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{}: header declares {n} rows, found {}",
            origin.display(),
            labels.len()
        )));
    }
    LabeledDataset::new(NumArray::matrix(n, d, data)?, labels, c, provenance)
}
