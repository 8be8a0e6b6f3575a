//! The label predictor: cross-entropy training, per-class accuracy and
//! input-space log-probability gradients used for guidance.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::numeric::{
    chunked_gradient, scalar_gradient, Activation, FeedForwardNet, NumArray, OutputHead, PickedSum,
    Sgd, StepDecay,
};
use crate::par;
use crate::rng::{self, tag};

/// Fraction of correctly classified samples per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracyVector(Vec<f64>);

impl ClassAccuracyVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Anything that assigns a class to each input row.
pub trait LabelPredictor: Sync {
    fn classes(&self) -> usize;
    fn predict(&self, x: &NumArray) -> Result<Vec<usize>>;
}

/// Feed-forward classifier with a log-softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    net: FeedForwardNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the rate by `lr_decay` at each fraction of total epochs in `lr_milestones`.
    pub lr_decay: f64,
    pub lr_milestones: Vec<f64>,
    /// Standard deviation of Gaussian input noise added to training batches; 0 disables.
    pub noise_std: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_milestones: vec![0.3, 0.6, 0.9],
            noise_std: 0.0,
        }
    }
}

impl ClassifierSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("classifier.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("classifier.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("classifier.momentum must be in [0, 1)".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("classifier.noise_std must be >= 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("classifier.hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.learning_rate,
            factor: self.lr_decay,
            milestones: self.lr_milestones.clone(),
        }
    }
}

impl ClassifierModel {
    /// Seeded fan-in initialization of a `dim -> hidden... -> classes` net.
    pub fn new(
        dim: usize,
        classes: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let mut r = rng::stream(seed, &[tag::INIT, 1]);
        let net = FeedForwardNet::init_uniform(&dims, activation, OutputHead::LogSoftmax, &mut r)?;
        Ok(Self { net })
    }

    pub fn from_net(net: FeedForwardNet) -> Result<Self> {
        if net.head() != OutputHead::LogSoftmax {
            return Err(Error::Config("classifier nets need a log_softmax head".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &FeedForwardNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedForwardNet {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    /// `[rows, classes]` log-probabilities.
    pub fn log_probs(&self, x: &NumArray) -> Result<NumArray> {
        self.net.forward(x)
    }

    /// Cross-entropy `-mean log p(y_i | x_i)` without updating anything.
    pub fn cross_entropy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Validation("cross-entropy of an empty dataset".into()));
        }
        let lp = self.log_probs(ds.features())?;
        let total: f64 = ds.labels().iter().enumerate().map(|(i, &y)| lp.row(i)[y]).sum();
        Ok(-total / ds.len() as f64)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl LabelPredictor for ClassifierModel {
    fn classes(&self) -> usize {
        self.net.output_dim()
    }

    fn predict(&self, x: &NumArray) -> Result<Vec<usize>> {
        if x.rows() == 0 || x.is_empty() {
            return Ok(Vec::new());
        }
        let lp = self.log_probs(&x.as_matrix())?;
        Ok(lp.iter_rows().map(argmax).collect())
    }
}

/// One pass over `ds` in shuffled mini-batches; returns the mean
/// cross-entropy of the batches as seen before each update.
pub fn train_epoch(
    model: &mut ClassifierModel,
    ds: &LabeledDataset,
    opt: &mut Sgd,
    learning_rate: f64,
    settings: &ClassifierSettings,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let classes = model.classes();
    if let Some(&bad) = ds.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Class {
            class: bad,
            classes,
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    let mut noise_rng = rng::stream(seed, &[tag::NOISE_AUGMENT, epoch as u64]);

    let mut loss_sum = 0.0;
    for batch in order.chunks(settings.batch_size) {
        let mut x = ds.features().select_rows(batch);
        if settings.noise_std > 0.0 {
            for v in x.data_mut() {
                let z: f64 = noise_rng.sample(StandardNormal);
                *v += settings.noise_std * z;
            }
        }
        let y: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
        let net = &model.net;
        let (log_lik, mut grads) = chunked_gradient(net, batch.len(), |range| {
            scalar_gradient(net, &x.slice_rows(range.clone()), &PickedSum(&y[range]))
        })?;
        loss_sum -= log_lik;
        // Minimize -mean log p.
        grads.scale(-1.0 / batch.len() as f64);
        opt.step(&mut model.net, &grads, learning_rate);
    }
    let loss = loss_sum / ds.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("classifier loss became {loss}")));
    }
    Ok(loss)
}

/// Fraction of correct argmax predictions per class. A class with no
/// samples in `ds` gets accuracy 0.
pub fn per_class_accuracy(
    model: &dyn LabelPredictor,
    ds: &LabeledDataset,
) -> Result<ClassAccuracyVector> {
    let c = model.classes();
    let predicted = predict_all(model, ds.features())?;
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&y, &p) in ds.labels().iter().zip(&predicted) {
        total[y] += 1;
        if y == p {
            correct[y] += 1;
        }
    }
    ClassAccuracyVector::new(
        correct
            .iter()
            .zip(&total)
            .map(|(&k, &n)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
            .collect(),
    )
}

/// Predictions for every row, evaluated in fixed-size chunks.
pub fn predict_all(model: &dyn LabelPredictor, x: &NumArray) -> Result<Vec<usize>> {
    let parts = par::map_chunks(x.rows(), par::CHUNK_ROWS * 4, |range| {
        model.predict(&x.slice_rows(range))
    });
    let mut out = Vec::with_capacity(x.rows());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `d/dx log p(y_i | x_i)` for every row of `x`.
pub fn logprob_input_gradient(
    model: &ClassifierModel,
    x: &NumArray,
    labels: &[usize],
) -> Result<NumArray> {
    let classes = model.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Class {
            class: bad,
            classes,
        });
    }
    let matrix = x.as_matrix();
    let g = scalar_gradient(&model.net, &matrix, &PickedSum(labels))?;
    g.input.reshaped(x.shape().to_vec())
}
