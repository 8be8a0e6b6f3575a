//! Denoising diffusion on feature vectors.
//!
//! Forward corruption uses the closed form
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`; the reverse update is
//!
//! ```text
//! x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z
//! ```
//!
//! where `eps_hat` is the denoiser's noise prediction, optionally shifted by
//! `-s * grad_x log p(y | x_t)` from a classifier. Steps are numbered `1..=T`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{logprob_input_gradient, ClassifierModel};
use crate::error::{Error, Result};
use crate::numeric::{
    chunked_gradient, scalar_gradient, Activation, FeedForwardNet, NumArray, OutputHead,
    ParamGrads, Sgd, StepDecay,
};
use crate::par;
use crate::rng::{self, tag, Rng};

/// Per-step variances and the quantities derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit per-step variances `beta_1..beta_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("at least one step is required".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect::<Vec<f64>>();
        if alpha_bar.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return Err(Error::Schedule("cumulative signal level underflows to 0".into()));
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Linear interpolation of beta from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// The 1000-step `1e-4..0.02` linear schedule rescaled to `steps` so the
    /// total injected variance is preserved.
    pub fn rescaled_default(steps: usize) -> Result<Self> {
        let (start, end) = default_beta_bounds(steps);
        Self::linear(steps, start, end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `(1e-4 * 1000 / T, 0.02 * 1000 / T)`.
pub fn default_beta_bounds(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps as f64;
    (1e-4 * scale, 0.02 * scale)
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_corrupt(
    x0: &NumArray,
    t: usize,
    eps: &NumArray,
    sched: &NoiseSchedule,
) -> Result<NumArray> {
    let ab = sched.alpha_bar(t)?;
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Sinusoidal embedding of step `t`: `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), ..]`
/// with `w_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// Predicts the noise contained in `x_t` at step `t`.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;
    /// `x_t` is `[rows, data_dim]`; returns the same shape.
    fn predict_noise(&self, x_t: &NumArray, t: usize) -> Result<NumArray>;
}

/// Feed-forward noise predictor on `[x_t || embedding(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    net: FeedForwardNet,
    time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSettings {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<f64>,
}

impl Default for DenoiserSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_embed_dim: 16,
            epochs: 400,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_milestones: vec![0.75],
        }
    }
}

impl DenoiserSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("diffusion.batch_size must be positive".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("diffusion.time_embed_dim must be even".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("diffusion.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("diffusion.momentum must be in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("diffusion.hidden widths must be positive".into()));
        }
        Ok(())
    }
}

impl DenoiserModel {
    pub fn new(data_dim: usize, settings: &DenoiserSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let dims: Vec<usize> = std::iter::once(data_dim + settings.time_embed_dim)
            .chain(settings.hidden.iter().copied())
            .chain(std::iter::once(data_dim))
            .collect();
        let mut r = rng::stream(seed, &[tag::INIT, 2]);
        let net = FeedForwardNet::init_uniform(&dims, Activation::Relu, OutputHead::Linear, &mut r)?;
        Ok(Self {
            net,
            time_embed_dim: settings.time_embed_dim,
        })
    }

    pub fn from_net(net: FeedForwardNet, time_embed_dim: usize) -> Result<Self> {
        if net.head() != OutputHead::Linear {
            return Err(Error::Config("denoiser nets need a linear head".into()));
        }
        if net.input_dim() != net.output_dim() + time_embed_dim {
            return Err(Error::Dimension(format!(
                "denoiser input width {} != data dim {} + embedding {time_embed_dim}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            time_embed_dim,
        })
    }

    pub fn net(&self) -> &FeedForwardNet {
        &self.net
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    /// `[x_t || embedding(t_i)]` for every row.
    fn net_input(&self, x_t: &NumArray, steps: &[usize]) -> Result<NumArray> {
        let d = self.data_dim();
        if x_t.cols() != d || x_t.rows() != steps.len() {
            return Err(Error::Dimension(format!(
                "denoiser expects [{}, {d}] inputs, got {:?}",
                steps.len(),
                x_t.shape()
            )));
        }
        let width = d + self.time_embed_dim;
        let mut data = Vec::with_capacity(steps.len() * width);
        for (row, &t) in x_t.iter_rows().zip(steps) {
            data.extend_from_slice(row);
            data.extend(time_embedding(t, self.time_embed_dim));
        }
        NumArray::matrix(steps.len(), width, data)
    }

    /// Noise prediction with a separate step per row.
    pub fn predict_noise_at(&self, x_t: &NumArray, steps: &[usize]) -> Result<NumArray> {
        let out = self.net.forward(&self.net_input(x_t, steps)?)?;
        out.reshaped(x_t.shape().to_vec())
    }
}

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn predict_noise(&self, x_t: &NumArray, t: usize) -> Result<NumArray> {
        self.predict_noise_at(x_t, &vec![t; x_t.rows()])
    }
}

/// Mean over rows of `||eps_i - model(x_t_i, t_i)||^2` for given draws,
/// with its gradient with respect to the denoiser parameters.
pub fn noise_prediction_loss(
    model: &DenoiserModel,
    x0: &NumArray,
    steps: &[usize],
    eps: &NumArray,
    sched: &NoiseSchedule,
) -> Result<(f64, ParamGrads)> {
    let n = x0.rows();
    if n == 0 || x0.is_empty() {
        return Err(Error::Validation("diffusion loss needs a non-empty batch".into()));
    }
    x0.check_same_shape(eps)?;
    if steps.len() != n {
        return Err(Error::Dimension(format!("{} steps for {n} rows", steps.len())));
    }
    let mut x_t = NumArray::zeros(vec![n, x0.cols()]);
    for (i, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let row = x_t.row_mut(i);
        for ((out, &x), &e) in row.iter_mut().zip(x0.row(i)).zip(eps.row(i)) {
            *out = a * x + b * e;
        }
    }
    let input = model.net_input(&x_t, steps)?;
    let net = &model.net;
    let (sum, mut grads) = chunked_gradient(net, n, |range| {
        let target = eps.slice_rows(range.clone());
        let mse = |out: &NumArray| -> Result<(f64, NumArray)> {
            let diff = out.axpby(1.0, &target, -1.0)?;
            let value = diff.squared_norm();
            Ok((value, diff.map(|v| 2.0 * v)))
        };
        scalar_gradient(net, &input.slice_rows(range), &mse)
    })?;
    grads.scale(1.0 / n as f64);
    let loss = sum / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("diffusion loss became {loss}")));
    }
    Ok((loss, grads))
}

/// Draw `t ~ U{1..T}` and `eps ~ N(0, I)` per row, then evaluate
/// [`noise_prediction_loss`].
pub fn diffusion_loss(
    model: &DenoiserModel,
    batch_x0: &NumArray,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, ParamGrads)> {
    let (steps, eps) = draw_noise(batch_x0.rows(), batch_x0.cols(), sched.steps(), rng);
    noise_prediction_loss(model, batch_x0, &steps, &eps, sched)
}

fn draw_noise(rows: usize, cols: usize, steps: usize, rng: &mut Rng) -> (Vec<usize>, NumArray) {
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
    let eps: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    (ts, NumArray::matrix(rows, cols, eps).expect("sized above"))
}

/// The reverse update given an already-chosen noise estimate.
pub fn reverse_update(
    x_t: &NumArray,
    t: usize,
    eps_hat: &NumArray,
    sched: &NoiseSchedule,
    z: &NumArray,
) -> Result<NumArray> {
    x_t.check_same_shape(eps_hat)?;
    x_t.check_same_shape(z)?;
    let alpha = sched.alpha(t)?;
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)?).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = sched.sigma(t)?;
    let mut out = x_t.clone();
    for ((o, &e), &zi) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = inv_sqrt_alpha * (*o - coef * e) + sigma * zi;
    }
    Ok(out)
}

/// One unguided reverse step. `z` should be zero at `t = 1`.
pub fn reverse_step(
    x_t: &NumArray,
    t: usize,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    z: &NumArray,
) -> Result<NumArray> {
    let eps = model.predict_noise(&x_t.as_matrix(), t)?;
    reverse_update(x_t, t, &eps.reshaped(x_t.shape().to_vec())?, sched, z)
}

/// Source of `grad_x log p(y | x)` for guidance.
pub trait GuidanceSource: Sync {
    fn classes(&self) -> usize;
    fn logprob_gradient(&self, x: &NumArray, labels: &[usize]) -> Result<NumArray>;
}

impl GuidanceSource for ClassifierModel {
    fn classes(&self) -> usize {
        crate::classifier::LabelPredictor::classes(self)
    }

    fn logprob_gradient(&self, x: &NumArray, labels: &[usize]) -> Result<NumArray> {
        logprob_input_gradient(self, x, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Gradient scale `s >= 0`; 0 disables guidance.
    pub scale: f64,
    /// Multiply the gradient term by `sqrt(1 - abar_t)`.
    pub scale_by_noise_level: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            scale_by_noise_level: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be >= 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// `eps - s * grad_x log p(y | x_t)`, optionally times `sqrt(1 - abar_t)`.
pub fn guided_noise(
    eps: &NumArray,
    x_t: &NumArray,
    t: usize,
    labels: &[usize],
    classifier: &dyn GuidanceSource,
    gcfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<NumArray> {
    let classes = classifier.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Class {
            class: bad,
            classes,
        });
    }
    if gcfg.scale == 0.0 {
        return Ok(eps.clone());
    }
    let grad = classifier.logprob_gradient(x_t, labels)?;
    let mut factor = gcfg.scale;
    if gcfg.scale_by_noise_level {
        factor *= (1.0 - sched.alpha_bar(t)?).sqrt();
    }
    eps.axpby(1.0, &grad.reshaped(eps.shape().to_vec())?, -factor)
}

/// One reverse step with the noise estimate replaced by its guided version.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    x_t: &NumArray,
    t: usize,
    labels: &[usize],
    model: &dyn NoisePredictor,
    classifier: &dyn GuidanceSource,
    gcfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    z: &NumArray,
) -> Result<NumArray> {
    let x = x_t.as_matrix();
    let eps = model.predict_noise(&x, t)?;
    let eps_hat = guided_noise(&eps, &x, t, labels, classifier, gcfg, sched)?;
    reverse_update(x_t, t, &eps_hat.reshaped(x_t.shape().to_vec())?, sched, z)
}

/// Classifier, target classes and scale for a guided sampling run.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub classifier: &'a dyn GuidanceSource,
    pub labels: &'a [usize],
    pub config: &'a GuidanceConfig,
}

/// Independent reverse chains from `x_T ~ N(0, I)`. Chain `i` draws all its
/// noise from its own stream of `(seed, i)`; chains are run in fixed-size
/// blocks and reassembled in index order.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    n: usize,
    guidance: Option<Guidance<'_>>,
    seed: u64,
) -> Result<NumArray> {
    let d = model.data_dim();
    if let Some(g) = &guidance {
        if g.labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} guidance labels for {n} chains",
                g.labels.len()
            )));
        }
        g.config.validate()?;
    }
    let blocks = par::map_chunks(n, par::CHUNK_ROWS, |range| {
        run_chains(model, sched, range, guidance, seed)
    });
    let mut data = Vec::with_capacity(n * d);
    for b in blocks {
        data.extend(b?.into_data());
    }
    NumArray::matrix(n, d, data)
}

fn run_chains(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    range: std::ops::Range<usize>,
    guidance: Option<Guidance<'_>>,
    seed: u64,
) -> Result<NumArray> {
    let d = model.data_dim();
    let m = range.len();
    let mut rngs: Vec<Rng> = range
        .clone()
        .map(|i| rng::stream(seed, &[tag::CHAIN, i as u64]))
        .collect();
    let mut x = NumArray::zeros(vec![m, d]);
    for (row, r) in x.data_mut().chunks_mut(d).zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
    }
    let labels = guidance.map(|g| &g.labels[range.clone()]);
    let mut z = NumArray::zeros(vec![m, d]);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(&x, t)?;
        let eps_hat = match (guidance, labels) {
            (Some(g), Some(y)) => guided_noise(&eps, &x, t, y, g.classifier, g.config, sched)?,
            _ => eps,
        };
        if t > 1 {
            for (row, r) in z.data_mut().chunks_mut(d).zip(rngs.iter_mut()) {
                row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            }
        } else {
            z.data_mut().fill(0.0);
        }
        x = reverse_update(&x, t, &eps_hat, sched, &z)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampling chain diverged at step {t}")));
        }
    }
    Ok(x)
}

/// Trained denoiser and its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: DenoiserModel,
    pub loss_trace: Vec<f64>,
}

/// Label-free training of a fresh denoiser on `features` by minimizing the
/// noise-prediction loss with momentum SGD.
pub fn pretrain_dm(
    features: &NumArray,
    sched: &NoiseSchedule,
    settings: &DenoiserSettings,
    seed: u64,
) -> Result<Pretrained> {
    let n = features.rows();
    if n == 0 || features.is_empty() {
        return Err(Error::Validation("denoiser pretraining needs data".into()));
    }
    let mut model = DenoiserModel::new(features.cols(), settings, seed)?;
    let mut opt = Sgd::new(&model.net, settings.momentum);
    let lr = StepDecay {
        base: settings.learning_rate,
        factor: settings.lr_decay,
        milestones: settings.lr_milestones.clone(),
    };
    let mut trace: Vec<f64> = Vec::with_capacity(settings.epochs);
    let mut over = 0;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, 1 << 32, epoch as u64]));
        let rate = lr.rate(epoch, settings.epochs);
        let mut total = 0.0;
        for (b, batch) in order.chunks(settings.batch_size).enumerate() {
            let x0 = features.select_rows(batch);
            let mut r = rng::stream(seed, &[tag::DIFFUSION_LOSS, epoch as u64, b as u64]);
            let (loss, grads) = diffusion_loss(&model, &x0, sched, &mut r)?;
            total += loss * batch.len() as f64;
            opt.step(&mut model.net, &grads, rate);
        }
        let epoch_loss = total / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("denoiser loss became {epoch_loss}")));
        }
        trace.push(epoch_loss);
        if epoch_loss > 10.0 * trace[0] {
            over += 1;
            if over >= 3 {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: epoch_loss,
                    initial: trace[0],
                });
            }
        } else {
            over = 0;
        }
    }
    Ok(Pretrained {
        model,
        loss_trace: trace,
    })
}

/// Mean noise-prediction loss over `features` with draws from `seed`; no gradients kept.
pub fn evaluate_loss(
    model: &DenoiserModel,
    features: &NumArray,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, &[tag::DIFFUSION_LOSS, u64::MAX]);
    let (steps, eps) = draw_noise(features.rows(), features.cols(), sched.steps(), &mut r);
    let mut x_t = NumArray::zeros(features.shape().to_vec());
    for (i, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        for ((o, &x), &e) in x_t.row_mut(i).iter_mut().zip(features.row(i)).zip(eps.row(i)) {
            *o = ab.sqrt() * x + (1.0 - ab).sqrt() * e;
        }
    }
    let pred = model.predict_noise_at(&x_t, &steps)?;
    Ok(pred.axpby(1.0, &eps, -1.0)?.squared_norm() / features.rows() as f64)
}
