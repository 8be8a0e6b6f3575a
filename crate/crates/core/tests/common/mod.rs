//! Independent reference evaluation used as a test oracle.
//!
//! Plain nested loops over the parameter blocks, with no shared code path
//! with the library's batched forward/backward implementation.

#![allow(dead_code)]

use iois::numeric::{Activation, FeedForwardNet, OutputHead};

/// Output of `net` on one input row plus the sign pattern of every hidden
/// pre-activation (used to detect ReLU kinks between probe points).
pub fn reference_forward(net: &FeedForwardNet, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let dims = net.layer_dims();
    let layers = net.layers();
    let mut signs = Vec::new();
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let w = layer.weights().data();
        let b = layer.bias().data();
        let mut z = vec![0.0; dout];
        for j in 0..dout {
            let mut s = b[j];
            for i in 0..din {
                s += a[i] * w[i * dout + j];
            }
            z[j] = s;
        }
        if l + 1 < layers.len() {
            for v in z.iter_mut() {
                signs.push(*v > 0.0);
                *v = match net.activation() {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        } else if net.head() == OutputHead::LogSoftmax {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            z.iter_mut().for_each(|v| *v -= lse);
        }
        a = z;
    }
    (a, signs)
}

/// Central-difference agreement: relative error below `rel`, or absolute
/// error below `abs_floor`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel * analytic.abs().max(numeric.abs())
}

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// Set one scalar parameter (flat index over `w0, b0, w1, b1, ...`).
pub fn set_param(net: &mut FeedForwardNet, mut index: usize, value: f64) {
    for block in net.params_mut() {
        if index < block.len() {
            block[index] = value;
            return;
        }
        index -= block.len();
    }
    panic!("parameter index out of range");
}

pub fn get_param(net: &FeedForwardNet, mut index: usize) -> f64 {
    for block in net.params() {
        if index < block.len() {
            return block[index];
        }
        index -= block.len();
    }
    panic!("parameter index out of range");
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

use iois::classifier::{logprob_input_gradient, ClassifierModel};
use iois::diffusion::{noise_prediction_loss, time_embedding, DenoiserModel, DenoiserSettings, NoiseSchedule};
use iois::numeric::{scalar_gradient, NumArray, PickedSum};
use iois::rng;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Tally of a finite-difference sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub trials: usize,
    pub checked: usize,
    /// Coordinates whose probes straddle a ReLU kink (difference quotient undefined).
    pub skipped_kinks: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > ABS_FLOOR {
            self.worst_rel = self.worst_rel.max(diff / scale);
        }
        if !close(analytic, numeric, REL_TOL, ABS_FLOOR) {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0 && self.skipped_kinks * 10 < self.checked
    }
}

fn rows_eval(net: &FeedForwardNet, rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut outs = Vec::new();
    let mut signs = Vec::new();
    for r in rows {
        let (o, s) = reference_forward(net, r);
        outs.push(o);
        signs.extend(s);
    }
    (outs, signs)
}

fn sum_logprob(net: &FeedForwardNet, rows: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<bool>) {
    let (outs, signs) = rows_eval(net, rows);
    (outs.iter().zip(labels).map(|(o, &y)| o[y]).sum(), signs)
}

/// Classifier (default architecture, random init): gradient of
/// `sum log p(y|x)` w.r.t. every input coordinate and `params_per_trial`
/// random parameters, against central differences.
pub fn check_classifier_gradients(trials: usize, params_per_trial: usize, seed: u64) -> GradCheck {
    let mut r = rng::stream(seed, &[0xC1]);
    let mut tally = GradCheck::default();
    for trial in 0..trials {
        let d = r.random_range(2..5);
        let c = r.random_range(2..5);
        let model = ClassifierModel::new(d, c, &[64, 64], Activation::Relu, seed ^ trial as u64).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal) * 1.5).collect())
            .collect();
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..c)).collect();
        let x = NumArray::from_rows(&rows).unwrap();
        let net = model.net();

        let input_grad = logprob_input_gradient(&model, &x, &labels).unwrap();
        for i in 0..rows.len() {
            for j in 0..d {
                let mut plus = rows.clone();
                let mut minus = rows.clone();
                plus[i][j] += H;
                minus[i][j] -= H;
                let (fp, sp) = sum_logprob(net, &plus, &labels);
                let (fm, sm) = sum_logprob(net, &minus, &labels);
                if sp != sm {
                    tally.skipped_kinks += 1;
                    continue;
                }
                tally.record(input_grad.row(i)[j], (fp - fm) / (2.0 * H));
            }
        }

        let g = scalar_gradient(net, &x, &PickedSum(&labels)).unwrap();
        let flat = g.params.flatten();
        for _ in 0..params_per_trial {
            let k = r.random_range(0..flat.len());
            let base = get_param(net, k);
            let mut plus = net.clone();
            set_param(&mut plus, k, base + H);
            let mut minus = net.clone();
            set_param(&mut minus, k, base - H);
            let (fp, sp) = sum_logprob(&plus, &rows, &labels);
            let (fm, sm) = sum_logprob(&minus, &rows, &labels);
            if sp != sm {
                tally.skipped_kinks += 1;
                continue;
            }
            tally.record(flat[k], (fp - fm) / (2.0 * H));
        }
        tally.trials += 1;
    }
    tally
}

fn reference_noise_loss(
    net: &FeedForwardNet,
    embed: usize,
    x0: &[Vec<f64>],
    steps: &[usize],
    eps: &[Vec<f64>],
    sched: &NoiseSchedule,
) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut signs = Vec::new();
    for ((x, &t), e) in x0.iter().zip(steps).zip(eps) {
        let ab = sched.alpha_bar(t).unwrap();
        let mut input: Vec<f64> = x
            .iter()
            .zip(e)
            .map(|(a, b)| ab.sqrt() * a + (1.0 - ab).sqrt() * b)
            .collect();
        input.extend(time_embedding(t, embed));
        let (out, s) = reference_forward(net, &input);
        total += out.iter().zip(e).map(|(o, e)| (e - o).powi(2)).sum::<f64>();
        signs.extend(s);
    }
    (total / x0.len() as f64, signs)
}

/// Denoiser (default architecture, random init): parameter gradients of the
/// noise-prediction loss with frozen `(t, eps)` draws.
pub fn check_denoiser_gradients(trials: usize, params_per_trial: usize, seed: u64) -> GradCheck {
    let mut r = rng::stream(seed, &[0xD1]);
    let sched = NoiseSchedule::rescaled_default(100).unwrap();
    let settings = DenoiserSettings::default();
    let mut tally = GradCheck::default();
    for trial in 0..trials {
        let d = r.random_range(1..4);
        let model = DenoiserModel::new(d, &settings, seed ^ trial as u64).unwrap();
        let n = 3;
        let x0: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let eps: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let steps: Vec<usize> = (0..n).map(|_| r.random_range(1..=100)).collect();
        let (loss, grads) = noise_prediction_loss(
            &model,
            &NumArray::from_rows(&x0).unwrap(),
            &steps,
            &NumArray::from_rows(&eps).unwrap(),
            &sched,
        )
        .unwrap();
        let net = model.net();
        let embed = model.time_embed_dim();
        let (ref_loss, _) = reference_noise_loss(net, embed, &x0, &steps, &eps, &sched);
        assert!((loss - ref_loss).abs() <= 1e-9 * ref_loss.abs().max(1.0));
        let flat = grads.flatten();
        for _ in 0..params_per_trial {
            let k = r.random_range(0..flat.len());
            let base = get_param(net, k);
            let mut plus = net.clone();
            set_param(&mut plus, k, base + H);
            let mut minus = net.clone();
            set_param(&mut minus, k, base - H);
            let (fp, sp) = reference_noise_loss(&plus, embed, &x0, &steps, &eps, &sched);
            let (fm, sm) = reference_noise_loss(&minus, embed, &x0, &steps, &eps, &sched);
            if sp != sm {
                tally.skipped_kinks += 1;
                continue;
            }
            tally.record(flat[k], (fp - fm) / (2.0 * H));
        }
        tally.trials += 1;
    }
    tally
}
