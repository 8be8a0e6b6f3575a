use serde::{Deserialize, Serialize};

use super::net::FeedForwardNet;
use super::tape::{ParamGrads, ScalarGradient};
use crate::error::{Error, Result};
use crate::par;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &FeedForwardNet, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: net.params().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut FeedForwardNet, grads: &ParamGrads, lr: f64) {
        for ((p, g), v) in net
            .params_mut()
            .zip(grads.blocks())
            .zip(self.velocity.iter_mut())
        {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Step learning-rate decay: the base rate is multiplied by `factor` each
/// time training passes one of the `milestones` (fractions of total epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<f64>,
}

impl StepDecay {
    /// Rate for zero-based `epoch` of `total`.
    pub fn rate(&self, epoch: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * total as f64).round() as usize)
            .count();
        self.base * self.factor.powi(passed as i32)
    }
}

/// Sum value and parameter gradients over fixed row chunks of a batch.
///
/// Chunk boundaries depend only on `rows`, and chunk results are added in
/// order, so the sum is identical for any worker count.
pub fn chunked_gradient<F>(net: &FeedForwardNet, rows: usize, f: F) -> Result<(f64, ParamGrads)>
where
    F: Fn(std::ops::Range<usize>) -> Result<ScalarGradient> + Sync + Send,
{
    let parts = par::map_chunks(rows, par::CHUNK_ROWS, f);
    let mut total = ParamGrads::zeros_like(net);
    let mut value = 0.0;
    for part in parts {
        let part = part?;
        value += part.value;
        total.add_assign(&part.params);
    }
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((value, total))
}
