use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::array::{gemm, NumArray};
use super::tape::GradientTape;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y = f(x)`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    LogSoftmax,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::LogSoftmax => "log_softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(OutputHead::Linear),
            "log_softmax" => Some(OutputHead::LogSoftmax),
            _ => None,
        }
    }
}

/// One affine layer. `weights` is `[d_in, d_out]`, `bias` is `[d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub(crate) weights: NumArray,
    pub(crate) bias: NumArray,
}

impl Dense {
    pub fn weights(&self) -> &NumArray {
        &self.weights
    }

    pub fn bias(&self) -> &NumArray {
        &self.bias
    }
}

/// Fully connected network: affine layers with `activation` between them
/// and `head` applied to the final affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
    head: OutputHead,
}

impl FeedForwardNet {
    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Dimension(format!(
                "a network needs at least two non-zero layer widths, got {layer_dims:?}"
            )));
        }
        Ok(())
    }

    /// All weights and biases zero.
    pub fn zeros(layer_dims: &[usize], activation: Activation, head: OutputHead) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Dense {
                weights: NumArray::zeros(vec![w[0], w[1]]),
                bias: NumArray::zeros(vec![w[1]]),
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
            head,
        })
    }

    /// Uniform fan-in initialization: weights draw from
    /// `U(-sqrt(g/fan_in), sqrt(g/fan_in))` with `g = 6` for layers feeding a
    /// ReLU, `g = 1` for tanh and `g = 0.1` for the output layer, so a fresh
    /// net starts close to an uninformative predictor. Biases start at zero.
    pub fn init_uniform(
        layer_dims: &[usize],
        activation: Activation,
        head: OutputHead,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation, head)?;
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let fan_in = layer.weights.shape()[0] as f64;
            let gain = match (i < last, activation) {
                (false, _) => 0.1,
                (true, Activation::Relu) => 6.0,
                (true, Activation::Tanh) => 1.0,
            };
            let bound = (gain / fan_in).sqrt();
            for w in layer.weights.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Build from explicit `(weights [d_in, d_out], bias [d_out])` pairs.
    pub fn from_parameters(
        layer_dims: &[usize],
        activation: Activation,
        head: OutputHead,
        params: Vec<(NumArray, NumArray)>,
    ) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        if params.len() != layer_dims.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layers declared, {} parameter pairs given",
                layer_dims.len() - 1,
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(params.len());
        for (i, (w, b)) in params.into_iter().enumerate() {
            let (din, dout) = (layer_dims[i], layer_dims[i + 1]);
            if w.len() != din * dout || b.len() != dout {
                return Err(Error::Dimension(format!(
                    "layer {i}: expected weights {din}x{dout} and bias {dout}"
                )));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::NumericOverflow { layer: i });
            }
            layers.push(Dense {
                weights: w.reshaped(vec![din, dout])?,
                bias: b.reshaped(vec![dout])?,
            });
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
            head,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layer dims")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameter blocks in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.data()])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.data_mut()])
    }

    /// Normalize an input into `[rows, input_dim]`; returns whether it was a single vector.
    pub(crate) fn batch_input(&self, input: &NumArray) -> Result<(usize, bool)> {
        let d = self.input_dim();
        match input.shape() {
            [n] if *n == d => Ok((1, true)),
            [n, m] if *m == d => Ok((*n, false)),
            shape => Err(Error::Dimension(format!(
                "network expects inputs of width {d}, got shape {shape:?}"
            ))),
        }
    }

    pub(crate) fn shape_output(&self, rows: usize, single: bool, data: Vec<f64>) -> NumArray {
        let shape = if single {
            vec![self.output_dim()]
        } else {
            vec![rows, self.output_dim()]
        };
        NumArray::new(shape, data).expect("output size follows from layer dims")
    }

    /// Evaluate the network on one input vector or a `[rows, input_dim]` batch.
    pub fn forward(&self, input: &NumArray) -> Result<NumArray> {
        let (rows, single) = self.batch_input(input)?;
        let mut current = input.data().to_vec();
        for i in 0..self.layers.len() {
            current = self.affine(i, rows, &current);
            if i + 1 < self.layers.len() {
                let act = self.activation;
                current.iter_mut().for_each(|x| *x = act.apply(*x));
            } else if self.head == OutputHead::LogSoftmax {
                log_softmax_rows(&mut current, self.output_dim());
            }
            if current.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericOverflow { layer: i });
            }
        }
        Ok(self.shape_output(rows, single, current))
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_recorded(&self, input: &NumArray) -> Result<(NumArray, GradientTape)> {
        GradientTape::record(self, input)
    }

    /// `x[rows, d_in] * W + b` for layer `i`.
    pub(crate) fn affine(&self, i: usize, rows: usize, x: &[f64]) -> Vec<f64> {
        let layer = &self.layers[i];
        let (din, dout) = (self.layer_dims[i], self.layer_dims[i + 1]);
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(layer.bias.data());
        }
        gemm(rows, din, dout, x, layer.weights.data(), 1.0, &mut out);
        out
    }
}

/// In-place, max-shifted log-softmax over each row of width `cols`.
pub(crate) fn log_softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        row.iter_mut().for_each(|z| *z -= log_norm);
    }
}
