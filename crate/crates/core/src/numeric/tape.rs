//! Reverse-mode gradients for [`FeedForwardNet`].
//!
//! The tape records, for every layer, the activation matrix that fed it and
//! the layer's output after its nonlinearity. The backward pass walks the
//! layers in reverse and yields gradients for every parameter block and for
//! the network input.

use super::array::{gemm_a_bt, gemm_at_b, NumArray};
use super::net::{log_softmax_rows, FeedForwardNet, OutputHead};
use crate::error::{Error, Result};

/// Recorded forward pass of one network on one batch.
#[derive(Debug, Clone)]
pub struct GradientTape {
    rows: usize,
    single: bool,
    /// `inputs[i]` is the `[rows, d_i]` matrix fed into layer `i`.
    inputs: Vec<Vec<f64>>,
    /// Final network output (after the head).
    output: Vec<f64>,
}

/// Gradients for every weight and bias block, in the network's layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<NumArray>,
    pub biases: Vec<NumArray>,
}

impl ParamGrads {
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        let dims = net.layer_dims();
        Self {
            weights: dims
                .windows(2)
                .map(|w| NumArray::zeros(vec![w[0], w[1]]))
                .collect(),
            biases: dims.windows(2).map(|w| NumArray::zeros(vec![w[1]])).collect(),
        }
    }

    /// Blocks in the same order as [`FeedForwardNet::params`].
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.data()])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.data_mut(), b.data_mut()])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().flatten().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().flatten().all(|&x| x == 0.0)
    }
}

/// Result of differentiating a scalar reduction of a network's output.
#[derive(Debug, Clone)]
pub struct ScalarGradient {
    pub value: f64,
    pub params: ParamGrads,
    pub input: NumArray,
}

/// A differentiable reduction of network output to a scalar.
pub trait ScalarFn {
    /// Value of the reduction and its gradient with respect to `output`.
    fn evaluate(&self, output: &NumArray) -> Result<(f64, NumArray)>;
}

/// `0.5 * ||output||^2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl ScalarFn for HalfSquaredNorm {
    fn evaluate(&self, output: &NumArray) -> Result<(f64, NumArray)> {
        Ok((0.5 * output.squared_norm(), output.clone()))
    }
}

/// Ignores the output entirely.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl ScalarFn for Constant {
    fn evaluate(&self, output: &NumArray) -> Result<(f64, NumArray)> {
        Ok((self.0, NumArray::zeros(output.shape().to_vec())))
    }
}

/// `sum_i output[i, columns[i]]`: summed log-probabilities of chosen classes
/// when the net has a log-softmax head.
#[derive(Debug, Clone)]
pub struct PickedSum<'a>(pub &'a [usize]);

impl ScalarFn for PickedSum<'_> {
    fn evaluate(&self, output: &NumArray) -> Result<(f64, NumArray)> {
        if self.0.len() != output.rows() {
            return Err(Error::Dimension(format!(
                "{} selections for {} output rows",
                self.0.len(),
                output.rows()
            )));
        }
        let cols = output.cols();
        let mut grad = NumArray::zeros(output.shape().to_vec());
        let mut value = 0.0;
        for (i, &c) in self.0.iter().enumerate() {
            if c >= cols {
                return Err(Error::Class {
                    class: c,
                    classes: cols,
                });
            }
            value += output.row(i)[c];
            grad.row_mut(i)[c] = 1.0;
        }
        Ok((value, grad))
    }
}

/// Any closure from output to (value, gradient).
impl<F> ScalarFn for F
where
    F: Fn(&NumArray) -> Result<(f64, NumArray)>,
{
    fn evaluate(&self, output: &NumArray) -> Result<(f64, NumArray)> {
        self(output)
    }
}

impl GradientTape {
    pub(crate) fn record(net: &FeedForwardNet, input: &NumArray) -> Result<(NumArray, Self)> {
        let (rows, single) = net.batch_input(input)?;
        let n_layers = net.layers().len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut current = input.data().to_vec();
        for i in 0..n_layers {
            let mut next = net.affine(i, rows, &current);
            if i + 1 < n_layers {
                let act = net.activation();
                next.iter_mut().for_each(|x| *x = act.apply(*x));
            } else if net.head() == OutputHead::LogSoftmax {
                log_softmax_rows(&mut next, net.output_dim());
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericOverflow { layer: i });
            }
            inputs.push(std::mem::replace(&mut current, next));
        }
        let output = net.shape_output(rows, single, current.clone());
        Ok((
            output,
            Self {
                rows,
                single,
                inputs,
                output: current,
            },
        ))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Back-propagate `d_output` (same shape as the recorded output).
    pub fn backward(&self, net: &FeedForwardNet, d_output: &NumArray) -> Result<GradientsOut> {
        let dims = net.layer_dims();
        let n_layers = net.layers().len();
        if self.inputs.len() != n_layers || d_output.len() != self.output.len() {
            return Err(Error::Dimension(
                "gradient does not match the recorded forward pass".into(),
            ));
        }
        let rows = self.rows;
        let mut grads = ParamGrads::zeros_like(net);

        // Gradient w.r.t. the final affine output.
        let mut delta = d_output.data().to_vec();
        if net.head() == OutputHead::LogSoftmax {
            let c = net.output_dim();
            for (d_row, y_row) in delta.chunks_mut(c).zip(self.output.chunks(c)) {
                let total: f64 = d_row.iter().sum();
                for (d, &y) in d_row.iter_mut().zip(y_row) {
                    *d -= y.exp() * total;
                }
            }
        }

        for i in (0..n_layers).rev() {
            let (din, dout) = (dims[i], dims[i + 1]);
            let x = &self.inputs[i];
            gemm_at_b(rows, din, dout, x, &delta, 0.0, grads.weights[i].data_mut());
            let bias = grads.biases[i].data_mut();
            for row in delta.chunks(dout) {
                bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            let mut d_in = vec![0.0; rows * din];
            gemm_a_bt(
                rows,
                dout,
                din,
                &delta,
                net.layers()[i].weights().data(),
                &mut d_in,
            );
            if i > 0 {
                let act = net.activation();
                d_in.iter_mut()
                    .zip(x)
                    .for_each(|(d, &y)| *d *= act.derivative_from_output(y));
            }
            if d_in.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { layer: i });
            }
            delta = d_in;
        }

        let input_shape = if self.single {
            vec![dims[0]]
        } else {
            vec![rows, dims[0]]
        };
        Ok(GradientsOut {
            params: grads,
            input: NumArray::new(input_shape, delta)?,
        })
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct GradientsOut {
    pub params: ParamGrads,
    pub input: NumArray,
}

/// Gradient of `scalar_fn(net(input))` with respect to all parameters and the input.
pub fn scalar_gradient(
    net: &FeedForwardNet,
    input: &NumArray,
    scalar_fn: &dyn ScalarFn,
) -> Result<ScalarGradient> {
    let (output, tape) = net.forward_recorded(input)?;
    let (value, d_output) = scalar_fn.evaluate(&output)?;
    if !value.is_finite() {
        return Err(Error::NumericOverflow {
            layer: net.layers().len(),
        });
    }
    let g = tape.backward(net, &d_output)?;
    Ok(ScalarGradient {
        value,
        params: g.params,
        input: g.input,
    })
}
