//! Dense arrays, feed-forward networks and their gradients.

mod array;
mod net;
mod optim;
mod tape;

pub use array::NumArray;
pub use net::{Activation, Dense, FeedForwardNet, OutputHead};
pub use optim::{chunked_gradient, Sgd, StepDecay};
pub use tape::{
    scalar_gradient, Constant, GradientTape, GradientsOut, HalfSquaredNorm, ParamGrads, PickedSum,
    ScalarFn, ScalarGradient,
};
