//! Reverse-mode automatic differentiation on a flat tape of `f64` tensors.
//!
//! The tape records one node per operation; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients for every leaf created
//! with [`Tape::leaf`]. Values are `ndarray::ArrayD<f64>` throughout: f64
//! keeps central-difference gradient checks meaningful at tight tolerances.
//!
//! Shape errors are programming errors and panic; there is no fallible API.

mod conv;
mod gradcheck;
mod linalg;
mod ops;
mod optim;
mod tape;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};
pub use gradcheck::{check_gradients, finite_diff_grad, GradCheckReport, GroupReport};
pub use linalg::matmul as par_matmul;
pub use optim::{Adam, ParamId, ParamStore};
pub use tape::{Grads, Tape, Value, Var};

/// Glorot-uniform initialization for a dense or convolution weight.
///
/// `fan_in`/`fan_out` include the receptive field for convolutions.
pub fn glorot_uniform<R: rand::Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Value {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Value::from_shape_vec(ndarray::IxDyn(shape), data).expect("glorot_uniform: shape/data mismatch")
}

/// All-zeros tensor of the given shape.
pub fn zeros(shape: &[usize]) -> Value {
    Value::zeros(ndarray::IxDyn(shape))
}
