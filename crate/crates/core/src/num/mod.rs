//! Numeric core: scalar abstraction, dense matrices, differentiable
//! primitives with hand-derived gradients, a deterministic PRNG, and a
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod ops;
mod rng;
mod scalar;

pub use gradcheck::{grad_check, grad_check_flat, CoordError, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{
    affine_backward, affine_forward, cosine_sim, relu_backward, relu_forward, sgd_step,
    softmax_cross_entropy, softmax_rows, COSINE_NORM_EPS,
};
pub use rng::Rng;
pub use scalar::Scalar;
