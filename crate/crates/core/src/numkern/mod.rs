//! Dense numeric kernels shared by every network and by attention: a small
//! row-major matrix type, activations and normalization, a reproducible PRNG,
//! and reverse-mode gradients with a finite-difference checker.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod rng;
pub mod tape;

pub use gradcheck::{directional_check, grad_check, grad_check_coords, value_and_gradient, ScalarFn};
pub use matrix::{dot, norm, Matrix};
pub use ops::{cosine, gelu, layer_norm, layer_norm_rows, normalized, sigmoid, softmax_rows, LN_EPS};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
