//! Dense kernels, parameters, Adam, and gradient checking.

mod gradcheck;
mod init;
mod matrix;
pub mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use init::{seeded_rng, uniform_with_rng, xavier_bound, xavier_init, xavier_with_rng, SeededRng};
pub use matrix::{dot, l2_norm, Matrix};
pub(crate) use matrix::{outer_acc, vec_mat, vec_mat_acc, vec_matt_acc};
pub use ops::{layer_norm, silu, softmax_rows, Mask, LAYER_NORM_EPS};
pub use params::{AdamConfig, Gradients, Param, ParamSet};
pub(crate) use params::hex_digest;
