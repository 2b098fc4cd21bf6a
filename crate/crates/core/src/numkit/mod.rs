//! Dense matrices, reverse-mode differentiation and kernel utilities.

mod gradcheck;
mod kernel;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheck, REL_ERROR_FLOOR};
pub use kernel::{
    gaussian_cross_kernel, gaussian_kernel_matrix, median_bandwidth, sq_dists, sq_dists_cross,
};
pub use matrix::{argmax, cross_entropy, Matrix};
pub use tape::{Gradients, ParamId, Tape, Var};
