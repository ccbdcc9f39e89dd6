//! Dense matrices, row-wise primitives, Adam, and gradient checking.

mod adam;
mod gradcheck;
mod matrix;
pub(crate) mod ops;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient, DEFAULT_STEP};
pub use matrix::{dot, squared_distance, Matrix};
pub use ops::{argmax, cross_entropy, softmax_rows};
