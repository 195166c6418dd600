//! Dense tensors, value kernels, a gradient tape and the finite-difference
//! oracle that checks it.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_coords, finite_diff_grad, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
