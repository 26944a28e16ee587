//! Dense arrays, forward kernels, a reverse-mode tape and finite-difference
//! verification.

mod array;
pub mod gradcheck;
pub mod ops;
mod tape;

pub use array::{Array, Scalar};
pub use gradcheck::{central_differences, finite_diff_check, relative_error, ParamMap};
pub use ops::{bicubic_resize, layer_norm, matmul, softmax_rows};
pub use tape::{collect_named, Gradient, Grads, Tape, Var};
