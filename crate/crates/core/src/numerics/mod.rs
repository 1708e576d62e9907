//! Dense tensors and tape-based reverse-mode differentiation in `f64`.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheck, GradCheckReport, WorstCoordinate};
pub use kernels::softmax;
pub use tape::{masked_softmax, BackwardFault, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{BoolMatrix, Tensor};
