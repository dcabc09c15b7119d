//! Tensor arithmetic, tape-based reverse-mode differentiation, Adam and a
//! cosine learning-rate schedule.
//!
//! Everything is `f64`. Forward-only evaluation of a frozen [`ParamStore`]
//! can run on many threads at once; a tape and its optimizer belong to one
//! training run.

mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, FdReport, FD_STEP};
pub use optim::{Adam, CosineSchedule};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{log_sum_exp, softmax_rows, BatchStats, DropoutKey, Gradients, Tape, Var};
pub use tensor::{argmax, matmul, Tensor};
