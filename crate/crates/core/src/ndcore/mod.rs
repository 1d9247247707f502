//! Dense `f64` arrays with a recorded forward pass and exact reverse-mode
//! gradients.
//!
//! Values are created on a [`Tape`] either as differentiable parameters or as
//! constants. Each operation on a [`Var`] appends a node to the tape; calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse order.

mod conv;
mod cooc;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use conv::Conv2dOpts;
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use ops::{LEAKY_SLOPE, LOG_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
