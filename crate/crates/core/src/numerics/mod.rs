//! Deterministic `f64` tensor core with a reverse-mode tape and Adam.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! context its backward rule needs. [`Tape::backward`] walks the record in
//! reverse exactly once and returns [`Gradients`] keyed by leaf and by
//! [`Param`]. Parameters carry a version counter, so a gradient looked up
//! for a parameter that was modified after the forward pass is rejected
//! instead of silently applied.

mod adam;
pub mod gradcheck;
mod kernels;
pub mod layers;
mod ops;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check_inputs, grad_check_module, relative_error};
pub use ops::{argmax, RunningStats};
pub(crate) use ops::{argmax_except, log_softmax_row};
pub use param::{Module, Param, ParamId};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
