//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in evaluation order; [`Tape::backward`]
//! walks it once in reverse. Parameters live outside the tape in a
//! [`ParamStore`] and are bound per forward pass, so a tape is cheap and
//! single-use.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, CoordinateCheck, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, sigmoid_ce_elem, Axis, Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
