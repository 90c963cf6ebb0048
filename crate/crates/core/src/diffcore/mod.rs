//! Dense `f64` matrices with reverse-mode gradient accumulation.
//!
//! Every model computation is expressed as operations on a [`Tape`]; the
//! learnable tensors live in a [`ParamStore`] and receive their gradients when
//! [`Tape::backward`] runs. A fresh tape is recorded for every forward pass.

mod matrix;
mod param;
mod tape;

pub use matrix::Matrix;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{gelu, logistic, normal_cdf, normal_pdf, Tape, Var};
