//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every op executed on its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record once in reverse and
//! returns [`Gradients`] for every node that depends on a `requires_grad`
//! leaf. Tapes are single-use and confined to one thread.

mod attention;
mod gradcheck;
mod tape;

pub use attention::{attention_weights, AttnBlock, AttnLayout, AttnNorm, AttnSpec};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_params, relative_error, GradCheckOptions, GradCheckReport, Stencil};
pub use tape::{Gradients, Tape, Var};
