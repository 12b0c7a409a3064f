//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] owns every intermediate value. Operations are methods on the
//! tape that take and return [`Var`] handles; [`Tape::backward`] sweeps the
//! recorded nodes in reverse and leaves `∂root/∂v` in [`Tape::grad`].
//! Evaluation is sequential, so identical tapes give bitwise-identical
//! gradients.

mod gradcheck;
mod tape;

pub use gradcheck::{analytic_grads, grad_check, grad_check_against, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{sigmoid, softplus, Tape, UnaryOp, Var};

#[cfg(test)]
mod tests;
