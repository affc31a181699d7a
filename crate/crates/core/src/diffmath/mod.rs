//! Differentiable matrix computation, constrained parameters, Adam and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod param;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheck, Stencil};
pub use param::{Bound, Constraint, Param, ParamId, ParamSet};
pub use tape::{hstack, vstack, Gradients, Mat, Tape, Var};
