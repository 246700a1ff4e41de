//! Reverse-mode differentiation and its finite-difference oracle.

mod gradcheck;
mod graph;
mod loss;

pub use gradcheck::{grad_check, relative_error, FdMode, GradCheckOptions, GradReport, ParamCheck, REL_ERR_EPS};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use loss::{softmax, softmax_cross_entropy};
