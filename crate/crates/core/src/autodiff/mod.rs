//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, REL_FLOOR};
pub use graph::{AttentionProbs, Graph, Var};
