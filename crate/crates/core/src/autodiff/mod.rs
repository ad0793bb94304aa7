//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
pub mod gradcheck;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{Graph, Var};
