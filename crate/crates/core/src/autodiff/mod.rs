//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! A [`Graph`] records every op applied during a forward pass; [`Graph::backward`]
//! replays the record in reverse. The graph is single-threaded by construction
//! and is dropped after each step.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GRAD_CHECK_EPS};
pub use graph::{Gradients, Graph, Var};
