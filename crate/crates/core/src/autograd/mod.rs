//! Reverse-mode differentiation over a fixed program of tensor operations.
//!
//! A [`Graph`] owns named parameters and an ordered list of operations whose
//! inputs always precede them. [`Graph::forward`] evaluates the program on a
//! batch and caches every intermediate value; [`Graph::backward`] seeds the
//! output with an [`OutputSelector`] and propagates gradients to every node
//! and parameter. Intermediates stay cached so callers can re-run a suffix of
//! the program after editing one parameter or activation
//! ([`Graph::rerun_from`]), which is how perturbation sweeps avoid paying for
//! the unchanged prefix.

mod adam;
mod graph;
mod kernels;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, NodeId, Op, OutputSelector, ParamId, Reduction, Target};
pub(crate) use graph::argmax;
pub use loss::{cross_entropy, mse};
