//! Layer-sensitivity engine.
//!
//! Everything in this crate is pure computation over `alloc` collections: a
//! small reverse-mode differentiation engine, the four benchmark architecture
//! families trained on the two-moons task, controlled per-layer perturbations
//! that produce ground-truth layer rankings, ten fine-grained relevance
//! criteria with their reductions to one score per layer, and the budgeting
//! applications (pruning, mixed precision, selective fault checking).
//!
//! File formats, the command-line tool and parallel orchestration live in the
//! `layersense` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod apps;
pub mod autograd;
pub mod criteria;
mod error;
pub mod modelzoo;
pub mod perturb;
pub mod reduce;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
