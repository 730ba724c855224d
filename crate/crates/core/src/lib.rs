//! Geometric harmonics, Gaussian processes and diffusion maps on point clouds,
//! with a reduced-dimension Bayesian optimization loop built on top.
//!
//! All kernels are squared exponentials `exp(-d²/2ε)`.  Dense linear algebra
//! is provided by `nalgebra`; the batched loops in kernel assembly, prediction
//! and acquisition run on rayon when the `parallel` feature is enabled.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dmaps;
pub mod error;
pub mod exec;
pub mod gh;
pub mod gp;
pub mod kernels;
pub mod reduced_bo;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
