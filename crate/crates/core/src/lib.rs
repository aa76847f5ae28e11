//! Weight-conditioning adapters as explicit matrix algebra.
//!
//! The crate implements LoRA, DoRA, Pre-Diag, SORA and the Pre-/Post-Ortho
//! ablations on plain dense matrices, together with the spectral metrics
//! (stable rank, singular value entropy) used to compare the updates they
//! produce, a teacher–student training harness with analytic gradients,
//! numerical verifiers for the entropy-ordering and Taylor-truncation
//! results, timing harnesses, and a small binary matrix format.

pub mod adapters;
pub mod bench;
pub mod error;
pub mod io;
pub mod linalg;
pub mod spectral;
pub mod theorems;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
