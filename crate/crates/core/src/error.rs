use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),

    #[error("svd did not converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("invalid adapter configuration: {0}")]
    InvalidConfig(String),

    #[error("adapter state does not match method {method}: {reason}")]
    StateMismatch { method: &'static str, reason: String },

    #[error("degenerate DoRA column {column}: norm {norm:e} below 1e-12")]
    DegenerateColumn { column: usize, norm: f64 },

    #[error("zero update: metric undefined for a matrix with Frobenius norm {norm:e}")]
    ZeroUpdate { norm: f64 },

    #[error("input is not skew-symmetric (defect {defect:e})")]
    NotSkew { defect: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("equality pre-check failed for {bench}: relative deviation {deviation:e}")]
    PrecheckFailed { bench: &'static str, deviation: f64 },

    #[error("{path}: bad magic {found:?}, expected \"MTX1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: file size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: non-finite payload entry at index {index}")]
    NonFinitePayload { path: PathBuf, index: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("layer {layer}: before is {before:?} but after is {after:?}")]
    LayerShapeMismatch {
        layer: String,
        before: (usize, usize),
        after: (usize, usize),
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
