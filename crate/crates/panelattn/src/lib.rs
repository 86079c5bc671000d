//! Panel-relative orthogonal attention operators and a controlled benchmark
//! for measuring what they buy.
//!
//! The crate has three layers:
//!
//! * numerical core — low-rank skew generators, the matrix exponential and
//!   its adjoint ([`ortho`]), positional encoding regimes ([`posenc`]), and
//!   the panel operator banks applied to attention queries/keys ([`opro`]);
//! * a small vision transformer with hand-written backward passes and
//!   pluggable adapters ([`nnet`]);
//! * a deterministic two-stage benchmark generator ([`benchgen`]) and the
//!   training/evaluation harness with cost accounting ([`harness`]).
//!
//! Batch-level work (training, evaluation, dataset generation) is
//! data-parallel via rayon when the `parallel` feature is enabled (default);
//! the same code paths run sequentially without it, and [`exec::Exec`]
//! selects the mode at runtime.

pub mod benchgen;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod nnet;
pub mod opro;
pub mod ortho;
pub mod posenc;

/// Crate-wide error type. Variants mirror the failure classes surfaced by
/// the CLI (shape, parameter, numeric, configuration, index, invariant,
/// file/format).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
