use thiserror::Error;

use crate::kernels::KernelId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Kernel evaluated at or beyond its radius of convergence.
    #[error("{kernel} kernel is undefined at t = {t} (requires |t| < {radius})")]
    Domain {
        kernel: KernelId,
        t: f64,
        radius: f64,
    },

    /// A coefficient formula that has no value under the requested convention.
    #[error("coefficient a_{degree} of the {kernel} kernel is undefined under the {convention} convention")]
    Convention {
        kernel: KernelId,
        degree: usize,
        convention: &'static str,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("input contains a non-finite entry ({what})")]
    NonFinite { what: &'static str },

    #[error("row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("row {row} has a zero attention denominator")]
    ZeroDenominator { row: usize },

    #[error("explicit masks are not supported by the linear-time path")]
    UnsupportedMask,

    /// Stage-two normalization would divide by a zero Frobenius norm.
    #[error("{which} is constant along the sequence axis; normalized matrix has zero norm")]
    DegenerateInput { which: &'static str },

    #[error("zero entry raised to non-positive power {beta}")]
    ZeroPower { beta: f64 },

    #[error("reference matrix has zero norm")]
    ZeroReference,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
