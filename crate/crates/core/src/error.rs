//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors surfaced by the numerical core.
///
/// Contract violations (unnormalized measures, dimension mismatches) are
/// kept distinct from numerical failures (non-convergence, NaN) so callers
/// can map them to different exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A kernel or activation evaluated to a non-finite value; `node` names
    /// the offending data node or weight.
    NonFinite { context: &'static str, node: f64 },
    /// A measure that must be normalized is not (trapezoid integral given).
    Unnormalized { context: &'static str, integral: f64 },
    /// The reference density underflows where the measure carries mass.
    SupportMismatch { node: f64 },
    /// An operation received an ensemble with no particles.
    EmptyEnsemble,
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A kernel is under-resolved on the grid; callers should switch to the
    /// analytic limit instead (e.g. the t→1 drift).
    ResolutionGuard {
        context: &'static str,
        need: f64,
        have: f64,
    },
    /// Fixed-point iteration did not reach tolerance; carries the
    /// continuation trace of (beta, residual) pairs for diagnosis.
    NonConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<(f64, f64)>,
    },
    InvalidArgument { context: &'static str },
    /// Catch-all for numerical failures with a formatted description.
    Numerical { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite { context, node } => {
                write!(f, "non-finite value in {context} at node {node}")
            }
            Error::Unnormalized { context, integral } => {
                write!(f, "{context}: measure not normalized (integral = {integral})")
            }
            Error::SupportMismatch { node } => {
                write!(f, "reference density underflows at node {node} where mass is present")
            }
            Error::EmptyEnsemble => write!(f, "empty particle ensemble"),
            Error::DimensionMismatch { context, expected, got } => {
                write!(f, "{context}: dimension mismatch (expected {expected}, got {got})")
            }
            Error::ResolutionGuard { context, need, have } => {
                write!(f, "{context}: under-resolved (need >= {need}, have {have}); use the analytic limit")
            }
            Error::NonConvergence { iterations, residual, .. } => {
                write!(f, "fixed point not converged after {iterations} iterations (residual {residual:e})")
            }
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::Numerical { context } => write!(f, "numerical failure: {context}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
