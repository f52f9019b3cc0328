use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cone is not proper: {0}")]
    PropernessViolation(String),
    #[error("invalid cone description: {0}")]
    InvalidCone(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point lies outside the cone (facet slack {slack:e})")]
    OutsideCone { slack: f64 },
    #[error("facet enumeration is only supported for d <= 3 (got d = {0}); supply facet normals")]
    FacetEnumerationUnsupported(usize),
    #[error("jump atom {atom} has component {component} = {value} <= -1")]
    SupportViolation { atom: usize, component: usize, value: f64 },
    #[error("jump atom {atom} has negative intensity {lam}")]
    NegativeIntensity { atom: usize, lam: f64 },
    #[error("jump measure is not integrable: {0}")]
    NonIntegrable(String),
    #[error("price factor 1 + dY = {factor} is not positive at step {step}")]
    NonpositivePrice { step: usize, factor: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("policy violates cone constraints: {0}")]
    PolicyViolation(String),
    #[error("field is not flagged as having sublinear growth")]
    GrowthViolation,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("p is not in the interior of the dual cone (min slack {slack:e})")]
    DualMembership { slack: f64 },
    #[error("no supersolution scale found: {0}")]
    NoScaleFound(String),
    #[error("solver requires d = 2, got d = {0}")]
    UnsupportedDimension(usize),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("monotonicity breach at node {node}: W drops by {drop:e} along generator {generator}")]
    MonotonicityBreach { node: usize, generator: usize, drop: f64 },
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
