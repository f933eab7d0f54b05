//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by fitting, selection, divergence estimation and the
/// theory toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A covariate fell outside `[0,1]^d` beyond the 1e-12 tolerance.
    #[error("covariate coordinate {index} = {value} lies outside [0,1]")]
    Domain { index: usize, value: f64 },

    /// A covariance matrix was not symmetric positive definite.
    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    /// A mixture component lost its effective sample mass (or its weighted
    /// normal equations stayed singular after ridge rescue).
    #[error("component {component} degenerated at EM iteration {iteration}")]
    DegenerateComponent { component: usize, iteration: usize },

    /// Operation only implemented for the stated dimensions.
    #[error("unsupported dimension for {what}: d = {d}, p = {p}")]
    UnsupportedDimension { what: &'static str, d: usize, p: usize },

    /// Not enough observations to run the requested construction.
    #[error("too few points: need {needed}, have {have}")]
    TooFewPoints { needed: usize, have: usize },

    /// Ten consecutive initialization trials degenerated.
    #[error("initialization failed: {0} consecutive degenerate trials")]
    InitFailure(usize),

    /// The slope-heuristic dimension path is constant; no jump to locate.
    #[error("slope heuristic found no dimension jump")]
    NoJump,

    /// Invalid eigenvalue/volume box in a model specification.
    #[error("invalid box bounds: {0}")]
    InvalidBox(String),

    /// A closeness condition of the Gaussian bracket proposition failed.
    #[error("bracket precondition violated: {0}")]
    PreconditionViolated(String),

    /// The constructed bracket failed to contain the target density.
    #[error("bracket containment violated at x = {x:?}, y = {y:?} ({side} bound)")]
    BracketViolated { x: Vec<f64>, y: Vec<f64>, side: &'static str },

    /// Inconsistent parameters or malformed model description.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Every candidate model failed to fit.
    #[error("all candidate models failed to fit")]
    AllModelsFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Malformed CSV or numeric field.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
