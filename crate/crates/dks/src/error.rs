//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument was outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An integrand evaluated to a non-finite value at a quadrature node.
    #[error("integrand is not finite at quadrature node {index} (x = {abscissa}): got {value}")]
    NonFiniteIntegrand {
        /// Index of the offending node in the rule.
        index: usize,
        /// Abscissa of the offending node.
        abscissa: f64,
        /// The non-finite value produced there.
        value: f64,
    },

    /// Lookup of an activation name that is not in the registry.
    #[error("unknown activation '{name}'; registered activations: {known}")]
    UnknownActivation {
        /// The name that failed to resolve.
        name: String,
        /// Comma-separated list of registered names.
        known: String,
    },

    /// A transformed activation degenerated to a constant (zero variance),
    /// so the output scale γ cannot be determined.
    #[error("degenerate activation: Var[phi(alpha x + beta)] = {variance:.3e} is not positive (alpha = {alpha}, beta = {beta})")]
    DegenerateActivation {
        /// Input scale at which the degeneracy occurred.
        alpha: f64,
        /// Input shift at which the degeneracy occurred.
        beta: f64,
        /// The measured variance.
        variance: f64,
    },

    /// Matrix/vector shape mismatch.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A network graph failed validation.
    #[error("invalid network graph:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidGraph(Vec<crate::graph::Violation>),

    /// The graph is not series-parallel, so subnetworks cannot be enumerated.
    #[error("graph is not series-parallel: {0}")]
    NotSeriesParallel(String),

    /// A maximal slope function with no nonlinearity cannot be inverted.
    #[error("maximal slope function contains no nonlinear layer and is not invertible")]
    NonInvertibleSlope,

    /// The transform solver failed to converge.
    #[error("transform solver did not converge after {restarts} restarts; best residual 2-norm {best_residual:.3e} at (alpha, beta) = ({best_alpha}, {best_beta})")]
    SolveFailed {
        /// Number of restarts attempted.
        restarts: usize,
        /// Best residual 2-norm seen.
        best_residual: f64,
        /// α of the best candidate.
        best_alpha: f64,
        /// β of the best candidate.
        best_beta: f64,
        /// Human-readable guess history.
        history: String,
    },

    /// Input/output failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A malformed tensor container file.
    #[error("malformed tensor container: {0}")]
    BadContainer(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
