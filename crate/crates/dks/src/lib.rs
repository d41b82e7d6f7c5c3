//! Deep Kernel Shaping (DKS) analysis toolkit.
//!
//! This crate computes the Q/C maps that describe signal propagation through
//! wide networks at initialization, solves for the activation-function
//! transform constants that enforce the DKS map conditions, constructs and
//! inverts maximal slope functions from an architecture description, produces
//! DKS-compliant weight initializations and input preprocessing, and verifies
//! the theory empirically on small fully-connected networks.
//!
//! Modules mirror the pipeline:
//! - [`quadrature`]: Gaussian expectations via fixed-order Gauss-Legendre rules.
//! - [`activations`]: the activation registry and the (α, β, γ, δ) transform.
//! - [`localmaps`]: local Q/C maps, their derivatives and diagnostics.
//! - [`graph`]: network graphs, extended map propagation, slope polynomials.
//! - [`solver`]: root solving for the transform constants.
//! - [`init`]: Gaussian/Orthogonal Delta initializers and the SUO sampler.
//! - [`pln`]: per-location normalization of input feature maps.
//! - [`netverify`]: desk-scale empirical verification and analytic NTK.
//! - [`tensorio`]: the binary tensor container used by the CLI.

pub mod activations;
pub mod error;
pub mod graph;
pub mod init;
pub mod localmaps;
pub mod netverify;
pub mod pln;
pub mod quadrature;
pub mod solver;
pub mod tensorio;

pub use error::{Error, Result};
