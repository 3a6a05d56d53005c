//! Closed-form curvature analysis for a three-layer smooth network trained
//! with binary cross-entropy.
//!
//! The crate computes the analytic gradient and block Hessian of the loss,
//! closed forms for `tr(H)` and `tr(H²)` that never materialise the Hessian,
//! the resulting upper bound `λ_sup = μ + √(D−1)·σ` on the largest Hessian
//! eigenvalue, and a gradient-descent harness that collects critical points
//! and the statistics built on them.

pub mod activations;
pub mod bound;
pub mod error;
pub mod experiment;
pub mod hessian;
pub mod loss_grad;
pub mod network;
pub mod oracle;
pub mod stats;
pub mod traces;

pub use activations::{ActivationKind, ActivationProfile};
pub use error::{Error, Result};
pub use network::{BatchTrace, Dataset, ForwardTrace, NetworkParams, NetworkShape};
