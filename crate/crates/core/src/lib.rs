//! Spatially correlated Gaussian terrain fields and their use in probabilistic
//! trajectory forecasting.
//!
//! Each terrain parameter map (geometric height, support height, stiffness,
//! damping, friction) is modeled as a Gaussian field with mean `mu` and
//! covariance `Sigma = L D L^T`, where `D = diag(sigma^2)` holds per-cell
//! variances and `L` is the (never materialized) matrix of a fixed Gaussian
//! convolution. The crate provides:
//!
//! * [`grid`]: grids, kernels, zero-padded convolution and its adjoint;
//! * [`covfield`]: the implicit `Sigma` matvec and reparameterized sampling;
//! * [`solver`]: matrix-free conjugate gradient;
//! * [`nll`]: the structured negative log-likelihood, its gradients, the
//!   out-of-view variance regularizer and a maximum-likelihood field fitter;
//! * [`physics`]: a mass-point rigid body on heightmap terrain;
//! * [`forecast`] and [`metrics`]: Monte Carlo trajectory forecasts and their scores;
//! * [`synth`]: seeded scenario generation;
//! * [`oracle`] and [`experiment`]: the dense-oracle check suite and the
//!   method comparison harness driven by the CLI.

pub mod covfield;
pub mod experiment;
pub mod forecast;
pub mod grid;
pub mod metrics;
pub mod nll;
pub mod oracle;
pub mod param;
pub mod physics;
pub mod solver;
pub mod synth;

pub use covfield::GaussianField;
pub use grid::{Kernel, ScalarGrid};
pub use param::TerrainParam;
