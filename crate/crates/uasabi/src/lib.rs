//! Uncertainty-aware surrogate-based amortized Bayesian inference.
//!
//! The pipeline: fit a Bayesian polynomial-chaos surrogate to sparse
//! simulator data, propagate the surrogate's joint posterior over
//! coefficients and error scale into training data for a neural posterior
//! estimator, and validate the resulting amortized posteriors against
//! MCMC baselines with simulation-based calibration and runtime
//! break-even benchmarks.

pub mod calibration;
pub mod inference;
pub mod mcmc;
pub mod neural;
pub mod numerics;
pub mod polychaos;
pub mod surrogate;
pub mod workbench;
