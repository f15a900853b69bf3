//! Deterministic RNG streams, probability distributions, and Sobol
//! low-discrepancy sequences.

mod dist;
mod rng;
mod sobol;
mod special;

pub use dist::DistributionSpec;
pub use rng::RngStream;
pub use sobol::{scale_to_box, sobol_points, SOBOL_MAX_DIM};
pub use special::{normal_quantile, standard_normal_cdf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported Sobol dimension {dim}, table covers 1..={max}")]
    UnsupportedDimension { dim: usize, max: usize },
    #[error("dimension mismatch: points have dim {point_dim}, bounds have dim {bounds_dim}")]
    DimensionMismatch { point_dim: usize, bounds_dim: usize },
    #[error("degenerate bounds: hi must exceed lo, got [{lo}, {hi}]")]
    DegenerateBounds { lo: f64, hi: f64 },
}
