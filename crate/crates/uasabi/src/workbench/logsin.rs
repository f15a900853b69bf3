//! The synthetic log-sine model used by the end-to-end study:
//! y = omega * ln(x) + sin(0.05 x) + 0.01 x + 1.

use super::WorkbenchError;
use crate::inference::Simulator;
use std::sync::Arc;

/// Surrogate design box for x.
pub const LOGSIN_X_BOUNDS: (f64, f64) = (1.0, 200.0);
/// Surrogate design box for omega.
pub const LOGSIN_OMEGA_BOUNDS: (f64, f64) = (0.6, 1.4);

pub fn logsin_eval(x: f64, omega: f64) -> Result<f64, WorkbenchError> {
    if x <= 0.0 {
        return Err(WorkbenchError::Domain(format!(
            "log-sine model requires x > 0, got {x}"
        )));
    }
    Ok(omega * x.ln() + (0.05 * x).sin() + 0.01 * x + 1.0)
}

/// The model as a (noise-free) simulator handle for training-data
/// generation.
pub fn logsin_simulator() -> Simulator {
    Arc::new(|x, omega, _rng| {
        logsin_eval(x[0], omega[0]).expect("x prior support is positive")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        // ln(1) = 0 kills the omega term.
        let v = logsin_eval(1.0, 0.9).unwrap();
        assert!((v - (0.05f64.sin() + 1.01)).abs() < 1e-15);
        assert!((v - 1.0599792).abs() < 1e-7);

        // High-precision references: ln(100) + sin(5) + 1 + 1 and
        // 0.6 ln(200) + sin(10) + 2 + 1.
        let v = logsin_eval(100.0, 1.0).unwrap();
        let expect = 100f64.ln() + 5f64.sin() + 2.0;
        assert_eq!(v, expect);
        assert!((v - 5.646245911324953).abs() < 1e-12);

        let v = logsin_eval(200.0, 0.6).unwrap();
        assert!((v - 5.634969309039452).abs() < 1e-12);
        assert!((v - 5.6349693).abs() < 1e-7);
    }

    #[test]
    fn domain_error() {
        assert!(matches!(
            logsin_eval(0.0, 1.0),
            Err(WorkbenchError::Domain(_))
        ));
        assert!(matches!(
            logsin_eval(-3.0, 1.0),
            Err(WorkbenchError::Domain(_))
        ));
    }

    #[test]
    fn simulator_matches_eval() {
        let sim = logsin_simulator();
        let mut rng = crate::numerics::RngStream::new(1, 0);
        let y = sim(&[42.0], &[1.1], &mut rng);
        assert_eq!(y, logsin_eval(42.0, 1.1).unwrap());
    }
}
