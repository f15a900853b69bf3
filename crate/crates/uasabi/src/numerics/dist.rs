use super::{NumericsError, RngStream};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.8378770664093453;

/// A parametric univariate distribution used for priors and error models.
///
/// `ScaledBeta(α, β, loc, scale)` is `loc + scale · Beta(α, β)`, covering
/// priors of the form `k · (1 + Beta(·,·))` without a bespoke type each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Normal { mean: f64, sd: f64 },
    HalfNormal { scale: f64 },
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
    ScaledBeta { alpha: f64, beta: f64, loc: f64, scale: f64 },
}

impl DistributionSpec {
    pub fn normal(mean: f64, sd: f64) -> Result<Self, NumericsError> {
        let spec = Self::Normal { mean, sd };
        spec.validate()?;
        Ok(spec)
    }

    pub fn half_normal(scale: f64) -> Result<Self, NumericsError> {
        let spec = Self::HalfNormal { scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, NumericsError> {
        let spec = Self::Uniform { lo, hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn beta(alpha: f64, beta: f64) -> Result<Self, NumericsError> {
        let spec = Self::Beta { alpha, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn scaled_beta(alpha: f64, beta: f64, loc: f64, scale: f64) -> Result<Self, NumericsError> {
        let spec = Self::ScaledBeta { alpha, beta, loc, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |msg: String| Err(NumericsError::InvalidParameter(msg));
        match *self {
            Self::Normal { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || sd <= 0.0 {
                    return bad(format!("Normal(mean={mean}, sd={sd}) requires finite mean, sd > 0"));
                }
            }
            Self::HalfNormal { scale } => {
                if !scale.is_finite() || scale <= 0.0 {
                    return bad(format!("HalfNormal(scale={scale}) requires scale > 0"));
                }
            }
            Self::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                    return bad(format!("Uniform(lo={lo}, hi={hi}) requires hi > lo"));
                }
            }
            Self::Beta { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
                    return bad(format!("Beta(alpha={alpha}, beta={beta}) requires alpha, beta > 0"));
                }
            }
            Self::ScaledBeta { alpha, beta, loc, scale } => {
                if !(alpha > 0.0 && beta > 0.0 && scale > 0.0)
                    || ![alpha, beta, loc, scale].iter().all(|v| v.is_finite())
                {
                    return bad(format!(
                        "ScaledBeta(alpha={alpha}, beta={beta}, loc={loc}, scale={scale}) requires alpha, beta, scale > 0"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Support as a closed interval; unbounded ends are infinite.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::HalfNormal { .. } => (0.0, f64::INFINITY),
            Self::Uniform { lo, hi } => (lo, hi),
            Self::Beta { .. } => (0.0, 1.0),
            Self::ScaledBeta { loc, scale, .. } => (loc, loc + scale),
        }
    }

    /// Natural-log density; `-inf` outside the support.
    pub fn logpdf(&self, v: f64) -> f64 {
        match *self {
            Self::Normal { mean, sd } => {
                let z = (v - mean) / sd;
                -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
            }
            Self::HalfNormal { scale } => {
                if v < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let z = v / scale;
                    0.5 * (2.0 / std::f64::consts::PI).ln() - scale.ln() - 0.5 * z * z
                }
            }
            Self::Uniform { lo, hi } => {
                if v < lo || v > hi {
                    f64::NEG_INFINITY
                } else {
                    -(hi - lo).ln()
                }
            }
            Self::Beta { alpha, beta } => {
                if v <= 0.0 || v >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    (alpha - 1.0) * v.ln() + (beta - 1.0) * (1.0 - v).ln() - ln_beta(alpha, beta)
                }
            }
            Self::ScaledBeta { alpha, beta, loc, scale } => {
                let u = (v - loc) / scale;
                if u <= 0.0 || u >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    (alpha - 1.0) * u.ln() + (beta - 1.0) * (1.0 - u).ln()
                        - ln_beta(alpha, beta)
                        - scale.ln()
                }
            }
        }
    }

    /// Derivative of `logpdf` w.r.t. the value, for gradient-based samplers.
    /// Undefined outside the open support (returns 0 there; callers sample
    /// on an unconstrained scale and never evaluate at the boundary).
    pub fn dlogpdf(&self, v: f64) -> f64 {
        match *self {
            Self::Normal { mean, sd } => -(v - mean) / (sd * sd),
            Self::HalfNormal { scale } => {
                if v < 0.0 {
                    0.0
                } else {
                    -v / (scale * scale)
                }
            }
            Self::Uniform { .. } => 0.0,
            Self::Beta { alpha, beta } => {
                if v <= 0.0 || v >= 1.0 {
                    0.0
                } else {
                    (alpha - 1.0) / v - (beta - 1.0) / (1.0 - v)
                }
            }
            Self::ScaledBeta { alpha, beta, loc, scale } => {
                let u = (v - loc) / scale;
                if u <= 0.0 || u >= 1.0 {
                    0.0
                } else {
                    ((alpha - 1.0) / u - (beta - 1.0) / (1.0 - u)) / scale
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Self::Normal { mean, sd } => {
                let d = rand_distr::Normal::new(mean, sd).expect("validated");
                d.sample(rng)
            }
            Self::HalfNormal { scale } => {
                let d = rand_distr::Normal::new(0.0, scale).expect("validated");
                d.sample(rng).abs()
            }
            Self::Uniform { lo, hi } => rng.gen_range(lo..hi),
            Self::Beta { alpha, beta } => {
                let d = rand_distr::Beta::new(alpha, beta).expect("validated");
                d.sample(rng)
            }
            Self::ScaledBeta { alpha, beta, loc, scale } => {
                let d = rand_distr::Beta::new(alpha, beta).expect("validated");
                loc + scale * d.sample(rng)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Normal { mean, .. } => mean,
            Self::HalfNormal { scale } => scale * (2.0 / std::f64::consts::PI).sqrt(),
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
            Self::Beta { alpha, beta } => alpha / (alpha + beta),
            Self::ScaledBeta { alpha, beta, loc, scale } => loc + scale * alpha / (alpha + beta),
        }
    }

    /// Raw moment E[X^k] in closed form, or `None` where no closed form
    /// is wired up (callers fall back to Monte Carlo).
    pub fn raw_moment(&self, k: usize) -> Option<f64> {
        match *self {
            Self::Normal { mean, sd } => {
                // m_k = mean·m_{k-1} + (k-1)·sd²·m_{k-2}
                let mut m_prev = 1.0;
                let mut m = mean;
                if k == 0 {
                    return Some(1.0);
                }
                for j in 2..=k {
                    let next = mean * m + (j as f64 - 1.0) * sd * sd * m_prev;
                    m_prev = m;
                    m = next;
                }
                Some(m)
            }
            Self::Uniform { lo, hi } => {
                let p = k as f64 + 1.0;
                Some((hi.powf(p) - lo.powf(p)) / (p * (hi - lo)))
            }
            Self::Beta { alpha, beta } => {
                let mut m = 1.0;
                for i in 0..k {
                    m *= (alpha + i as f64) / (alpha + beta + i as f64);
                }
                Some(m)
            }
            Self::ScaledBeta { alpha, beta, loc, scale } => {
                // Binomial expansion over Beta raw moments.
                let base = Self::Beta { alpha, beta };
                let mut total = 0.0;
                let mut binom = 1.0;
                for j in 0..=k {
                    let mj = base.raw_moment(j).expect("beta moments are closed form");
                    total += binom * loc.powi((k - j) as i32) * scale.powi(j as i32) * mj;
                    binom *= (k - j) as f64 / (j as f64 + 1.0);
                }
                Some(total)
            }
            Self::HalfNormal { .. } => None,
        }
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}
