//! Baseline lifetime families used at each stress level.
//!
//! Each family is described by a `(alpha, lambda)` pair:
//!
//! | family | hazard | cumulative hazard |
//! |---|---|---|
//! | Weibull | `alpha * lambda * t^(alpha-1)` | `lambda * t^alpha` |
//! | linear failure rate | `alpha + lambda * t` | `alpha * t + lambda * t^2 / 2` |
//! | generalized exponential | `f / (1 - (1 - e^(-lambda t))^alpha)` | `-ln(1 - (1 - e^(-lambda t))^alpha)` |
//!
//! The generalized exponential forms are evaluated on the log scale through
//! [`ln_1m_exp`] so that both the `t -> 0` and `t -> inf` tails keep full
//! relative precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CrmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Weibull,
    #[serde(rename = "lfr")]
    LinearFailureRate,
    #[serde(rename = "ge")]
    GeneralizedExponential,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [
        FamilyKind::Weibull,
        FamilyKind::LinearFailureRate,
        FamilyKind::GeneralizedExponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Weibull => "weibull",
            FamilyKind::LinearFailureRate => "lfr",
            FamilyKind::GeneralizedExponential => "ge",
        }
    }

    /// Parameters that turn this family into an exponential model with `rate`.
    pub fn exponential(self, rate: f64) -> SegmentParams {
        match self {
            FamilyKind::Weibull | FamilyKind::GeneralizedExponential => SegmentParams::new(1.0, rate),
            FamilyKind::LinearFailureRate => SegmentParams::new(rate, 0.0),
        }
    }

    pub fn validate(self, p: &SegmentParams) -> Result<()> {
        let alpha_ok = p.alpha.is_finite() && p.alpha > 0.0;
        let lambda_ok = p.lambda.is_finite()
            && match self {
                FamilyKind::LinearFailureRate => p.lambda >= 0.0,
                _ => p.lambda > 0.0,
            };
        if alpha_ok && lambda_ok {
            Ok(())
        } else {
            Err(CrmError::InvalidParameter(format!(
                "{self}: alpha = {}, lambda = {}",
                p.alpha, p.lambda
            )))
        }
    }

    /// Natural log of the hazard at `t > 0`.
    pub fn ln_hazard(self, p: &SegmentParams, t: f64) -> Result<f64> {
        let v = match self {
            FamilyKind::Weibull => p.alpha.ln() + p.lambda.ln() + (p.alpha - 1.0) * t.ln(),
            FamilyKind::LinearFailureRate => (p.alpha + p.lambda * t).ln(),
            FamilyKind::GeneralizedExponential => {
                let x = p.lambda * t;
                let ln_u = ln_1m_exp(-x);
                p.alpha.ln() + p.lambda.ln() - x + (p.alpha - 1.0) * ln_u - ln_1m_exp(p.alpha * ln_u)
            }
        };
        self.check(p, t, v)
    }

    pub fn hazard(self, p: &SegmentParams, t: f64) -> Result<f64> {
        let v = match self {
            FamilyKind::Weibull => p.alpha * p.lambda * t.powf(p.alpha - 1.0),
            FamilyKind::LinearFailureRate => p.alpha + p.lambda * t,
            FamilyKind::GeneralizedExponential => self.ln_hazard(p, t)?.exp(),
        };
        self.check(p, t, v)
    }

    pub fn cum_hazard(self, p: &SegmentParams, t: f64) -> Result<f64> {
        if t == 0.0 {
            return Ok(0.0);
        }
        let v = match self {
            FamilyKind::Weibull => p.lambda * t.powf(p.alpha),
            FamilyKind::LinearFailureRate => t * (p.alpha + 0.5 * p.lambda * t),
            FamilyKind::GeneralizedExponential => {
                let ln_u = ln_1m_exp(-p.lambda * t);
                -ln_1m_exp(p.alpha * ln_u)
            }
        };
        self.check(p, t, v)
    }

    /// Time at which the cumulative hazard reaches `h`.
    pub fn cum_hazard_inverse(self, p: &SegmentParams, h: f64) -> Result<f64> {
        if h == 0.0 {
            return Ok(0.0);
        }
        let v = match self {
            FamilyKind::Weibull => (h / p.lambda).powf(1.0 / p.alpha),
            FamilyKind::LinearFailureRate => {
                // 2H / (alpha + sqrt(alpha^2 + 2 lambda H)) avoids cancellation for small lambda
                2.0 * h / (p.alpha + (p.alpha * p.alpha + 2.0 * p.lambda * h).sqrt())
            }
            FamilyKind::GeneralizedExponential => {
                let ln_v = ln_1m_exp(-h);
                -ln_1m_exp(ln_v / p.alpha) / p.lambda
            }
        };
        self.check(p, h, v)
    }

    fn check(self, p: &SegmentParams, t: f64, v: f64) -> Result<f64> {
        // -inf is a legitimate log of a vanishing hazard; NaN and +inf are not
        if v.is_nan() || v == f64::INFINITY {
            Err(self.eval_error(p, t))
        } else {
            Ok(v)
        }
    }

    fn eval_error(self, p: &SegmentParams, t: f64) -> CrmError {
        CrmError::Evaluation {
            kind: self,
            alpha: p.alpha,
            lambda: p.lambda,
            t,
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = CrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weibull" => Ok(FamilyKind::Weibull),
            "lfr" | "linear-failure-rate" => Ok(FamilyKind::LinearFailureRate),
            "ge" | "generalized-exponential" => Ok(FamilyKind::GeneralizedExponential),
            other => Err(CrmError::InvalidParameter(format!("unknown family `{other}`"))),
        }
    }
}

/// Shape/scale pair for one stress level. For the linear failure rate
/// family `alpha` is the intercept and `lambda` the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl SegmentParams {
    pub const fn new(alpha: f64, lambda: f64) -> Self {
        Self { alpha, lambda }
    }
}

/// `(alpha1, lambda1)` for the initial stress level and `(alpha2, lambda2)` after the change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub seg1: SegmentParams,
    pub seg2: SegmentParams,
}

impl FamilyParams {
    pub const fn new(alpha1: f64, alpha2: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            seg1: SegmentParams::new(alpha1, lambda1),
            seg2: SegmentParams::new(alpha2, lambda2),
        }
    }

    /// `[alpha1, alpha2, lambda1, lambda2]`
    pub fn to_array(&self) -> [f64; 4] {
        [self.seg1.alpha, self.seg2.alpha, self.seg1.lambda, self.seg2.lambda]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self, kind: FamilyKind) -> Result<()> {
        kind.validate(&self.seg1)?;
        kind.validate(&self.seg2)
    }
}

pub fn base_hazard(kind: FamilyKind, p: &SegmentParams, t: f64) -> Result<f64> {
    kind.hazard(p, t)
}

pub fn base_cum_hazard(kind: FamilyKind, p: &SegmentParams, t: f64) -> Result<f64> {
    kind.cum_hazard(p, t)
}

pub fn base_cum_hazard_inverse(kind: FamilyKind, p: &SegmentParams, h: f64) -> Result<f64> {
    kind.cum_hazard_inverse(p, h)
}

/// `ln(1 - e^y)` for `y <= 0`, accurate at both ends.
pub fn ln_1m_exp(y: f64) -> f64 {
    if y > -std::f64::consts::LN_2 {
        (-y.exp_m1()).ln()
    } else {
        (-y.exp()).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const W: FamilyKind = FamilyKind::Weibull;
    const L: FamilyKind = FamilyKind::LinearFailureRate;
    const G: FamilyKind = FamilyKind::GeneralizedExponential;

    #[test]
    fn closed_form_examples() {
        let p = SegmentParams::new(2.0, 0.5);
        assert_relative_eq!(W.hazard(&p, 3.0).unwrap(), 3.0, max_relative = 1e-15);
        assert_relative_eq!(W.cum_hazard(&p, 3.0).unwrap(), 4.5, max_relative = 1e-15);
        assert_relative_eq!(W.cum_hazard_inverse(&p, 4.5).unwrap(), 3.0, max_relative = 1e-15);

        let p = SegmentParams::new(1.0, 2.0);
        assert_eq!(L.hazard(&p, 2.0).unwrap(), 5.0);
        assert_eq!(L.cum_hazard(&p, 2.0).unwrap(), 6.0);
        assert_relative_eq!(L.cum_hazard_inverse(&p, 6.0).unwrap(), 2.0, max_relative = 1e-15);

        let p = SegmentParams::new(1.0, 0.7);
        for t in [1e-6, 0.3, 2.0, 40.0] {
            assert_relative_eq!(G.hazard(&p, t).unwrap(), 0.7, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        for kind in FamilyKind::ALL {
            let p = SegmentParams::new(1.7, 0.4);
            assert_eq!(kind.cum_hazard(&p, 0.0).unwrap(), 0.0);
            assert_eq!(kind.cum_hazard_inverse(&p, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn ge_small_time_accuracy() {
        // alpha < 1: u^alpha is moderate, compare with the plain log form
        let p = SegmentParams::new(0.4, 1.0);
        for x in [1e-5_f64, 1e-7, 1e-9] {
            let u = x - x * x / 2.0 + x * x * x / 6.0;
            let exact = -(1.0 - u.powf(p.alpha)).ln();
            assert_relative_eq!(G.cum_hazard(&p, x).unwrap(), exact, max_relative = 1e-12);
        }
        // alpha > 1 drives u^alpha towards zero where 1 - u^alpha rounds to 1
        let p = SegmentParams::new(3.0, 1.0);
        let x: f64 = 1e-6;
        let ua = (x - x * x / 2.0).powi(3);
        assert_relative_eq!(G.cum_hazard(&p, x).unwrap(), ua, max_relative = 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(W.validate(&SegmentParams::new(1.0, 0.0)).is_err());
        assert!(L.validate(&SegmentParams::new(1.0, 0.0)).is_ok());
        assert!(G.validate(&SegmentParams::new(-1.0, 1.0)).is_err());
        assert!(W.validate(&SegmentParams::new(f64::NAN, 1.0)).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let p = SegmentParams::new(400.0, 1.0);
        let err = W.cum_hazard(&p, 1e3).unwrap_err();
        assert!(matches!(
            err,
            CrmError::Evaluation {
                kind: FamilyKind::Weibull,
                ..
            }
        ));
    }

    #[test]
    fn parse_names() {
        assert_eq!("Weibull".parse::<FamilyKind>().unwrap(), W);
        assert_eq!("lfr".parse::<FamilyKind>().unwrap(), L);
        assert_eq!("ge".parse::<FamilyKind>().unwrap(), G);
        assert!("gamma".parse::<FamilyKind>().is_err());
    }
}
