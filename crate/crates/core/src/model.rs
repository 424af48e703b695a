//! The piecewise cumulative risk model and its cure-fraction mixture.
//!
//! The susceptible hazard is `h01` on `(0, tau1]`, the straight line `a + b t`
//! on `(tau1, tau2)` and `h03` on `[tau2, inf)`. The line is pinned by the two
//! family hazards at the endpoints, so the hazard is continuous whenever
//! `tau2 > tau1`. With `tau2 == tau1` the bridge disappears and the model is the
//! Khamis-Higgins form whose hazard jumps at `tau1` but whose cumulative hazard
//! stays continuous.
//!
//! The third cumulative-hazard piece is always
//! `H(tau2) + H_base2(t) - H_base2(tau2)`, the integral of `h03` from `tau2`.

use serde::{Deserialize, Serialize};

use crate::error::{CrmError, Result};
use crate::hazard::{FamilyKind, FamilyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressSchedule {
    pub tau1: f64,
    pub tau2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_end: Option<f64>,
}

impl StressSchedule {
    pub fn new(tau1: f64, tau2: f64, study_end: Option<f64>) -> Result<Self> {
        if !(tau1.is_finite() && tau1 > 0.0) {
            return Err(CrmError::InvalidSchedule(format!("tau1 must be positive, got {tau1}")));
        }
        if !(tau2.is_finite() && tau2 >= tau1) {
            return Err(CrmError::InvalidSchedule(format!(
                "tau2 must be >= tau1 = {tau1}, got {tau2}"
            )));
        }
        if let Some(end) = study_end {
            if !(end > tau2) {
                return Err(CrmError::InvalidSchedule(format!(
                    "study end {end} must exceed tau2 = {tau2}"
                )));
            }
        }
        Ok(Self { tau1, tau2, study_end })
    }

    pub fn with_delta(tau1: f64, delta: f64) -> Result<Self> {
        Self::new(tau1, tau1 + delta, None)
    }

    pub fn delta(&self) -> f64 {
        self.tau2 - self.tau1
    }

    pub fn is_khamis_higgins(&self) -> bool {
        self.tau2 == self.tau1
    }

    /// Same schedule with every time divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Self {
        Self {
            tau1: self.tau1 / scale,
            tau2: self.tau2 / scale,
            study_end: self.study_end.map(|e| e / scale),
        }
    }
}

/// Linear hazard `a + b t` on the lag interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub a: f64,
    pub b: f64,
}

impl Bridge {
    pub fn at(&self, t: f64) -> f64 {
        self.a + self.b * t
    }
}

pub fn bridge_coefficients(kind: FamilyKind, theta: &FamilyParams, schedule: &StressSchedule) -> Result<Bridge> {
    if schedule.is_khamis_higgins() {
        return Err(CrmError::NoBridge);
    }
    let h1 = kind.hazard(&theta.seg1, schedule.tau1)?;
    let h3 = kind.hazard(&theta.seg2, schedule.tau2)?;
    let b = (h3 - h1) / (schedule.tau2 - schedule.tau1);
    Ok(Bridge {
        a: h1 - b * schedule.tau1,
        b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    First,
    Bridge,
    Third,
}

/// A fully specified susceptible-population model.
#[derive(Debug, Clone, PartialEq)]
pub struct CrmModel {
    kind: FamilyKind,
    theta: FamilyParams,
    schedule: StressSchedule,
    bridge: Option<Bridge>,
    /// hazard of segment 1 at tau1
    h_tau1: f64,
    /// H01(tau1)
    cum_tau1: f64,
    /// H0(tau2)
    cum_tau2: f64,
    /// base cumulative hazard of segment 2 at tau2
    base2_tau2: f64,
}

impl CrmModel {
    pub fn new(kind: FamilyKind, theta: FamilyParams, schedule: StressSchedule) -> Result<Self> {
        theta.validate(kind)?;
        let h_tau1 = kind.hazard(&theta.seg1, schedule.tau1)?;
        let cum_tau1 = kind.cum_hazard(&theta.seg1, schedule.tau1)?;
        let base2_tau2 = kind.cum_hazard(&theta.seg2, schedule.tau2)?;
        let (bridge, cum_tau2) = if schedule.is_khamis_higgins() {
            (None, cum_tau1)
        } else {
            let br = bridge_coefficients(kind, &theta, &schedule)?;
            let d = schedule.tau2 - schedule.tau1;
            (Some(br), cum_tau1 + d * (h_tau1 + 0.5 * br.b * d))
        };
        Ok(Self {
            kind,
            theta,
            schedule,
            bridge,
            h_tau1,
            cum_tau1,
            cum_tau2,
            base2_tau2,
        })
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn theta(&self) -> &FamilyParams {
        &self.theta
    }

    pub fn schedule(&self) -> &StressSchedule {
        &self.schedule
    }

    pub fn bridge(&self) -> Option<&Bridge> {
        self.bridge.as_ref()
    }

    /// `t == tau1` belongs to the first segment and `t == tau2` to the third.
    pub fn segment(&self, t: f64) -> Segment {
        if t <= self.schedule.tau1 {
            Segment::First
        } else if t < self.schedule.tau2 {
            Segment::Bridge
        } else {
            Segment::Third
        }
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        match self.segment(t) {
            Segment::First => self.kind.hazard(&self.theta.seg1, t),
            Segment::Bridge => Ok(self.bridge_hazard(t)),
            Segment::Third => self.kind.hazard(&self.theta.seg2, t),
        }
    }

    pub fn ln_hazard(&self, t: f64) -> Result<f64> {
        match self.segment(t) {
            Segment::First => self.kind.ln_hazard(&self.theta.seg1, t),
            Segment::Bridge => Ok(self.bridge_hazard(t).ln()),
            Segment::Third => self.kind.ln_hazard(&self.theta.seg2, t),
        }
    }

    fn bridge_hazard(&self, t: f64) -> f64 {
        // a + b t written from the tau1 endpoint so that the tau1 limit is exact
        let b = self.bridge.map_or(0.0, |br| br.b);
        self.h_tau1 + b * (t - self.schedule.tau1)
    }

    pub fn cum_hazard(&self, t: f64) -> Result<f64> {
        match self.segment(t) {
            Segment::First => self.kind.cum_hazard(&self.theta.seg1, t),
            Segment::Bridge => {
                let x = t - self.schedule.tau1;
                let b = self.bridge.map_or(0.0, |br| br.b);
                Ok(self.cum_tau1 + x * (self.h_tau1 + 0.5 * b * x))
            }
            Segment::Third => {
                let base = self.kind.cum_hazard(&self.theta.seg2, t)?;
                Ok(self.cum_tau2 + (base - self.base2_tau2))
            }
        }
    }

    /// Time at which the susceptible cumulative hazard reaches `e >= 0`.
    pub fn cum_hazard_inverse(&self, e: f64) -> Result<f64> {
        if e <= self.cum_tau1 {
            return self.kind.cum_hazard_inverse(&self.theta.seg1, e);
        }
        if e < self.cum_tau2 {
            // h(tau1) x + (b/2) x^2 = e - H(tau1), x = t - tau1 in (0, delta)
            let r = e - self.cum_tau1;
            let b = self.bridge.map_or(0.0, |br| br.b);
            let h1 = self.h_tau1;
            let disc = (h1 * h1 + 2.0 * b * r).max(0.0);
            let x = 2.0 * r / (h1 + disc.sqrt());
            let x = x.clamp(0.0, self.schedule.delta());
            return Ok(self.schedule.tau1 + x);
        }
        let base = self.base2_tau2 + (e - self.cum_tau2);
        let t = self.kind.cum_hazard_inverse(&self.theta.seg2, base)?;
        Ok(t.max(self.schedule.tau2))
    }

    pub fn survival(&self, t: f64) -> Result<f64> {
        Ok((-self.cum_hazard(t)?).exp())
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        Ok(self.hazard(t)? * self.survival(t)?)
    }

    pub fn ln_density(&self, t: f64) -> Result<f64> {
        Ok(self.ln_hazard(t)? - self.cum_hazard(t)?)
    }
}

/// Logistic link for the cure probability `P(cured | z) = e^{beta'z} / (1 + e^{beta'z})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CureModel {
    /// intercept first
    pub beta: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl CureModel {
    pub fn new(beta: Vec<f64>, covariate_names: Vec<String>) -> Result<Self> {
        if beta.len() != covariate_names.len() + 1 {
            return Err(CrmError::DimensionMismatch {
                expected: covariate_names.len() + 1,
                got: beta.len(),
            });
        }
        Ok(Self { beta, covariate_names })
    }

    pub fn intercept_only(beta0: f64) -> Self {
        Self {
            beta: vec![beta0],
            covariate_names: Vec::new(),
        }
    }

    pub fn num_covariates(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn linear_predictor(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.beta.len() {
            return Err(CrmError::DimensionMismatch {
                expected: self.beta.len(),
                got: z.len(),
            });
        }
        Ok(self.beta.iter().zip(z).map(|(b, x)| b * x).sum())
    }

    pub fn probability(&self, z: &[f64]) -> Result<f64> {
        Ok(logistic(self.linear_predictor(z)?))
    }
}

pub fn logistic_p(cure: &CureModel, z: &[f64]) -> Result<f64> {
    cure.probability(z)
}

/// Overflow-safe logistic function; returns exactly 0 below the subnormal range.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else if x < -708.0 {
        0.0
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cure-fraction component of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Cure {
    /// no cured fraction (p = 0)
    Absent,
    /// covariate-free cure probability
    Constant { p: f64 },
    /// logistic link on covariates
    Logistic(CureModel),
}

impl Cure {
    pub fn num_covariates(&self) -> usize {
        match self {
            Cure::Logistic(m) => m.num_covariates(),
            _ => 0,
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self {
            Cure::Logistic(m) => m.covariate_names.clone(),
            _ => Vec::new(),
        }
    }

    pub fn probability(&self, z: &[f64]) -> Result<f64> {
        match self {
            Cure::Absent => Ok(0.0),
            Cure::Constant { p } => Ok(*p),
            Cure::Logistic(m) => m.probability(z),
        }
    }

    /// `(ln p, ln(1 - p))`
    pub fn ln_probabilities(&self, z: &[f64]) -> Result<(f64, f64)> {
        match self {
            Cure::Absent => Ok((f64::NEG_INFINITY, 0.0)),
            Cure::Constant { p } => Ok((p.ln(), (-p).ln_1p())),
            Cure::Logistic(m) => {
                let eta = m.linear_predictor(z)?;
                Ok((-softplus(-eta), -softplus(eta)))
            }
        }
    }
}

/// `p + (1 - p) S0(t)`.
pub fn population_survival(model: &CrmModel, cure: &Cure, z: &[f64], t: f64) -> Result<f64> {
    let p = cure.probability(z)?;
    let s0 = model.survival(t)?;
    Ok(mixture_survival(p, s0))
}

pub fn mixture_survival(p: f64, s0: f64) -> f64 {
    p + (1.0 - p) * s0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazard::SegmentParams;
    use approx::assert_relative_eq;

    fn weibull_model(tau1: f64, tau2: f64) -> CrmModel {
        CrmModel::new(
            FamilyKind::Weibull,
            FamilyParams::new(2.0, 1.5, 0.5, 1.0),
            StressSchedule::new(tau1, tau2, None).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(StressSchedule::new(0.0, 1.0, None).is_err());
        assert!(StressSchedule::new(2.0, 1.0, None).is_err());
        assert!(StressSchedule::new(1.0, 2.0, Some(2.0)).is_err());
        let s = StressSchedule::new(240.0, 350.0, Some(420.0)).unwrap();
        assert_eq!(s.delta(), 110.0);
        assert!(!s.is_khamis_higgins());
        assert!(StressSchedule::new(240.0, 240.0, None).unwrap().is_khamis_higgins());
    }

    #[test]
    fn bridge_flat_when_endpoint_hazards_match() {
        // LFR with lambda = 0 has constant hazard alpha on both sides
        let theta = FamilyParams::new(0.8, 0.8, 0.0, 0.0);
        let s = StressSchedule::new(1.0, 2.0, None).unwrap();
        let br = bridge_coefficients(FamilyKind::LinearFailureRate, &theta, &s).unwrap();
        assert_relative_eq!(br.a, 0.8, max_relative = 1e-15);
        assert_eq!(br.b, 0.0);
    }

    #[test]
    fn bridge_linear_solve() {
        // h01(1) = 1 and h03(2) = 3 with exponential-type segments
        let theta = FamilyParams::new(1.0, 1.0, 1.0, 3.0);
        let s = StressSchedule::new(1.0, 2.0, None).unwrap();
        let br = bridge_coefficients(FamilyKind::Weibull, &theta, &s).unwrap();
        assert_relative_eq!(br.a, -1.0, max_relative = 1e-15);
        assert_relative_eq!(br.b, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn bridge_endpoints_reproduce_family_hazards() {
        let m = weibull_model(1.0, 1.5);
        let br = m.bridge().unwrap();
        let h1 = FamilyKind::Weibull.hazard(&SegmentParams::new(2.0, 0.5), 1.0).unwrap();
        let h3 = FamilyKind::Weibull.hazard(&SegmentParams::new(1.5, 1.0), 1.5).unwrap();
        assert_relative_eq!(br.at(1.0), h1, max_relative = 1e-12);
        assert_relative_eq!(br.at(1.5), h3, max_relative = 1e-12);
    }

    #[test]
    fn no_bridge_in_khamis_higgins_mode() {
        let theta = FamilyParams::new(2.0, 1.5, 0.5, 1.0);
        let s = StressSchedule::new(1.0, 1.0, None).unwrap();
        assert!(matches!(
            bridge_coefficients(FamilyKind::Weibull, &theta, &s),
            Err(CrmError::NoBridge)
        ));
        assert!(weibull_model(1.0, 1.0).bridge().is_none());
    }

    #[test]
    fn boundary_membership() {
        let m = weibull_model(1.0, 1.5);
        assert_eq!(m.segment(1.0), Segment::First);
        assert_eq!(m.segment(1.2), Segment::Bridge);
        assert_eq!(m.segment(1.5), Segment::Third);
        let h = FamilyKind::Weibull.hazard(&SegmentParams::new(2.0, 0.5), 1.0).unwrap();
        assert_eq!(m.hazard(1.0).unwrap(), h);
        let mid = 1.25;
        assert_relative_eq!(
            m.hazard(mid).unwrap(),
            m.bridge().unwrap().at(mid),
            max_relative = 1e-14
        );
    }

    #[test]
    fn bridge_cum_hazard_piece() {
        // h01(1) = 1, H01(1) = 0.5, h03(2) = 3  ->  a = -1, b = 2
        let theta = FamilyParams::new(2.0, 1.0, 0.5, 3.0);
        let s = StressSchedule::new(1.0, 2.0, None).unwrap();
        let m = CrmModel::new(FamilyKind::Weibull, theta, s).unwrap();
        let br = m.bridge().unwrap();
        assert_relative_eq!(br.a, -1.0, max_relative = 1e-14);
        assert_relative_eq!(br.b, 2.0, max_relative = 1e-14);
        assert_relative_eq!(m.cum_hazard(1.5).unwrap(), 1.25, max_relative = 1e-14);
        assert_eq!(m.cum_hazard(0.7).unwrap(), 0.5 * 0.7 * 0.7);
    }

    #[test]
    fn survival_and_density_identities() {
        let m = weibull_model(1.0, 1.5);
        assert_eq!(m.survival(0.0).unwrap(), 1.0);
        for t in [0.3, 1.0, 1.2, 1.5, 3.0] {
            let d = m.density(t).unwrap();
            assert_relative_eq!(d, m.hazard(t).unwrap() * m.survival(t).unwrap(), max_relative = 1e-12);
            assert_relative_eq!(m.ln_density(t).unwrap().exp(), d, max_relative = 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip_each_segment() {
        for m in [weibull_model(1.0, 1.5), weibull_model(1.0, 1.0)] {
            for t in [0.2, 1.0, 1.1, 1.4, 1.5, 2.5] {
                let e = m.cum_hazard(t).unwrap();
                assert_relative_eq!(m.cum_hazard_inverse(e).unwrap(), t, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn logistic_link() {
        let cure = CureModel::new(vec![0.0, 0.0], vec!["x".into()]).unwrap();
        assert_eq!(logistic_p(&cure, &[1.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(
            logistic_p(&cure, &[1.0]),
            Err(CrmError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert_eq!(logistic(-745.0), 0.0);
        assert_eq!(logistic(745.0), 1.0);
        let p = logistic(-700.0);
        assert!(p > 0.0 && p.is_finite());
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn population_survival_limits() {
        let m = weibull_model(1.0, 1.5);
        let cure = Cure::Logistic(CureModel::new(vec![-1.0, 0.5], vec!["x".into()]).unwrap());
        let z = [1.0, 0.4];
        let p = cure.probability(&z).unwrap();
        assert_eq!(population_survival(&m, &cure, &z, 0.0).unwrap(), 1.0);
        let tail = population_survival(&m, &cure, &z, 1.5e6).unwrap();
        assert!((tail - p).abs() < 1e-9);
        for t in [0.5, 1.3, 2.0] {
            assert_eq!(
                population_survival(&m, &Cure::Absent, &z, t).unwrap(),
                m.survival(t).unwrap()
            );
        }
    }
}
