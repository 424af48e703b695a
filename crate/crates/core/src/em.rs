//! EM fitting of the cure-mixture cumulative risk model at a fixed lag, and
//! the profile search over candidate `tau2` values.
//!
//! Each iteration computes the posterior cure probability `w1` of every
//! censored record (E-step), then maximizes the pseudo log-likelihood in two
//! independent pieces: the cure part (closed form without covariates, weighted
//! logistic Newton-Raphson with covariates) and the lifetime part over the
//! family parameters (numeric optimizer on log-parameters inside a box).
//! Both M-step pieces only accept improvements, so the observed log-likelihood
//! never decreases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrmError, Result};
use crate::hazard::{FamilyKind, FamilyParams, SegmentParams};
use crate::likelihood::{g2, model_log_likelihood, partition, EmWeights, Partition, SubjectRecord};
use crate::model::{logistic, softplus, CrmModel, Cure, CureModel, StressSchedule};
use crate::optim::{self, Bounds, NelderMeadOptions, NewtonOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    NelderMead,
    NewtonWithNumericDerivatives,
}

/// Equality restrictions on the family parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaConstraint {
    #[default]
    Free,
    /// `alpha1 == alpha2`
    EqualShapes,
    /// exponential lifetimes at both stress levels: shapes fixed at 1
    /// (Weibull, GE) or slopes fixed at 0 (linear failure rate)
    Exponential,
}

impl ThetaConstraint {
    pub fn dim(self) -> usize {
        match self {
            ThetaConstraint::Free => 4,
            ThetaConstraint::EqualShapes => 3,
            ThetaConstraint::Exponential => 2,
        }
    }

    pub fn parameter_names(self, kind: FamilyKind) -> Vec<&'static str> {
        match (self, kind) {
            (ThetaConstraint::Free, _) => vec!["alpha1", "alpha2", "lambda1", "lambda2"],
            (ThetaConstraint::EqualShapes, _) => vec!["alpha", "lambda1", "lambda2"],
            (ThetaConstraint::Exponential, FamilyKind::LinearFailureRate) => vec!["alpha1", "alpha2"],
            (ThetaConstraint::Exponential, _) => vec!["lambda1", "lambda2"],
        }
    }

    /// Free natural-scale parameters of `theta`.
    pub fn natural(self, kind: FamilyKind, theta: &FamilyParams) -> Vec<f64> {
        let [a1, a2, l1, l2] = theta.to_array();
        match (self, kind) {
            (ThetaConstraint::Free, _) => vec![a1, a2, l1, l2],
            (ThetaConstraint::EqualShapes, _) => vec![a1, l1, l2],
            (ThetaConstraint::Exponential, FamilyKind::LinearFailureRate) => vec![a1, a2],
            (ThetaConstraint::Exponential, _) => vec![l1, l2],
        }
    }

    pub fn from_natural(self, kind: FamilyKind, v: &[f64]) -> FamilyParams {
        match (self, kind) {
            (ThetaConstraint::Free, _) => FamilyParams::new(v[0], v[1], v[2], v[3]),
            (ThetaConstraint::EqualShapes, _) => FamilyParams::new(v[0], v[0], v[1], v[2]),
            (ThetaConstraint::Exponential, FamilyKind::LinearFailureRate) => FamilyParams::new(v[0], v[1], 0.0, 0.0),
            (ThetaConstraint::Exponential, _) => FamilyParams::new(1.0, 1.0, v[0], v[1]),
        }
    }

    /// Closest parameter vector satisfying the restriction.
    pub fn project(self, kind: FamilyKind, theta: &FamilyParams) -> FamilyParams {
        let [a1, a2, l1, l2] = theta.to_array();
        match (self, kind) {
            (ThetaConstraint::Free, _) => *theta,
            (ThetaConstraint::EqualShapes, _) => {
                let a = (a1 * a2).sqrt();
                FamilyParams::new(a, a, l1, l2)
            }
            (ThetaConstraint::Exponential, FamilyKind::LinearFailureRate) => FamilyParams::new(a1, a2, 0.0, 0.0),
            (ThetaConstraint::Exponential, _) => FamilyParams::new(1.0, 1.0, l1, l2),
        }
    }

    fn pack(self, kind: FamilyKind, theta: &FamilyParams) -> Vec<f64> {
        self.natural(kind, theta).into_iter().map(f64::ln).collect()
    }

    fn unpack(self, kind: FamilyKind, v: &[f64]) -> FamilyParams {
        let nat: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        self.from_natural(kind, &nat)
    }
}

/// How the cure probability is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CureForm {
    /// constant when the records carry no covariates, logistic otherwise
    #[default]
    Auto,
    /// no cured fraction
    Absent,
    /// covariate-free cure probability, ignoring any covariates
    Constant,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ThetaBounds {
    fn default() -> Self {
        Self {
            lower: 1e-6,
            upper: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialValues {
    pub theta: FamilyParams,
    pub cure: Cure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// stop once the observed log-likelihood gains less than this per iteration
    pub tol: f64,
    pub max_iter: usize,
    pub theta_bounds: ThetaBounds,
    pub inner_optimizer: InnerOptimizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitialValues>,
    #[serde(default)]
    pub constraint: ThetaConstraint,
    #[serde(default)]
    pub cure_form: CureForm,
    /// box for logistic coefficients on the median/IQR-standardized covariate scale
    pub beta_bound: f64,
    pub beta_max_iter: usize,
    pub compute_se: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            theta_bounds: ThetaBounds::default(),
            inner_optimizer: InnerOptimizer::NewtonWithNumericDerivatives,
            init: None,
            constraint: ThetaConstraint::Free,
            cure_form: CureForm::Auto,
            beta_bound: 50.0,
            beta_max_iter: 100,
            compute_se: true,
        }
    }
}

impl EmConfig {
    pub fn with_constraint(mut self, constraint: ThetaConstraint) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn with_cure_form(mut self, cure_form: CureForm) -> Self {
        self.cure_form = cure_form;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: FamilyKind,
    pub schedule: StressSchedule,
    pub constraint: ThetaConstraint,
    pub theta_hat: FamilyParams,
    pub cure_hat: Cure,
    /// maximized observed log-likelihood on the fitting time scale
    pub mll: f64,
    pub parameter_names: Vec<String>,
    pub estimates: Vec<f64>,
    /// `None` when the observed information is not positive definite
    pub se: Option<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub n: usize,
    pub num_events: usize,
}

impl FitResult {
    pub fn model(&self) -> Result<CrmModel> {
        CrmModel::new(self.kind, self.theta_hat, self.schedule)
    }

    /// Constant cure probability, or `None` for a logistic cure model.
    pub fn p_hat(&self) -> Option<f64> {
        match &self.cure_hat {
            Cure::Absent => Some(0.0),
            Cure::Constant { p } => Some(*p),
            Cure::Logistic(_) => None,
        }
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.estimates[i])
    }

    pub fn standard_error(&self, name: &str) -> Option<f64> {
        let i = self.parameter_names.iter().position(|n| n == name)?;
        self.se.as_ref().map(|se| se[i])
    }
}

/// `sum_i w1_i / n`, the exact maximizer of the covariate-free cure part.
pub fn m_step_p_closed_form(weights_w1: &[f64], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(CrmError::Data("closed-form cure update needs n > 0".into()));
    }
    Ok(weights_w1.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct BetaOptions {
    pub bound: f64,
    pub max_iter: usize,
    pub gtol: f64,
}

impl Default for BetaOptions {
    fn default() -> Self {
        Self {
            bound: 50.0,
            max_iter: 100,
            gtol: 1e-6,
        }
    }
}

/// Fractional-label logistic log-likelihood `sum y ln p + (1 - y) ln(1 - p)`.
pub fn weighted_logistic_loglik(z: &[Vec<f64>], y: &[f64], beta: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(zi, &yi)| {
            let eta: f64 = zi.iter().zip(beta).map(|(a, b)| a * b).sum();
            yi * eta - softplus(eta)
        })
        .sum()
}

/// Newton-Raphson for the cure coefficients. `y[i]` is the cure label: 0 for
/// events, `w1` for censored records.
pub fn m_step_beta(z: &[Vec<f64>], y: &[f64], beta_init: &[f64], opts: &BetaOptions) -> Result<Vec<f64>> {
    let k = beta_init.len();
    let mut beta: Vec<f64> = beta_init.iter().map(|b| b.clamp(-opts.bound, opts.bound)).collect();
    let mut value = weighted_logistic_loglik(z, y, &beta);
    let mut last_norm = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let mut grad = DVector::<f64>::zeros(k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        for (zi, &yi) in z.iter().zip(y) {
            let eta: f64 = zi.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = logistic(eta);
            let v = p * (1.0 - p);
            for a in 0..k {
                grad[a] += (yi - p) * zi[a];
                for b in 0..=a {
                    info[(a, b)] += v * zi[a] * zi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let free: Vec<usize> = (0..k)
            .filter(|&i| !((beta[i] <= -opts.bound && grad[i] < 0.0) || (beta[i] >= opts.bound && grad[i] > 0.0)))
            .collect();
        last_norm = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if last_norm < opts.gtol {
            return Ok(beta);
        }

        let m = free.len();
        let sub = DMatrix::from_fn(m, m, |r, c| info[(free[r], free[c])]);
        let g = DVector::from_iterator(m, free.iter().map(|&i| grad[i]));
        let scale = (0..m).map(|i| sub[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let mut ridge = 1e-12 * scale;
        let step = loop {
            let mut a = sub.clone();
            for i in 0..m {
                a[(i, i)] += ridge;
            }
            if let Some(ch) = a.cholesky() {
                break ch.solve(&g);
            }
            ridge *= 100.0;
        };

        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let mut trial = beta.clone();
            for (j, &i) in free.iter().enumerate() {
                trial[i] = (beta[i] + t * step[j]).clamp(-opts.bound, opts.bound);
            }
            let tv = weighted_logistic_loglik(z, y, &trial);
            if tv > value {
                improved = true;
                beta = trial;
                value = tv;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            // numerically flat: accept if the gradient is at round-off level
            if last_norm < opts.gtol.max(1e-9 * z.len() as f64).max(1e-5) {
                return Ok(beta);
            }
            break;
        }
    }
    Err(CrmError::BetaNonConvergence {
        beta,
        grad_norm: last_norm,
    })
}

fn log_bounds(bounds: &ThetaBounds, dim: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![bounds.lower.ln(); dim], vec![bounds.upper.ln(); dim])
}

fn maximize(
    optimizer: InnerOptimizer,
    f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: Bounds<'_>,
) -> optim::OptimResult {
    match optimizer {
        InnerOptimizer::NelderMead => optim::nelder_mead_max(
            f,
            x0,
            bounds,
            NelderMeadOptions {
                initial_step: 0.1,
                ftol: 1e-14,
                ..Default::default()
            },
        ),
        InnerOptimizer::NewtonWithNumericDerivatives => optim::newton_max(
            f,
            x0,
            bounds,
            NewtonOptions {
                gtol: 1e-6,
                ..Default::default()
            },
        ),
    }
}

/// Maximize `g2` over the (possibly restricted) family parameters, starting at `theta_init`.
pub fn m_step_theta(
    weights: &EmWeights,
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    theta_init: &FamilyParams,
    config: &EmConfig,
) -> Result<FamilyParams> {
    let part = partition(records, schedule);
    m_step_theta_with(weights, records, &part, schedule, kind, theta_init, config)
}

fn m_step_theta_with(
    weights: &EmWeights,
    records: &[SubjectRecord],
    part: &Partition,
    schedule: &StressSchedule,
    kind: FamilyKind,
    theta_init: &FamilyParams,
    config: &EmConfig,
) -> Result<FamilyParams> {
    let c = config.constraint;
    let objective = |v: &[f64]| -> f64 {
        let theta = c.unpack(kind, v);
        match CrmModel::new(kind, theta, *schedule) {
            Ok(m) => g2(&m, records, part, weights).unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let (lo, hi) = log_bounds(&config.theta_bounds, c.dim());
    let x0 = c.pack(kind, &c.project(kind, theta_init));
    let res = maximize(
        config.inner_optimizer,
        objective,
        &x0,
        Bounds { lower: &lo, upper: &hi },
    );
    if !res.value.is_finite() {
        return Err(CrmError::Optimizer {
            message: "lifetime M-step objective is not finite".into(),
            iterate: res.x.iter().map(|v| v.exp()).collect(),
            objective: res.value,
        });
    }
    Ok(c.unpack(kind, &res.x))
}

/// Median/IQR standardization of the non-intercept covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl CovariateScaling {
    pub fn from_records(records: &[SubjectRecord]) -> Self {
        let s = records.first().map_or(0, |r| r.z.len() - 1);
        let mut center = Vec::with_capacity(s);
        let mut scale = Vec::with_capacity(s);
        for j in 1..=s {
            let mut col: Vec<f64> = records.iter().map(|r| r.z[j]).collect();
            col.sort_by(f64::total_cmp);
            let med = quantile_sorted(&col, 0.5);
            let mut iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
            if !(iqr > 0.0) {
                iqr = col.last().copied().unwrap_or(0.0) - col.first().copied().unwrap_or(0.0);
            }
            if !(iqr > 0.0) {
                iqr = 1.0;
            }
            center.push(med);
            scale.push(iqr);
        }
        Self { center, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(z.len());
        out.push(z[0]);
        for (j, v) in z[1..].iter().enumerate() {
            out.push((v - self.center[j]) / self.scale[j]);
        }
        out
    }

    /// Coefficients for standardized covariates mapped to the original scale.
    pub fn unscale_beta(&self, beta_scaled: &[f64]) -> Vec<f64> {
        let mut out = vec![beta_scaled[0]];
        for j in 0..self.center.len() {
            let b = beta_scaled[j + 1] / self.scale[j];
            out[0] -= b * self.center[j];
            out.push(b);
        }
        out
    }

    pub fn scale_beta(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![beta[0]];
        for j in 0..self.center.len() {
            out[0] += beta[j + 1] * self.center[j];
            out.push(beta[j + 1] * self.scale[j]);
        }
        out
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resolve_cure_form(form: CureForm, s: usize) -> Result<CureForm> {
    match form {
        CureForm::Auto if s == 0 => Ok(CureForm::Constant),
        CureForm::Auto => Ok(CureForm::Logistic),
        CureForm::Logistic if s == 0 => Err(CrmError::Inapplicable {
            problem: "logistic cure model".into(),
            reason: "records carry no covariates".into(),
        }),
        other => Ok(other),
    }
}

fn exposure_rate(events: usize, exposure: f64) -> f64 {
    (events.max(1) as f64 / exposure.max(1e-12)).max(1e-6)
}

/// Segment-wise crude starting values, ignoring the bridge and the cure fraction.
pub fn initial_theta(
    records: &[SubjectRecord],
    part: &Partition,
    schedule: &StressSchedule,
    kind: FamilyKind,
    constraint: ThetaConstraint,
    bounds: &ThetaBounds,
) -> Result<FamilyParams> {
    let tau1 = schedule.tau1;
    let tau2 = schedule.tau2;
    let exposure1: f64 = records.iter().map(|r| r.time.min(tau1)).sum();
    let exposure3: f64 = part.i3.iter().map(|&i| records[i].time - tau2).sum();
    let rate1 = exposure_rate(part.n1(), exposure1);
    let rate3 = exposure_rate(part.n3(), exposure3);

    let seg1_obj = |p: &SegmentParams| -> f64 {
        let mut v = 0.0;
        for &i in &part.i1 {
            v += kind.ln_hazard(p, records[i].time).unwrap_or(f64::NEG_INFINITY);
        }
        for r in records {
            v -= kind.cum_hazard(p, r.time.min(tau1)).unwrap_or(f64::INFINITY);
        }
        v
    };
    let seg3_obj = |p: &SegmentParams| -> f64 {
        let base = match kind.cum_hazard(p, tau2) {
            Ok(b) => b,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut v = 0.0;
        for &i in &part.i3 {
            v += kind.ln_hazard(p, records[i].time).unwrap_or(f64::NEG_INFINITY);
        }
        // censored records are dropped: most of them are cured late in the study
        for &i in &part.i3 {
            v -= kind.cum_hazard(p, records[i].time).unwrap_or(f64::INFINITY) - base;
        }
        v
    };

    let lo = [bounds.lower.ln(); 2];
    let hi = [bounds.upper.ln(); 2];
    let crude = |obj: &dyn Fn(&SegmentParams) -> f64, rate: f64| -> SegmentParams {
        let start = kind.exponential(rate);
        let x0 = [start.alpha.ln(), start.lambda.max(rate * 1e-3).ln()];
        let res = optim::nelder_mead_max(
            |v| obj(&SegmentParams::new(v[0].exp(), v[1].exp())),
            &x0,
            Bounds { lower: &lo, upper: &hi },
            NelderMeadOptions {
                max_evaluations: 600,
                ftol: 1e-10,
                initial_step: 0.3,
            },
        );
        if res.value.is_finite() {
            SegmentParams::new(res.x[0].exp(), res.x[1].exp())
        } else {
            start
        }
    };

    let theta = match constraint {
        ThetaConstraint::Exponential => FamilyParams {
            seg1: kind.exponential(rate1),
            seg2: kind.exponential(rate3),
        },
        _ => {
            let seg1 = crude(&seg1_obj, rate1);
            let seg2 = crude(&seg3_obj, rate3);
            constraint.project(kind, &FamilyParams { seg1, seg2 })
        }
    };
    let clamp = |v: f64| v.clamp(bounds.lower, bounds.upper);
    let [a1, a2, l1, l2] = theta.to_array();
    let fixed_zero = |v: f64| if v == 0.0 { 0.0 } else { clamp(v) };
    Ok(FamilyParams::new(clamp(a1), clamp(a2), fixed_zero(l1), fixed_zero(l2)))
}

struct Prepared {
    /// records used by the EM, with standardized covariates when logistic
    records: Vec<SubjectRecord>,
    scaling: Option<CovariateScaling>,
    form: CureForm,
    names: Vec<String>,
}

fn prepare(records: &[SubjectRecord], names: &[String], config: &EmConfig) -> Result<Prepared> {
    let s = records.first().map_or(0, |r| r.z.len().saturating_sub(1));
    if let Some(bad) = records.iter().position(|r| r.z.len() != s + 1) {
        return Err(CrmError::Data(format!("record {bad}: inconsistent covariate length")));
    }
    let form = resolve_cure_form(config.cure_form, s)?;
    let names = if names.len() == s {
        names.to_vec()
    } else {
        (1..=s).map(|j| format!("z{j}")).collect()
    };
    if form == CureForm::Logistic {
        let scaling = CovariateScaling::from_records(records);
        let scaled = records
            .iter()
            .map(|r| SubjectRecord {
                time: r.time,
                event: r.event,
                z: scaling.apply(&r.z),
            })
            .collect();
        Ok(Prepared {
            records: scaled,
            scaling: Some(scaling),
            form,
            names,
        })
    } else {
        Ok(Prepared {
            records: records.to_vec(),
            scaling: None,
            form,
            names,
        })
    }
}

/// EM fit at a fixed schedule. Covariate names default to `z1, z2, ...`.
pub fn em_fit(
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<FitResult> {
    em_fit_named(records, &[], schedule, kind, config)
}

pub fn em_fit_named(
    records: &[SubjectRecord],
    covariate_names: &[String],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<FitResult> {
    if config.tol <= 0.0 || config.max_iter == 0 {
        return Err(CrmError::InvalidParameter("EM needs tol > 0 and max_iter >= 1".into()));
    }
    let prep = prepare(records, covariate_names, config)?;
    let recs = &prep.records;
    let part = partition(recs, schedule);
    if part.n1() == 0 {
        return Err(CrmError::InsufficientData {
            segment: "I1 (events up to tau1)",
        });
    }
    if part.n3() == 0 {
        return Err(CrmError::InsufficientData {
            segment: "I3 (events from tau2 on)",
        });
    }
    let n = recs.len();
    let beta_opts = BetaOptions {
        bound: config.beta_bound,
        max_iter: config.beta_max_iter,
        gtol: 1e-6,
    };

    // starting values
    let (mut theta, mut cure) = match &config.init {
        Some(init) => {
            let theta = config.constraint.project(kind, &init.theta);
            let cure = match (prep.form, &init.cure) {
                (CureForm::Absent, _) => Cure::Absent,
                (CureForm::Constant, Cure::Constant { p }) => Cure::Constant { p: *p },
                (CureForm::Logistic, Cure::Logistic(m)) if m.beta.len() == recs[0].z.len() => {
                    let scaled = prep.scaling.as_ref().expect("logistic has scaling").scale_beta(&m.beta);
                    Cure::Logistic(CureModel {
                        beta: scaled,
                        covariate_names: prep.names.clone(),
                    })
                }
                _ => default_cure(prep.form, &part, n, recs[0].z.len(), &prep.names, &beta_opts),
            };
            (theta, cure)
        }
        None => (
            initial_theta(recs, &part, schedule, kind, config.constraint, &config.theta_bounds)?,
            default_cure(prep.form, &part, n, recs[0].z.len(), &prep.names, &beta_opts),
        ),
    };

    let mut model = CrmModel::new(kind, theta, *schedule)?;
    let mut ll = model_log_likelihood(&model, &cure, recs)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    // cure labels for the logistic M-step: events are susceptible (0)
    let z_rows: Vec<Vec<f64>> = recs.iter().map(|r| r.z.clone()).collect();
    let mut labels = vec![0.0; n];

    for _ in 0..config.max_iter {
        iterations += 1;
        let weights = EmWeights::compute(&model, &cure, recs, &part)?;

        cure = match &cure {
            Cure::Absent => Cure::Absent,
            Cure::Constant { .. } => Cure::Constant {
                p: m_step_p_closed_form(&weights.w1, n)?,
            },
            Cure::Logistic(m) => {
                for (k, &i) in part.i4.iter().enumerate() {
                    labels[i] = weights.w1[k];
                }
                // a stalled Newton run still returns an improving iterate
                let beta = match m_step_beta(&z_rows, &labels, &m.beta, &beta_opts) {
                    Ok(b) => b,
                    Err(CrmError::BetaNonConvergence { beta, .. }) => beta,
                    Err(e) => return Err(e),
                };
                Cure::Logistic(CureModel {
                    beta,
                    covariate_names: m.covariate_names.clone(),
                })
            }
        };

        theta = m_step_theta_with(&weights, recs, &part, schedule, kind, &theta, config)?;
        model = CrmModel::new(kind, theta, *schedule)?;
        let next = model_log_likelihood(&model, &cure, recs)?;
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < config.tol {
            converged = true;
            break;
        }
    }

    let cure_hat = match (cure, &prep.scaling) {
        (Cure::Logistic(m), Some(sc)) => Cure::Logistic(CureModel {
            beta: sc.unscale_beta(&m.beta),
            covariate_names: m.covariate_names,
        }),
        (other, _) => other,
    };
    let mll = model_log_likelihood(&model, &cure_hat, records)?;

    let mut parameter_names: Vec<String> = config
        .constraint
        .parameter_names(kind)
        .into_iter()
        .map(String::from)
        .collect();
    let mut estimates = config.constraint.natural(kind, &theta);
    match &cure_hat {
        Cure::Absent => {}
        Cure::Constant { p } => {
            parameter_names.push("p".into());
            estimates.push(*p);
        }
        Cure::Logistic(m) => {
            parameter_names.extend((0..m.beta.len()).map(|j| format!("beta{j}")));
            estimates.extend(&m.beta);
        }
    }

    let se = if config.compute_se {
        standard_errors(records, schedule, kind, config, &cure_hat, &estimates)
    } else {
        None
    };

    Ok(FitResult {
        kind,
        schedule: *schedule,
        constraint: config.constraint,
        theta_hat: theta,
        cure_hat,
        mll,
        parameter_names,
        estimates,
        se,
        iterations,
        converged,
        trace,
        n,
        num_events: part.m(),
    })
}

fn default_cure(
    form: CureForm,
    part: &Partition,
    n: usize,
    width: usize,
    names: &[String],
    opts: &BetaOptions,
) -> Cure {
    let p0 = part.n4() as f64 / (2.0 * n as f64);
    match form {
        CureForm::Absent => Cure::Absent,
        CureForm::Logistic => {
            let b0 = if p0 > 0.0 { (p0 / (1.0 - p0)).ln() } else { -opts.bound };
            let mut beta = vec![0.0; width];
            beta[0] = b0.max(-opts.bound);
            Cure::Logistic(CureModel {
                beta,
                covariate_names: names.to_vec(),
            })
        }
        _ => Cure::Constant { p: p0 },
    }
}

/// Natural-scale parameters to `(theta, cure)`; `None` outside the valid region.
fn unpack_estimates(
    kind: FamilyKind,
    constraint: ThetaConstraint,
    template: &Cure,
    v: &[f64],
) -> Option<(FamilyParams, Cure)> {
    let d = constraint.dim();
    let theta = constraint.from_natural(kind, &v[..d]);
    let cure = match template {
        Cure::Absent => Cure::Absent,
        Cure::Constant { .. } => {
            let p = v[d];
            if !(0.0..1.0).contains(&p) {
                return None;
            }
            Cure::Constant { p }
        }
        Cure::Logistic(m) => Cure::Logistic(CureModel {
            beta: v[d..].to_vec(),
            covariate_names: m.covariate_names.clone(),
        }),
    };
    Some((theta, cure))
}

/// Observed log-likelihood as a function of the natural-scale estimate vector.
pub fn loglik_at(
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    constraint: ThetaConstraint,
    template: &Cure,
    v: &[f64],
) -> f64 {
    let Some((theta, cure)) = unpack_estimates(kind, constraint, template, v) else {
        return f64::NAN;
    };
    match CrmModel::new(kind, theta, *schedule) {
        Ok(m) => model_log_likelihood(&m, &cure, records).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Square roots of the diagonal of the inverse observed information.
fn standard_errors(
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
    cure: &Cure,
    estimates: &[f64],
) -> Option<Vec<f64>> {
    if let Cure::Constant { p } = cure {
        if !(*p > 1e-8 && *p < 1.0 - 1e-8) {
            return None;
        }
    }
    let d = config.constraint.dim();
    let at_bound = estimates[..d]
        .iter()
        .zip(
            config
                .constraint
                .natural(kind, &config.constraint.from_natural(kind, &estimates[..d])),
        )
        .any(|(v, _)| *v <= config.theta_bounds.lower * (1.0 + 1e-9) || *v >= config.theta_bounds.upper * (1.0 - 1e-9));
    if at_bound {
        return None;
    }
    let h = optim::numeric_hessian(
        |v| loglik_at(records, schedule, kind, config.constraint, cure, v),
        estimates,
        1e-4,
    );
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let info = -h;
    let chol = info.clone().cholesky()?;
    let cov = chol.inverse();
    let se: Vec<f64> = (0..estimates.len()).map(|i| cov[(i, i)].sqrt()).collect();
    if se.iter().all(|v| v.is_finite() && *v > 0.0) {
        Some(se)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub tau2: f64,
    pub mll: Option<f64>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub best_tau2: f64,
    pub best: FitResult,
    pub curve: Vec<ProfilePoint>,
}

impl ProfileResult {
    pub fn best_delta(&self) -> f64 {
        self.best.schedule.delta()
    }
}

/// Evenly spaced `tau2` candidates from `start` to `stop` inclusive.
pub fn tau2_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(CrmError::InvalidParameter(format!(
            "grid needs step > 0 and stop >= start (got {start}:{stop}:{step})"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}

/// Fit every candidate `tau2` and keep the one with the largest maximized
/// log-likelihood; ties go to the smallest `tau2`.
pub fn profile_fit_delta(
    records: &[SubjectRecord],
    kind: FamilyKind,
    tau1: f64,
    grid: &[f64],
    config: &EmConfig,
) -> Result<ProfileResult> {
    profile_fit_delta_named(records, &[], kind, tau1, grid, config)
}

pub fn profile_fit_delta_named(
    records: &[SubjectRecord],
    covariate_names: &[String],
    kind: FamilyKind,
    tau1: f64,
    grid: &[f64],
    config: &EmConfig,
) -> Result<ProfileResult> {
    if grid.is_empty() {
        return Err(CrmError::InvalidParameter("empty tau2 grid".into()));
    }
    if let Some(bad) = grid.iter().find(|&&t| !(t >= tau1)) {
        return Err(CrmError::InvalidSchedule(format!(
            "grid value {bad} is below tau1 = {tau1}"
        )));
    }
    let fits: Vec<(f64, Result<FitResult>)> = grid
        .par_iter()
        .map(|&tau2| {
            let fit = StressSchedule::new(tau1, tau2, None)
                .and_then(|s| em_fit_named(records, covariate_names, &s, kind, config));
            (tau2, fit)
        })
        .collect();

    let mut curve = Vec::with_capacity(fits.len());
    let mut best: Option<FitResult> = None;
    let mut first_error: Option<(f64, String)> = None;
    for (tau2, fit) in fits {
        match fit {
            Ok(f) => {
                curve.push(ProfilePoint {
                    tau2,
                    mll: Some(f.mll),
                    converged: f.converged,
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some(b) => f.mll > b.mll || (f.mll == b.mll && tau2 < b.schedule.tau2),
                };
                if better {
                    best = Some(f);
                }
            }
            Err(e) => {
                let msg = e.to_string();
                if first_error.is_none() {
                    first_error = Some((tau2, msg.clone()));
                }
                curve.push(ProfilePoint {
                    tau2,
                    mll: None,
                    converged: false,
                    error: Some(msg),
                });
            }
        }
    }
    match best {
        Some(best) => Ok(ProfileResult {
            best_tau2: best.schedule.tau2,
            best,
            curve,
        }),
        None => {
            let (tau2, message) = first_error.unwrap_or((tau1, "no candidates".into()));
            Err(CrmError::ProfileFailed { tau2, message })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_p_examples() {
        assert_relative_eq!(
            m_step_p_closed_form(&[1.0; 9], 40).unwrap(),
            0.225,
            max_relative = 1e-15
        );
        assert_eq!(m_step_p_closed_form(&[0.0; 9], 40).unwrap(), 0.0);
        assert!(m_step_p_closed_form(&[], 0).is_err());
    }

    #[test]
    fn constraint_round_trip() {
        let theta = FamilyParams::new(1.3, 0.7, 0.2, 2.0);
        for kind in FamilyKind::ALL {
            for c in [
                ThetaConstraint::Free,
                ThetaConstraint::EqualShapes,
                ThetaConstraint::Exponential,
            ] {
                let projected = c.project(kind, &theta);
                let v = c.natural(kind, &projected);
                assert_eq!(v.len(), c.dim());
                assert_eq!(c.parameter_names(kind).len(), c.dim());
                let back = c.from_natural(kind, &v);
                assert_eq!(back, projected);
            }
        }
        let lfr = ThetaConstraint::Exponential.project(FamilyKind::LinearFailureRate, &theta);
        assert_eq!((lfr.seg1.lambda, lfr.seg2.lambda), (0.0, 0.0));
    }

    #[test]
    fn covariate_scaling_round_trip() {
        let recs: Vec<SubjectRecord> = (0..9)
            .map(|i| SubjectRecord::new(1.0, true, vec![1.0, i as f64, (i * i) as f64]))
            .collect();
        let sc = CovariateScaling::from_records(&recs);
        let beta = vec![0.3, -1.2, 0.05];
        let scaled = sc.scale_beta(&beta);
        for r in &recs {
            let a: f64 = r.z.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let zs = sc.apply(&r.z);
            let b: f64 = zs.iter().zip(&scaled).map(|(x, b)| x * b).sum();
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let back = sc.unscale_beta(&scaled);
        for (x, y) in back.iter().zip(&beta) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_runs_to_bound_without_cured_mass() {
        let z = vec![vec![1.0, 0.5]; 20];
        let y = vec![0.0; 20];
        let opts = BetaOptions {
            bound: 30.0,
            ..Default::default()
        };
        let beta = m_step_beta(&z, &y, &[0.0, 0.0], &opts).unwrap();
        let p = logistic(beta[0] + 0.5 * beta[1]);
        assert!(p < 1e-6, "p = {p}, beta = {beta:?}");
        assert!(beta.iter().all(|b| b.abs() <= 30.0));
    }

    #[test]
    fn beta_symmetric_data_has_zero_slope() {
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (i, x) in [0.3, 1.1, 2.5, 0.7].iter().enumerate() {
            let w = 0.1 + 0.2 * i as f64;
            z.push(vec![1.0, *x]);
            y.push(w);
            z.push(vec![1.0, -x]);
            y.push(w);
        }
        let beta = m_step_beta(&z, &y, &[0.2, 0.4], &BetaOptions::default()).unwrap();
        assert!(beta[1].abs() < 1e-8, "{beta:?}");
    }

    #[test]
    fn grid_construction() {
        let g = tau2_grid(240.0, 440.0, 5.0).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 240.0);
        assert_eq!(*g.last().unwrap(), 440.0);
        assert!(tau2_grid(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn missing_segment_is_named() {
        let times = [0.5, 0.8, 1.2, 3.0];
        let events = [true, true, true, false];
        let recs: Vec<SubjectRecord> = times
            .iter()
            .zip(events)
            .map(|(&t, e)| SubjectRecord::plain(t, e))
            .collect();
        let s = StressSchedule::new(1.0, 1.5, None).unwrap();
        let err = em_fit(&recs, &s, FamilyKind::Weibull, &EmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("I3"), "{err}");
        let s = StressSchedule::new(0.1, 0.2, None).unwrap();
        let err = em_fit(&recs, &s, FamilyKind::Weibull, &EmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("I1"), "{err}");
    }
}
