//! Exact sampling from the cure-mixture cumulative risk model and Monte Carlo
//! replication studies.
//!
//! Model parameters act on the time scale `t / time_scale`; generated datasets
//! report times on the original scale. Every subject draws from its own
//! ChaCha stream keyed by `(seed, rep, subject)`, so a replication is
//! bit-identical whether it runs alone, serially, or in parallel.

use std::io::Write;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit_named, profile_fit_delta_named, EmConfig};
use crate::error::{CrmError, Result};
use crate::hazard::{FamilyKind, FamilyParams};
use crate::likelihood::{Dataset, SubjectRecord};
use crate::model::{logistic, CrmModel, StressSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

impl CovariateRange {
    pub fn new(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_string(),
            low,
            high,
        }
    }
}

/// Scale on which the cure coefficients act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateScale {
    /// `(x - low) / (high - low)`, in `[0, 1]`
    #[default]
    Unit,
    /// the drawn values themselves
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Censoring {
    /// administrative end chosen so the expected censored share equals `fraction`
    TargetFraction { fraction: f64 },
    /// administrative end on the original time scale
    StudyEnd { time: f64 },
}

/// Candidate `tau2` values for per-replication profile search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        crate::em::tau2_grid(self.start, self.stop, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: FamilyKind,
    pub theta: FamilyParams,
    /// intercept first; empty or `[b0]` for a covariate-free cure fraction
    pub beta: Vec<f64>,
    pub tau1: f64,
    pub delta: f64,
    /// divisor turning original times into model times; defaults to `tau1`
    #[serde(default)]
    pub time_scale: Option<f64>,
    pub n: usize,
    pub reps: usize,
    #[serde(default)]
    pub covariate_ranges: Vec<CovariateRange>,
    #[serde(default)]
    pub covariate_scale: CovariateScale,
    pub censoring: Censoring,
    pub seed: u64,
    /// profile `tau2` per replication instead of fixing it at the truth
    #[serde(default)]
    pub profile_grid: Option<GridSpec>,
}

impl SimConfig {
    /// Weibull setting with three uniform covariates and 20% censoring.
    pub fn reference_weibull(n: usize, reps: usize, seed: u64) -> Self {
        Self {
            kind: FamilyKind::Weibull,
            theta: FamilyParams::new(2.6, 1.8, 0.22, 1.14),
            beta: vec![-1.8, -4.0, 3.7, -0.2],
            tau1: 240.0,
            delta: 100.0,
            time_scale: None,
            n,
            reps,
            covariate_ranges: vec![
                CovariateRange::new("BF", 5.9, 29.9),
                CovariateRange::new("VO2", 1.9, 6.0),
                CovariateRange::new("Age", 20.0, 43.0),
            ],
            covariate_scale: CovariateScale::Unit,
            censoring: Censoring::TargetFraction { fraction: 0.2 },
            seed,
            profile_grid: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.time_scale.unwrap_or(self.tau1)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CrmError::InvalidParameter(format!("simulation config: {e}")))
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_ranges.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariate_ranges.iter().map(|c| c.name.clone()).collect()
    }

    /// Schedule on the model time scale.
    pub fn model_schedule(&self) -> Result<StressSchedule> {
        StressSchedule::with_delta(self.tau1, self.delta).map(|s| s.rescaled(self.scale()))
    }

    pub fn model(&self) -> Result<CrmModel> {
        CrmModel::new(self.kind, self.theta, self.model_schedule()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.reps == 0 {
            return Err(CrmError::InvalidParameter("n and reps must be at least 1".into()));
        }
        if !(self.scale() > 0.0) {
            return Err(CrmError::InvalidParameter("time_scale must be positive".into()));
        }
        let s = self.num_covariates();
        if !(self.beta.len() == s + 1 || (s == 0 && self.beta.is_empty())) {
            return Err(CrmError::DimensionMismatch {
                expected: s + 1,
                got: self.beta.len(),
            });
        }
        for c in &self.covariate_ranges {
            if !(c.low.is_finite() && c.high.is_finite() && c.high > c.low) {
                return Err(CrmError::InvalidParameter(format!(
                    "covariate range for {} must satisfy low < high",
                    c.name
                )));
            }
        }
        match self.censoring {
            Censoring::TargetFraction { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                return Err(CrmError::InvalidParameter(format!(
                    "target censoring fraction must be in (0, 1), got {fraction}"
                )))
            }
            Censoring::StudyEnd { time } if !(time > 0.0) => {
                return Err(CrmError::InvalidParameter(format!(
                    "study end must be positive, got {time}"
                )))
            }
            _ => {}
        }
        self.model().map(|_| ())
    }

    /// Cure probability for covariates already on the coefficient scale.
    fn cure_probability(&self, zs: &[f64]) -> f64 {
        if self.beta.is_empty() {
            return 0.0;
        }
        let eta: f64 = self.beta[0] + self.beta[1..].iter().zip(zs).map(|(b, z)| b * z).sum::<f64>();
        logistic(eta)
    }

    fn to_coefficient_scale(&self, raw: f64, j: usize) -> f64 {
        match self.covariate_scale {
            CovariateScale::Raw => raw,
            CovariateScale::Unit => {
                let c = &self.covariate_ranges[j];
                (raw - c.low) / (c.high - c.low)
            }
        }
    }

    /// `E_Z[p(beta, Z)]` on a midpoint grid over the covariate box.
    pub fn mean_cure_probability(&self) -> f64 {
        let s = self.num_covariates();
        if s == 0 {
            return self.cure_probability(&[]);
        }
        let per_dim = ((200_000f64).powf(1.0 / s as f64).floor() as usize).clamp(2, 400);
        let total = per_dim.pow(s as u32);
        let mut acc = 0.0;
        let mut zs = vec![0.0; s];
        for idx in 0..total {
            let mut rest = idx;
            for (j, z) in zs.iter_mut().enumerate() {
                let k = rest % per_dim;
                rest /= per_dim;
                let c = &self.covariate_ranges[j];
                let raw = c.low + (k as f64 + 0.5) / per_dim as f64 * (c.high - c.low);
                *z = self.to_coefficient_scale(raw, j);
            }
            acc += self.cure_probability(&zs);
        }
        acc / total as f64
    }

    /// Administrative end of study on the original time scale.
    pub fn study_end(&self) -> Result<f64> {
        match self.censoring {
            Censoring::StudyEnd { time } => Ok(time),
            Censoring::TargetFraction { fraction } => {
                let p_bar = self.mean_cure_probability();
                if !(fraction > p_bar && fraction < 1.0) {
                    return Err(CrmError::Calibration {
                        target: fraction,
                        low: p_bar,
                        high: 1.0,
                    });
                }
                // p_bar + (1 - p_bar) S0(T) = fraction
                let s0 = (fraction - p_bar) / (1.0 - p_bar);
                let t = self.model()?.cum_hazard_inverse(-s0.ln())?;
                Ok(t * self.scale())
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one subject of one replication.
pub fn subject_rng(seed: u64, rep: u64, subject: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ rep) ^ subject);
    ChaCha8Rng::seed_from_u64(key)
}

/// Susceptible lifetime with `S0(t) = 1 - u`.
pub fn sample_susceptible_time(model: &CrmModel, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(CrmError::InvalidParameter(format!(
            "uniform draw must lie in (0, 1), got {u}"
        )));
    }
    model.cum_hazard_inverse(-(-u).ln_1p())
}

/// One replication's dataset, times on the original scale.
pub fn simulate_dataset(config: &SimConfig, rep: usize) -> Result<Dataset> {
    let study_end = config.study_end()?;
    simulate_with_end(config, rep, study_end)
}

fn simulate_with_end(config: &SimConfig, rep: usize, study_end: f64) -> Result<Dataset> {
    config.validate()?;
    let model = config.model()?;
    let scale = config.scale();
    let s = config.num_covariates();
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut rng = subject_rng(config.seed, rep as u64, i as u64);
        let mut z = Vec::with_capacity(s + 1);
        z.push(1.0);
        for (j, c) in config.covariate_ranges.iter().enumerate() {
            let u: f64 = rng.random();
            z.push(config.to_coefficient_scale(c.low + u * (c.high - c.low), j));
        }
        let p = config.cure_probability(&z[1..]);
        let cured = rng.random::<f64>() < p;
        let u: f64 = rng.sample(Open01);
        let record = if cured {
            SubjectRecord::new(study_end, false, z)
        } else {
            let t = sample_susceptible_time(&model, u)? * scale;
            if t >= study_end {
                SubjectRecord::new(study_end, false, z)
            } else {
                SubjectRecord::new(t, true, z)
            }
        };
        records.push(record);
    }
    let names = if s == 0 { Vec::new() } else { config.covariate_names() };
    Dataset::new(records, names)
}

/// Estimates of one replication on the model time scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub estimates: Option<Vec<f64>>,
    pub converged: bool,
    pub censor_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n: usize,
    pub reps: usize,
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub rmse: Vec<f64>,
    /// replications whose fit returned estimates
    pub used: usize,
    /// replications whose EM hit the iteration cap or failed
    pub nonconverged: usize,
    pub failed: usize,
    pub mean_censor_fraction: f64,
    pub study_end: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta_hats: Vec<f64>,
}

impl StudySummary {
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.mean[i])
    }

    pub fn rmse_of(&self, name: &str) -> Option<f64> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.rmse[i])
    }
}

fn truth_vector(config: &SimConfig) -> (Vec<String>, Vec<f64>) {
    let mut names: Vec<String> = ["alpha1", "alpha2", "lambda1", "lambda2"].map(String::from).to_vec();
    let mut truth = config.theta.to_array().to_vec();
    let s = config.num_covariates();
    if s == 0 {
        names.push("p".into());
        truth.push(config.cure_probability(&[]));
    } else {
        names.extend((0..=s).map(|j| format!("beta{j}")));
        truth.extend(&config.beta);
    }
    (names, truth)
}

/// Simulate and fit one replication.
pub fn run_replication(config: &SimConfig, em: &EmConfig, rep: usize, study_end: f64) -> ReplicationOutcome {
    let data = match simulate_with_end(config, rep, study_end) {
        Ok(d) => d,
        Err(e) => {
            return ReplicationOutcome {
                rep,
                estimates: None,
                converged: false,
                censor_fraction: f64::NAN,
                delta_hat: None,
                error: Some(e.to_string()),
            }
        }
    };
    let censor_fraction = 1.0 - data.num_events() as f64 / data.len() as f64;
    let scaled = data.rescaled(config.scale());
    let fit = match &config.profile_grid {
        None => config
            .model_schedule()
            .and_then(|s| em_fit_named(&scaled.records, &scaled.covariate_names, &s, config.kind, em)),
        Some(grid) => grid.values().and_then(|g| {
            let g: Vec<f64> = g.iter().map(|v| v / config.scale()).collect();
            profile_fit_delta_named(
                &scaled.records,
                &scaled.covariate_names,
                config.kind,
                config.tau1 / config.scale(),
                &g,
                em,
            )
            .map(|p| p.best)
        }),
    };
    match fit {
        Ok(f) => ReplicationOutcome {
            rep,
            delta_hat: config.profile_grid.map(|_| f.schedule.delta() * config.scale()),
            estimates: Some(
                f.theta_hat
                    .to_array()
                    .iter()
                    .copied()
                    .chain(cure_estimates(&f))
                    .collect(),
            ),
            converged: f.converged,
            censor_fraction,
            error: None,
        },
        Err(e) => ReplicationOutcome {
            rep,
            estimates: None,
            converged: false,
            censor_fraction,
            delta_hat: None,
            error: Some(e.to_string()),
        },
    }
}

fn cure_estimates(f: &crate::em::FitResult) -> Vec<f64> {
    match &f.cure_hat {
        crate::model::Cure::Absent => vec![0.0],
        crate::model::Cure::Constant { p } => vec![*p],
        crate::model::Cure::Logistic(m) => m.beta.clone(),
    }
}

/// Replication study at fixed `n`; replications run in parallel and are
/// reduced in replication order.
pub fn run_study(config: &SimConfig, em: &EmConfig) -> Result<StudySummary> {
    config.validate()?;
    let study_end = config.study_end()?;
    let em = EmConfig {
        compute_se: false,
        ..em.clone()
    };
    let outcomes: Vec<ReplicationOutcome> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replication(config, &em, rep, study_end))
        .collect();
    Ok(summarize(config, study_end, &outcomes))
}

pub fn summarize(config: &SimConfig, study_end: f64, outcomes: &[ReplicationOutcome]) -> StudySummary {
    let (names, truth) = truth_vector(config);
    let k = truth.len();
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut used = 0;
    let mut nonconverged = 0;
    let mut failed = 0;
    let mut censor = 0.0;
    let mut censor_n = 0;
    let mut delta_hats = Vec::new();
    for o in outcomes {
        if o.censor_fraction.is_finite() {
            censor += o.censor_fraction;
            censor_n += 1;
        }
        if !o.converged {
            nonconverged += 1;
        }
        match &o.estimates {
            Some(est) if est.len() == k => {
                used += 1;
                for j in 0..k {
                    sum[j] += est[j];
                    sq[j] += (est[j] - truth[j]).powi(2);
                }
                if let Some(d) = o.delta_hat {
                    delta_hats.push(d);
                }
            }
            _ => failed += 1,
        }
    }
    let denom = used.max(1) as f64;
    StudySummary {
        n: config.n,
        reps: config.reps,
        parameter_names: names,
        truth,
        mean: sum.iter().map(|v| v / denom).collect(),
        rmse: sq.iter().map(|v| (v / denom).sqrt()).collect(),
        used,
        nonconverged,
        failed,
        mean_censor_fraction: censor / censor_n.max(1) as f64,
        study_end,
        delta_hats,
    }
}

/// One row per sample size: averages, then root-MSEs with an `_rmse` suffix.
pub fn write_summary_csv<W: Write>(summaries: &[StudySummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let Some(first) = summaries.first() else {
        wtr.flush()?;
        return Ok(());
    };
    let mut header = vec!["n".to_string()];
    header.extend(first.parameter_names.iter().cloned());
    header.extend(first.parameter_names.iter().map(|p| format!("{p}_rmse")));
    header.extend(["used", "nonconverged", "failed", "censor_fraction"].map(String::from));
    wtr.write_record(&header)?;
    for s in summaries {
        let mut row = vec![s.n.to_string()];
        row.extend(s.mean.iter().map(|v| format!("{v:.6}")));
        row.extend(s.rmse.iter().map(|v| format!("{v:.6}")));
        row.extend([
            s.used.to_string(),
            s.nonconverged.to_string(),
            s.failed.to_string(),
            format!("{:.4}", s.mean_censor_fraction),
        ]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
