//! Observed-data log-likelihood, the E-step, and the pseudo log-likelihood
//! the M-step maximizes.
//!
//! Records are split into events before or at `tau1` (I1), events inside the
//! lag `(tau1, tau2)` (I2), events at or after `tau2` (I3) and censored records
//! at any time (I4). Events contribute `ln(1 - p) + ln f0(t)`, censored records
//! `ln(p + (1 - p) S0(t))`.

use serde::{Deserialize, Serialize};

use crate::error::{CrmError, Result};
use crate::hazard::{FamilyKind, FamilyParams};
use crate::model::{CrmModel, Cure, StressSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub time: f64,
    /// `true` when the failure was observed
    pub event: bool,
    /// covariates with a leading 1
    pub z: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(time: f64, event: bool, z: Vec<f64>) -> Self {
        Self { time, event, z }
    }

    /// Record without covariates.
    pub fn plain(time: f64, event: bool) -> Self {
        Self {
            time,
            event,
            z: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let width = covariate_names.len() + 1;
        for (i, r) in records.iter().enumerate() {
            if !(r.time.is_finite() && r.time > 0.0) {
                return Err(CrmError::Data(format!(
                    "record {i}: time must be positive, got {}",
                    r.time
                )));
            }
            if r.z.len() != width || r.z[0] != 1.0 {
                return Err(CrmError::Data(format!(
                    "record {i}: covariate vector must have {width} entries with a leading 1"
                )));
            }
            if r.z.iter().any(|v| !v.is_finite()) {
                return Err(CrmError::Data(format!("record {i}: covariates must be finite")));
            }
        }
        Ok(Self {
            records,
            covariate_names,
        })
    }

    pub fn from_times(times: &[f64], events: &[bool]) -> Result<Self> {
        let records = times
            .iter()
            .zip(events)
            .map(|(&t, &e)| SubjectRecord::plain(t, e))
            .collect();
        Self::new(records, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn num_events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    /// Times divided by `scale`; covariates untouched.
    pub fn rescaled(&self, scale: f64) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord {
                time: r.time / scale,
                ..r.clone()
            })
            .collect();
        Self {
            records,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Keep only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .map(|p| p + 1)
                    .ok_or_else(|| CrmError::Data(format!("unknown covariate `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut z = Vec::with_capacity(idx.len() + 1);
                z.push(1.0);
                z.extend(idx.iter().map(|&j| r.z[j]));
                SubjectRecord {
                    time: r.time,
                    event: r.event,
                    z,
                }
            })
            .collect();
        Ok(Self {
            records,
            covariate_names: names.to_vec(),
        })
    }

    pub fn without_covariates(&self) -> Self {
        self.select_covariates(&[]).expect("empty selection is always valid")
    }
}

/// Index sets of the likelihood decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub i1: Vec<usize>,
    pub i2: Vec<usize>,
    pub i3: Vec<usize>,
    pub i4: Vec<usize>,
}

impl Partition {
    pub fn n1(&self) -> usize {
        self.i1.len()
    }
    pub fn n2(&self) -> usize {
        self.i2.len()
    }
    pub fn n3(&self) -> usize {
        self.i3.len()
    }
    pub fn n4(&self) -> usize {
        self.i4.len()
    }
    /// number of observed failures
    pub fn m(&self) -> usize {
        self.i1.len() + self.i2.len() + self.i3.len()
    }
    pub fn n(&self) -> usize {
        self.m() + self.i4.len()
    }

    pub fn events(&self) -> impl Iterator<Item = usize> + '_ {
        self.i1.iter().chain(&self.i2).chain(&self.i3).copied()
    }
}

pub fn partition(records: &[SubjectRecord], schedule: &StressSchedule) -> Partition {
    let mut p = Partition::default();
    for (i, r) in records.iter().enumerate() {
        if !r.event {
            p.i4.push(i);
        } else if r.time <= schedule.tau1 {
            p.i1.push(i);
        } else if r.time < schedule.tau2 {
            p.i2.push(i);
        } else {
            p.i3.push(i);
        }
    }
    p
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `0 * ln 0 = 0`
fn weighted_ln(w: f64, ln_v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * ln_v
    }
}

/// `ln(p + (1 - p) S0(t))` for a censored record.
pub fn ln_censored_term(model: &CrmModel, cure: &Cure, record: &SubjectRecord) -> Result<f64> {
    let (ln_p, ln_q) = cure.ln_probabilities(&record.z)?;
    let h = model.cum_hazard(record.time)?;
    Ok(ln_add_exp(ln_p, ln_q - h))
}

/// `ln(1 - p) + ln f0(t)` for an event.
pub fn ln_event_term(model: &CrmModel, cure: &Cure, record: &SubjectRecord) -> Result<f64> {
    let (_, ln_q) = cure.ln_probabilities(&record.z)?;
    Ok(ln_q + model.ln_density(record.time)?)
}

/// Observed-data log-likelihood for a fixed model.
pub fn model_log_likelihood(model: &CrmModel, cure: &Cure, records: &[SubjectRecord]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        total += if r.event {
            ln_event_term(model, cure, r)?
        } else {
            ln_censored_term(model, cure, r)?
        };
    }
    Ok(total)
}

/// Observed-data log-likelihood; `-inf` when an event has zero density.
pub fn log_likelihood(
    theta: &FamilyParams,
    cure: &Cure,
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
) -> Result<f64> {
    let model = CrmModel::new(kind, *theta, *schedule)?;
    model_log_likelihood(&model, cure, records)
}

/// Posterior cure/susceptible probabilities `(w1, w2)` given survival to `t`.
pub fn e_step_weights(model: &CrmModel, cure: &Cure, t: f64, z: &[f64]) -> Result<(f64, f64)> {
    let (ln_p, ln_q) = cure.ln_probabilities(z)?;
    let h = model.cum_hazard(t)?;
    let denom = ln_add_exp(ln_p, ln_q - h);
    let w1 = if ln_p == f64::NEG_INFINITY {
        0.0
    } else {
        (ln_p - denom).exp().min(1.0)
    };
    Ok((w1, 1.0 - w1))
}

/// `w1 = p / (p + (1 - p) S0)` from plain probabilities.
pub fn cure_weight(p: f64, s0: f64) -> (f64, f64) {
    let denom = p + (1.0 - p) * s0;
    let w1 = if p == 0.0 {
        0.0
    } else if denom <= 0.0 {
        1.0
    } else {
        (p / denom).min(1.0)
    };
    (w1, 1.0 - w1)
}

/// E-step output: `w1` for each record of I4, in the partition's order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmWeights {
    pub w1: Vec<f64>,
}

impl EmWeights {
    pub fn compute(model: &CrmModel, cure: &Cure, records: &[SubjectRecord], part: &Partition) -> Result<Self> {
        let w1 = part
            .i4
            .iter()
            .map(|&i| e_step_weights(model, cure, records[i].time, &records[i].z).map(|w| w.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { w1 })
    }

    pub fn w2(&self, k: usize) -> f64 {
        1.0 - self.w1[k]
    }
}

/// Cure part of the pseudo log-likelihood: a logistic log-likelihood with
/// label "susceptible" for events and fractional labels for censored records.
pub fn g1(cure: &Cure, records: &[SubjectRecord], part: &Partition, weights: &EmWeights) -> Result<f64> {
    let mut total = 0.0;
    for i in part.events() {
        total += cure.ln_probabilities(&records[i].z)?.1;
    }
    for (k, &i) in part.i4.iter().enumerate() {
        let (ln_p, ln_q) = cure.ln_probabilities(&records[i].z)?;
        total += weighted_ln(weights.w1[k], ln_p) + weighted_ln(weights.w2(k), ln_q);
    }
    Ok(total)
}

/// Sum of event log-densities.
pub fn g3(model: &CrmModel, records: &[SubjectRecord], part: &Partition) -> Result<f64> {
    let mut total = 0.0;
    for i in part.events() {
        total += model.ln_density(records[i].time)?;
    }
    Ok(total)
}

/// Lifetime part of the pseudo log-likelihood: `g3 + sum_I4 w2 ln S0(t)`.
pub fn g2(model: &CrmModel, records: &[SubjectRecord], part: &Partition, weights: &EmWeights) -> Result<f64> {
    let mut total = g3(model, records, part)?;
    for (k, &i) in part.i4.iter().enumerate() {
        let w2 = weights.w2(k);
        if w2 != 0.0 {
            total -= w2 * model.cum_hazard(records[i].time)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLogLik {
    pub g1: f64,
    pub g2: f64,
}

impl PseudoLogLik {
    pub fn total(&self) -> f64 {
        self.g1 + self.g2
    }
}

/// Pseudo log-likelihood at `(theta, cure)` with E-step weights taken at `(theta_k, cure_k)`.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_loglik(
    theta: &FamilyParams,
    cure: &Cure,
    theta_k: &FamilyParams,
    cure_k: &Cure,
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
) -> Result<PseudoLogLik> {
    let part = partition(records, schedule);
    let model_k = CrmModel::new(kind, *theta_k, *schedule)?;
    let weights = EmWeights::compute(&model_k, cure_k, records, &part)?;
    let model = CrmModel::new(kind, *theta, *schedule)?;
    Ok(PseudoLogLik {
        g1: g1(cure, records, &part, &weights)?,
        g2: g2(&model, records, &part, &weights)?,
    })
}
