//! Kaplan-Meier estimation and Kolmogorov-Smirnov distance to a fitted
//! population survival curve.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CrmError, Result};
use crate::likelihood::SubjectRecord;
use crate::model::{population_survival, CrmModel, Cure};

/// Right-continuous step survival function starting at 1 at time 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvival {
    /// distinct event times, increasing
    pub times: Vec<f64>,
    /// survival just after each time
    pub values: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    /// tie convention: censored records tied with an event stay at risk for it
    pub tie_rule: String,
}

impl StepSurvival {
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit `S(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.events.iter().sum()
    }

    /// Largest drop of the curve.
    pub fn max_step(&self) -> f64 {
        let mut prev = 1.0;
        let mut best: f64 = 0.0;
        for &v in &self.values {
            best = best.max(prev - v);
            prev = v;
        }
        best
    }

    /// Two-column `time,survival` CSV including the starting point at 0.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["time", "survival"])?;
        wtr.write_record(["0", "1"])?;
        for (t, s) in self.times.iter().zip(&self.values) {
            wtr.write_record([t.to_string(), s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn kaplan_meier(records: &[SubjectRecord]) -> Result<StepSurvival> {
    if records.is_empty() {
        return Err(CrmError::Data("Kaplan-Meier needs at least one record".into()));
    }
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.time, r.event)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = sorted.len();
    let mut out = StepSurvival {
        times: Vec::new(),
        values: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        tie_rule: "censored after events at tied times".into(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        let mut j = i;
        let mut d = 0;
        while j < n && sorted[j].0 == t {
            d += usize::from(sorted[j].1);
            j += 1;
        }
        if d > 0 {
            let r = n - i;
            s *= 1.0 - d as f64 / r as f64;
            out.times.push(t);
            out.values.push(s);
            out.at_risk.push(r);
            out.events.push(d);
        }
        i = j;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub distance: f64,
    pub p_value: f64,
    /// time at which the supremum is attained
    pub at_time: f64,
    /// number of events, used as the sample size of the asymptotic law
    pub effective_n: usize,
    pub method: String,
}

/// Distance between the KM curve and a continuous fitted survival, checked at
/// both one-sided limits of every jump.
pub fn ks_distance_fn(km: &StepSurvival, fitted: impl Fn(f64) -> Result<f64>) -> Result<KsResult> {
    let m = km.num_events();
    if m == 0 {
        return Err(CrmError::Data(
            "Kolmogorov-Smirnov distance needs at least one event".into(),
        ));
    }
    let mut d: f64 = 0.0;
    let mut at = km.times[0];
    let mut prev = 1.0;
    for (&t, &v) in km.times.iter().zip(&km.values) {
        let f = fitted(t)?;
        let gap = (prev - f).abs().max((v - f).abs());
        if gap > d {
            d = gap;
            at = t;
        }
        prev = v;
    }
    let d = d.clamp(0.0, 1.0);
    Ok(KsResult {
        distance: d,
        p_value: kolmogorov_sf((m as f64).sqrt() * d),
        at_time: at,
        effective_n: m,
        method: "KM jump points, both one-sided limits; asymptotic Kolmogorov law with n = events".into(),
    })
}

/// Distance to the fitted population survival averaged over the subjects'
/// covariate profiles.
pub fn ks_distance(km: &StepSurvival, model: &CrmModel, cure: &Cure, records: &[SubjectRecord]) -> Result<KsResult> {
    ks_distance_fn(km, |t| average_population_survival(model, cure, records, t))
}

/// `(1/n) sum_i S(t | z_i)`; with a constant or absent cure the covariates are irrelevant.
pub fn average_population_survival(model: &CrmModel, cure: &Cure, records: &[SubjectRecord], t: f64) -> Result<f64> {
    match cure {
        Cure::Logistic(_) => {
            let mut acc = 0.0;
            for r in records {
                acc += population_survival(model, cure, &r.z, t)?;
            }
            Ok(acc / records.len().max(1) as f64)
        }
        _ => population_survival(model, cure, &[1.0], t),
    }
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x < 1.18 {
        // theta-function form of the CDF converges fast for small x
        let c = std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let mut sum = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            sum += (-j * j * c).exp();
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / x * sum;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * x * x).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}
