//! CSV ingestion and export, run configuration, and fit reports.
//!
//! Input files have a header with a positive `time` column, a `status`
//! column (1 = failure observed, 0 = censored) and any number of numeric
//! covariate columns. Row numbers in error messages count the header as row 1.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::{em_fit_named, profile_fit_delta_named, EmConfig, FitResult, ProfilePoint};
use crate::error::{CrmError, Result};
use crate::hazard::FamilyKind;
use crate::inference::{run_test, TestProblem, TestReport, TestResult};
use crate::likelihood::{Dataset, SubjectRecord};
use crate::model::{population_survival, CrmModel, Cure, StressSchedule};
use crate::nonparametric::{kaplan_meier, ks_distance, KsResult};
use crate::simulation::GridSpec;

/// Read a dataset; `covariates` selects and orders covariate columns, `None` keeps all.
pub fn load_dataset(path: &Path, covariates: Option<&[String]>) -> Result<Dataset> {
    let file = File::open(path)?;
    read_dataset(file, covariates)
}

pub fn read_dataset<R: Read>(reader: R, covariates: Option<&[String]>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CrmError::Data(format!("missing required column `{name}`")))
    };
    let time_col = col("time")?;
    let status_col = col("status")?;
    let names: Vec<String> = match covariates {
        Some(sel) => sel.to_vec(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != time_col && *i != status_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_cols = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .filter(|&i| i != time_col && i != status_col)
                .ok_or_else(|| CrmError::Data(format!("covariate column `{n}` not found")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(k as u64 + 2, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let time: f64 = field(time_col)
            .parse()
            .map_err(|_| CrmError::Data(format!("row {line}: column `time` is not a number")))?;
        if !(time.is_finite() && time > 0.0) {
            return Err(CrmError::Data(format!("row {line}: time must be positive")));
        }
        let event = match field(status_col) {
            "1" => true,
            "0" => false,
            other => {
                return Err(CrmError::Data(format!(
                    "row {line}: column `status` must be 0 or 1, got `{other}`"
                )))
            }
        };
        let mut z = Vec::with_capacity(cov_cols.len() + 1);
        z.push(1.0);
        for (&c, name) in cov_cols.iter().zip(&names) {
            let v: f64 = field(c)
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CrmError::Data(format!("row {line}: column `{name}` is not a finite number")))?;
            z.push(v);
        }
        records.push(SubjectRecord::new(time, event, z));
    }
    if records.is_empty() {
        return Err(CrmError::Data("input has no data rows".into()));
    }
    Dataset::new(records, names)
}

pub fn write_dataset<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for r in &data.records {
        let mut row = vec![r.time.to_string(), if r.event { "1" } else { "0" }.to_string()];
        row.extend(r.z[1..].iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_dataset(data, File::create(path)?)
}

/// Named covariate profile for fitted-curve export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    pub name: String,
    pub values: Vec<f64>,
}

/// Profiles CSV: a `name` column plus one column per covariate, in any order.
pub fn read_profiles<R: Read>(reader: R, covariate_names: &[String]) -> Result<Vec<CovariateProfile>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let name_col = headers
        .iter()
        .position(|h| h == "name")
        .ok_or_else(|| CrmError::Data("profiles need a `name` column".into()))?;
    let cols = covariate_names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| CrmError::Data(format!("profiles lack covariate column `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(k as u64 + 2, |p| p.line());
        let values = cols
            .iter()
            .zip(covariate_names)
            .map(|(&c, n)| {
                row.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| CrmError::Data(format!("row {line}: column `{n}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(CovariateProfile {
            name: row.get(name_col).unwrap_or("").to_string(),
            values,
        });
    }
    Ok(out)
}

pub fn load_profiles(path: &Path, covariate_names: &[String]) -> Result<Vec<CovariateProfile>> {
    read_profiles(File::open(path)?, covariate_names)
}

/// Population survival of every profile on a common time grid.
/// `scale` converts the grid's original times to model times.
pub fn write_curves<W: Write>(
    model: &CrmModel,
    cure: &Cure,
    profiles: &[CovariateProfile],
    times: &[f64],
    scale: f64,
    w: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string()];
    header.extend(profiles.iter().map(|p| p.name.clone()));
    wtr.write_record(&header)?;
    let zs: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| std::iter::once(1.0).chain(p.values.iter().copied()).collect())
        .collect();
    for &t in times {
        let mut row = vec![t.to_string()];
        for z in &zs {
            row.push(population_survival(model, cure, z, t / scale)?.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_profile_curve<W: Write>(curve: &[ProfilePoint], scale: f64, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["tau2", "mll", "converged", "error"])?;
    for p in curve {
        wtr.write_record([
            (p.tau2 * scale).to_string(),
            p.mll.map_or(String::new(), |v| v.to_string()),
            p.converged.to_string(),
            p.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Everything needed to re-run a fit or profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub family: FamilyKind,
    pub tau1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// `None` keeps every covariate column
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(input: PathBuf, family: FamilyKind, tau1: f64) -> Self {
        Self {
            input,
            family,
            tau1,
            tau2: None,
            grid: None,
            covariates: None,
            normalize: true,
            em: EmConfig::default(),
            output: None,
            seed: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        if self.normalize {
            self.tau1
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grid {
            if !(g.step > 0.0) {
                return Err(CrmError::InvalidParameter("grid step must be positive".into()));
            }
        }
        if self.tau2.is_none() && self.grid.is_none() {
            return Err(CrmError::InvalidParameter(
                "either tau2 or a tau2 grid is required".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CrmError::InvalidParameter(format!("config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: RunConfig,
    /// times were divided by this before fitting
    pub scale: f64,
    pub fit: FitResult,
    /// maximized log-likelihood for times on the original scale
    pub mll_original_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<ProfilePoint>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exports: Vec<PathBuf>,
}

/// Log-likelihood shift from the fitting scale to the original scale: each
/// event density picks up a factor `1 / scale`.
pub fn mll_on_original_scale(mll: f64, num_events: usize, scale: f64) -> f64 {
    mll - num_events as f64 * scale.ln()
}

impl FitReport {
    pub fn new(config: RunConfig, fit: FitResult) -> Self {
        let scale = config.scale();
        let mll_original_scale = mll_on_original_scale(fit.mll, fit.num_events, scale);
        Self {
            config,
            scale,
            fit,
            mll_original_scale,
            ks: None,
            tests: Vec::new(),
            profile: None,
            exports: Vec::new(),
        }
    }

    /// Plain-text estimate table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let f = &self.fit;
        out.push_str(&format!(
            "family {}  tau1 {}  tau2 {}  (time scale {})\n",
            f.kind,
            f.schedule.tau1 * self.scale,
            f.schedule.tau2 * self.scale,
            self.scale
        ));
        out.push_str(&format!(
            "{:<10} {:>14} {:>14}\n",
            "parameter", "estimate", "std. error"
        ));
        for (i, name) in f.parameter_names.iter().enumerate() {
            let se = f.se.as_ref().map_or("n/a".to_string(), |s| format!("{:.6}", s[i]));
            out.push_str(&format!("{:<10} {:>14.6} {:>14}\n", name, f.estimates[i], se));
        }
        out.push_str(&format!(
            "MLL {:.4} (fitting scale), {:.4} (original scale); {} iterations, converged: {}\n",
            f.mll, self.mll_original_scale, f.iterations, f.converged
        ));
        if let Some(ks) = &self.ks {
            out.push_str(&format!("K-S distance {:.4}, p-value {:.4}\n", ks.distance, ks.p_value));
        }
        out
    }
}

/// Load the configured input, fit at `tau2` or profile over the grid, and
/// attach the K-S comparison with the Kaplan-Meier curve.
pub fn run_fit(config: &RunConfig) -> Result<FitReport> {
    config.validate()?;
    let data = load_dataset(&config.input, config.covariates.as_deref())?;
    fit_dataset(config, &data)
}

pub fn fit_dataset(config: &RunConfig, data: &Dataset) -> Result<FitReport> {
    config.validate()?;
    let scale = config.scale();
    let scaled = data.rescaled(scale);
    let mut profile = None;
    let fit = match (&config.grid, config.tau2) {
        (Some(grid), _) => {
            let values: Vec<f64> = grid.values()?.iter().map(|v| v / scale).collect();
            let res = profile_fit_delta_named(
                &scaled.records,
                &scaled.covariate_names,
                config.family,
                config.tau1 / scale,
                &values,
                &config.em,
            )?;
            profile = Some(res.curve);
            res.best
        }
        (None, Some(tau2)) => {
            let schedule = StressSchedule::new(config.tau1, tau2, None)?.rescaled(scale);
            em_fit_named(
                &scaled.records,
                &scaled.covariate_names,
                &schedule,
                config.family,
                &config.em,
            )?
        }
        (None, None) => unreachable!("validated"),
    };
    let mut report = FitReport::new(config.clone(), fit);
    if scaled.num_events() > 0 {
        let km = kaplan_meier(&scaled.records)?;
        let model = report.fit.model()?;
        report.ks = Some(ks_distance(&km, &model, &report.fit.cure_hat, &scaled.records)?);
    }
    report.profile = profile;
    Ok(report)
}

/// Likelihood-ratio test at the configured `tau2` (or the first grid value).
pub fn run_lrt(config: &RunConfig, problem: TestProblem) -> Result<TestReport> {
    let data = load_dataset(&config.input, config.covariates.as_deref())?;
    let scale = config.scale();
    let tau2 = match (config.tau2, &config.grid) {
        (Some(t), _) => t,
        (None, Some(g)) => g.start,
        (None, None) => return Err(CrmError::InvalidParameter("tau2 is required for a test".into())),
    };
    let schedule = StressSchedule::new(config.tau1, tau2, None)?.rescaled(scale);
    let scaled = data.rescaled(scale);
    run_test(
        problem,
        &scaled.records,
        &scaled.covariate_names,
        &schedule,
        config.family,
        &config.em,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_rows_in_order() {
        let text = "time,status,x\n1.5,1,0.2\n2.0,0,0.4\n3.25,1,-1\n";
        let d = read_dataset(text.as_bytes(), None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.covariate_names, vec!["x"]);
        assert_eq!(d.records[2].time, 3.25);
        assert_eq!(d.records[1].z, vec![1.0, 0.4]);
        assert!(!d.records[1].event);
    }

    #[test]
    fn zero_time_names_row() {
        let text = "time,status\n0,1\n";
        let err = read_dataset(text.as_bytes(), None).unwrap_err();
        assert_eq!(err.to_string(), "row 2: time must be positive");
    }

    #[test]
    fn bad_status_and_missing_columns() {
        let err = read_dataset("time,status\n1,2\n".as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("row 2: column `status`"), "{err}");
        let err = read_dataset("time,event\n1,1\n".as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("`status`"), "{err}");
        let sel = vec!["age".to_string()];
        let err = read_dataset("time,status,x\n1,1,2\n".as_bytes(), Some(&sel)).unwrap_err();
        assert!(err.to_string().contains("`age`"), "{err}");
    }

    #[test]
    fn dataset_round_trip() {
        let text = "time,status,a,b\n1.5,1,0.25,3\n2,0,0.5,4\n";
        let d = read_dataset(text.as_bytes(), None).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), None).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn run_config_toml() {
        let text = r#"
            input = "data.csv"
            family = "weibull"
            tau1 = 240.0
            grid = { start = 240.0, stop = 440.0, step = 5.0 }
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert!(cfg.normalize);
        assert_eq!(cfg.scale(), 240.0);
        assert_eq!(cfg.em.max_iter, 500);
        cfg.validate().unwrap();
    }

    #[test]
    fn scale_shift() {
        assert_eq!(mll_on_original_scale(-10.0, 3, 1.0), -10.0);
        let v = mll_on_original_scale(-10.0, 3, 240.0);
        assert!((v - (-10.0 - 3.0 * 240f64.ln())).abs() < 1e-12);
    }
}
