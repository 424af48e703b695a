//! Likelihood-ratio tests for nested cumulative risk models.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::em::{em_fit_named, CureForm, EmConfig, FitResult, InitialValues, ThetaConstraint};
use crate::error::{CrmError, Result};
use crate::hazard::FamilyKind;
use crate::likelihood::SubjectRecord;
use crate::model::StressSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestProblem {
    /// `alpha1 == alpha2` against a free pair
    EqualShapes,
    /// exponential lifetimes against a common non-unit shape
    Exponentiality,
    /// all covariate slopes of the cure model are zero
    CovariateSignificance,
    /// no cured fraction against `p > 0`
    CurePresence,
}

impl TestProblem {
    pub const ALL: [TestProblem; 4] = [
        TestProblem::EqualShapes,
        TestProblem::Exponentiality,
        TestProblem::CovariateSignificance,
        TestProblem::CurePresence,
    ];

    pub fn number(self) -> u8 {
        match self {
            TestProblem::EqualShapes => 1,
            TestProblem::Exponentiality => 2,
            TestProblem::CovariateSignificance => 3,
            TestProblem::CurePresence => 4,
        }
    }

    pub fn from_number(k: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.number() == k)
    }

    /// Reference distribution of `-2 (l0 - l1)` under the null.
    ///
    /// For the linear failure rate family the exponential sub-model fixes both
    /// slopes at zero and is compared with the free model, hence two degrees
    /// of freedom.
    pub fn reference(self, kind: FamilyKind, s: usize) -> Reference {
        match self {
            TestProblem::EqualShapes => Reference::ChiSq { df: 1 },
            TestProblem::Exponentiality if kind == FamilyKind::LinearFailureRate => Reference::ChiSq { df: 2 },
            TestProblem::Exponentiality => Reference::ChiSq { df: 1 },
            TestProblem::CovariateSignificance => Reference::ChiSq { df: s.max(1) },
            TestProblem::CurePresence => Reference::HalfHalfChiSq1,
        }
    }

    /// `(theta constraint, cure form)` of the (null, alternative) fits.
    pub fn models(self, kind: FamilyKind) -> [(ThetaConstraint, CureForm); 2] {
        match self {
            TestProblem::EqualShapes => [
                (ThetaConstraint::EqualShapes, CureForm::Auto),
                (ThetaConstraint::Free, CureForm::Auto),
            ],
            TestProblem::Exponentiality => {
                let alt = if kind == FamilyKind::LinearFailureRate {
                    ThetaConstraint::Free
                } else {
                    ThetaConstraint::EqualShapes
                };
                [(ThetaConstraint::Exponential, CureForm::Auto), (alt, CureForm::Auto)]
            }
            TestProblem::CovariateSignificance => [
                (ThetaConstraint::Free, CureForm::Constant),
                (ThetaConstraint::Free, CureForm::Logistic),
            ],
            TestProblem::CurePresence => [
                (ThetaConstraint::Free, CureForm::Absent),
                (ThetaConstraint::Free, CureForm::Constant),
            ],
        }
    }
}

impl fmt::Display for TestProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TestProblem::EqualShapes => "equal shapes",
            TestProblem::Exponentiality => "exponentiality",
            TestProblem::CovariateSignificance => "covariate significance",
            TestProblem::CurePresence => "cure presence",
        };
        f.write_str(s)
    }
}

impl FromStr for TestProblem {
    type Err = CrmError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if let Ok(k) = t.parse::<u8>() {
            return Self::from_number(k)
                .ok_or_else(|| CrmError::InvalidParameter(format!("unknown test problem {k}; expected 1-4")));
        }
        match t.replace(['-', ' '], "_").as_str() {
            "equal_shapes" => Ok(TestProblem::EqualShapes),
            "exponentiality" | "exponential" => Ok(TestProblem::Exponentiality),
            "covariate_significance" | "covariates" => Ok(TestProblem::CovariateSignificance),
            "cure_presence" | "cure" => Ok(TestProblem::CurePresence),
            _ => Err(CrmError::InvalidParameter(format!("unknown test problem '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reference {
    ChiSq {
        df: usize,
    },
    /// equal mixture of a point mass at zero and a chi-square with one degree of freedom
    HalfHalfChiSq1,
}

impl Reference {
    pub fn p_value(self, w: f64) -> f64 {
        match self {
            Reference::ChiSq { df } => chi_square_sf(w, df),
            Reference::HalfHalfChiSq1 => {
                if w > 0.0 {
                    0.5 * chi_square_sf(w, 1)
                } else {
                    1.0
                }
            }
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::ChiSq { df } => write!(f, "chi2({df})"),
            Reference::HalfHalfChiSq1 => f.write_str("0.5 + 0.5 chi2(1)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub problem: TestProblem,
    pub statistic: f64,
    pub reference: Reference,
    pub p_value: f64,
    pub l0: f64,
    pub l1: f64,
    /// set when `l1 < l0 - 1e-8` and the statistic was clipped to zero
    pub clipped: bool,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(w: f64, df: usize) -> f64 {
    if !(w > 0.0) {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    dist.sf(w).clamp(0.0, 1.0)
}

/// Test using the reference distribution of the Weibull and generalized
/// exponential families; see [`lrt_for`] for the linear failure rate family.
pub fn lrt(problem: TestProblem, l0: f64, l1: f64, s: usize) -> TestResult {
    lrt_with(problem, problem.reference(FamilyKind::Weibull, s), l0, l1)
}

pub fn lrt_for(problem: TestProblem, kind: FamilyKind, l0: f64, l1: f64, s: usize) -> TestResult {
    lrt_with(problem, problem.reference(kind, s), l0, l1)
}

fn lrt_with(problem: TestProblem, reference: Reference, l0: f64, l1: f64) -> TestResult {
    let raw = -2.0 * (l0 - l1);
    let clipped = l1 < l0 - 1e-8;
    let statistic = raw.max(0.0);
    TestResult {
        problem,
        statistic,
        reference,
        p_value: reference.p_value(statistic),
        l0,
        l1,
        clipped,
    }
}

fn check_applicable(problem: TestProblem, s: usize) -> Result<()> {
    if problem == TestProblem::CovariateSignificance && s == 0 {
        return Err(CrmError::Inapplicable {
            problem: problem.to_string(),
            reason: "the records carry no covariates".into(),
        });
    }
    Ok(())
}

fn fit_side(
    problem: TestProblem,
    side: usize,
    records: &[SubjectRecord],
    names: &[String],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<FitResult> {
    fit_side_from(problem, side, records, names, schedule, kind, config, None)
}

#[allow(clippy::too_many_arguments)]
fn fit_side_from(
    problem: TestProblem,
    side: usize,
    records: &[SubjectRecord],
    names: &[String],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
    init: Option<InitialValues>,
) -> Result<FitResult> {
    let s = records.first().map_or(0, |r| r.z.len().saturating_sub(1));
    check_applicable(problem, s)?;
    let (constraint, form) = problem.models(kind)[side];
    // the cure-presence alternative is the covariate-free cure model
    let cfg = EmConfig { init, ..config.clone() }
        .with_constraint(constraint)
        .with_cure_form(form);
    em_fit_named(records, names, schedule, kind, &cfg)
}

/// Fit under the null hypothesis of `problem`.
pub fn fit_restricted(
    problem: TestProblem,
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<FitResult> {
    fit_side(problem, 0, records, &[], schedule, kind, config)
}

/// Fit under the alternative hypothesis of `problem`.
pub fn fit_unrestricted(
    problem: TestProblem,
    records: &[SubjectRecord],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<FitResult> {
    fit_side(problem, 1, records, &[], schedule, kind, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub result: TestResult,
    /// the restricted fit beat the unrestricted EM run, so the alternative's
    /// supremum is taken at the nested null model
    pub alternative_at_null: bool,
    pub restricted: FitResult,
    pub unrestricted: FitResult,
}

/// Fit both models concurrently and compute the test.
pub fn run_test(
    problem: TestProblem,
    records: &[SubjectRecord],
    covariate_names: &[String],
    schedule: &StressSchedule,
    kind: FamilyKind,
    config: &EmConfig,
) -> Result<TestReport> {
    let (restricted, unrestricted) = rayon::join(
        || fit_side(problem, 0, records, covariate_names, schedule, kind, config),
        || fit_side(problem, 1, records, covariate_names, schedule, kind, config),
    );
    let mut restricted = restricted?;
    let unrestricted = unrestricted?;
    // second start for the null fit at the projected alternative estimate
    let init = InitialValues {
        theta: unrestricted.theta_hat,
        cure: restricted.cure_hat.clone(),
    };
    if let Ok(again) = fit_side_from(problem, 0, records, covariate_names, schedule, kind, config, Some(init)) {
        if again.mll > restricted.mll {
            restricted = again;
        }
    }
    let s = records.first().map_or(0, |r| r.z.len().saturating_sub(1));
    let alternative_at_null = restricted.mll > unrestricted.mll;
    let l1 = unrestricted.mll.max(restricted.mll);
    let result = lrt_for(problem, kind, restricted.mll, l1, s);
    Ok(TestReport {
        result,
        alternative_at_null,
        restricted,
        unrestricted,
    })
}
