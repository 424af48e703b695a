//! Cumulative risk model for simple step-stress life tests with a cured
//! fraction: hazard families, likelihood, EM estimation, likelihood-ratio
//! tests, nonparametric goodness of fit, and Monte Carlo simulation.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod hazard;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod nonparametric;
pub mod optim;
pub mod simulation;

pub use em::{
    em_fit, em_fit_named, profile_fit_delta, profile_fit_delta_named, CureForm, EmConfig, FitResult, InnerOptimizer,
    ProfileResult, ThetaConstraint,
};
pub use error::{CrmError, Result};
pub use hazard::{FamilyKind, FamilyParams, SegmentParams};
pub use inference::{lrt, run_test, TestProblem, TestResult};
pub use likelihood::{log_likelihood, Dataset, SubjectRecord};
pub use model::{CrmModel, Cure, CureModel, StressSchedule};
pub use nonparametric::{kaplan_meier, ks_distance, StepSurvival};
pub use simulation::{run_study, simulate_dataset, SimConfig, StudySummary};
