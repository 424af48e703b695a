use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crm_cure::inference::lrt_for;
use crm_cure::io::{
    fit_dataset, load_dataset, load_profiles, run_lrt, save_dataset, write_curves, write_profile_curve, FitReport,
    RunConfig,
};
use crm_cure::simulation::{run_study, simulate_dataset, write_summary_csv, GridSpec, SimConfig};
use crm_cure::{kaplan_meier, CrmError, EmConfig, FamilyKind, TestProblem};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "crm",
    version,
    about = "Cumulative risk models with a cure fraction for step-stress data"
)]
struct Cli {
    /// seed recorded in reports; overrides the simulation config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads for profile and simulation runs
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// fit on the original time scale instead of dividing times by tau1
    #[arg(long, global = true)]
    no_normalize: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FitArgs {
    /// run config: TOML, or JSON holding a run config or a fit report
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// weibull, lfr or ge
    #[arg(long)]
    family: Option<FamilyKind>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// comma-separated covariate columns, all non-required columns by default; "" selects none
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// write the JSON report here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit at a fixed tau2
    Fit(FitArgs),
    /// Profile tau2 over a grid and report the best fit
    Profile {
        #[command(flatten)]
        fit: FitArgs,
        /// start:stop[:step], step defaults to 5
        #[arg(long)]
        tau2_grid: Option<String>,
        /// profile curve CSV
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Likelihood-ratio test, fitting both models or from a given MLL pair
    Test {
        #[command(flatten)]
        fit: FitArgs,
        /// 1-4 or a name (equal-shapes, exponential, covariates, cure)
        #[arg(long)]
        problem: TestProblem,
        /// restricted MLL; skips fitting when given with --mll1
        #[arg(long, requires = "mll1", allow_hyphen_values = true)]
        mll0: Option<f64>,
        #[arg(long, requires = "mll0", allow_hyphen_values = true)]
        mll1: Option<f64>,
        /// covariate count for the covariate test when MLLs are given
        #[arg(long, default_value_t = 0)]
        num_covariates: usize,
    },
    /// Simulate datasets and/or run a Monte Carlo study
    Simulate {
        /// simulation config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// write one dataset CSV per replication into this directory
        #[arg(long)]
        datasets: Option<PathBuf>,
        /// study summary CSV; stdout when neither output is given
        #[arg(long)]
        summary: Option<PathBuf>,
        /// comma-separated sample sizes overriding the config
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Kaplan-Meier step function as CSV
    Km {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fitted population survival at covariate profiles
    Curves {
        #[command(flatten)]
        fit: FitArgs,
        /// CSV with a `name` column and one column per covariate
        #[arg(long)]
        profiles: PathBuf,
        /// fit report JSON to reuse instead of refitting
        #[arg(long)]
        report: Option<PathBuf>,
        /// start:stop[:step] on the original time scale
        #[arg(long)]
        times: Option<String>,
        /// curves CSV; stdout by default
        #[arg(long)]
        curves_output: Option<PathBuf>,
    },
}

fn exit_code(e: &CrmError) -> u8 {
    match e {
        CrmError::InvalidParameter(_) | CrmError::InvalidSchedule(_) | CrmError::Inapplicable { .. } => 1,
        CrmError::Data(_)
        | CrmError::Io(_)
        | CrmError::Csv(_)
        | CrmError::Json(_)
        | CrmError::InsufficientData { .. }
        | CrmError::DimensionMismatch { .. } => 2,
        CrmError::Evaluation { .. }
        | CrmError::NoBridge
        | CrmError::Optimizer { .. }
        | CrmError::BetaNonConvergence { .. }
        | CrmError::ProfileFailed { .. }
        | CrmError::Calibration { .. } => 3,
    }
}

fn error_kind(code: u8) -> &'static str {
    match code {
        1 => "usage",
        2 => "data",
        _ => "numerical",
    }
}

fn report_error(code: u8, message: &str) -> ExitCode {
    let body = json!({ "error": error_kind(code), "exit_code": code, "message": message });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn usage(msg: impl Into<String>) -> CrmError {
    CrmError::InvalidParameter(msg.into())
}

fn parse_grid(text: &str) -> Result<GridSpec, CrmError> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad grid `{text}`")));
    match parts.as_slice() {
        [a, b] => Ok(GridSpec {
            start: num(a)?,
            stop: num(b)?,
            step: 5.0,
        }),
        [a, b, c] => Ok(GridSpec {
            start: num(a)?,
            stop: num(b)?,
            step: num(c)?,
        }),
        _ => Err(usage(format!("grid `{text}` must be start:stop[:step]"))),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, CrmError> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let inner = value.get("config").cloned().unwrap_or(value);
        Ok(serde_json::from_value(inner)?)
    } else {
        RunConfig::from_toml(&text)
    }
}

fn build_config(args: &FitArgs, cli: &Cli) -> Result<RunConfig, CrmError> {
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => {
            let input = args
                .input
                .clone()
                .ok_or_else(|| usage("--input is required without --config"))?;
            let family = args
                .family
                .ok_or_else(|| usage("--family is required without --config"))?;
            let tau1 = args.tau1.ok_or_else(|| usage("--tau1 is required without --config"))?;
            RunConfig::new(input, family, tau1)
        }
    };
    if let Some(v) = &args.input {
        config.input = v.clone();
    }
    if let Some(v) = args.family {
        config.family = v;
    }
    if let Some(v) = args.tau1 {
        config.tau1 = v;
    }
    if let Some(v) = args.tau2 {
        config.tau2 = Some(v);
        config.grid = None;
    }
    if let Some(v) = &args.covariates {
        config.covariates = Some(v.iter().filter(|c| !c.is_empty()).cloned().collect());
    }
    if let Some(v) = &args.output {
        config.output = Some(v.clone());
    }
    if cli.no_normalize {
        config.normalize = false;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn fit_report(config: &RunConfig) -> Result<FitReport, CrmError> {
    config.validate()?;
    let data = load_dataset(&config.input, config.covariates.as_deref())?;
    fit_dataset(config, &data)
}

fn emit_report(report: &FitReport) -> Result<(), CrmError> {
    let text = serde_json::to_string_pretty(report)?;
    match &report.config.output {
        Some(path) => {
            fs::write(path, text + "\n")?;
            print_stdout(&report.table())?;
        }
        None => {
            print_stdout(&(text + "\n"))?;
            eprint!("{}", report.table());
        }
    }
    Ok(())
}

/// A closed pipe on stdout (`crm ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<(), CrmError> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn broken_pipe(e: &CrmError) -> bool {
    match e {
        CrmError::Io(io) => io.kind() == io::ErrorKind::BrokenPipe,
        CrmError::Csv(c) => matches!(c.kind(), csv::ErrorKind::Io(io) if io.kind() == io::ErrorKind::BrokenPipe),
        _ => false,
    }
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>, CrmError> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: &Cli) -> Result<(), CrmError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("threads: {e}")))?;
    }
    match &cli.command {
        Command::Fit(args) => {
            let config = build_config(args, cli)?;
            if config.tau2.is_none() && config.grid.is_none() {
                return Err(usage("fit needs --tau2"));
            }
            emit_report(&fit_report(&config)?)
        }
        Command::Profile { fit, tau2_grid, curve } => {
            let mut config = build_config(fit, cli)?;
            if let Some(g) = tau2_grid {
                config.grid = Some(parse_grid(g)?);
                config.tau2 = None;
            }
            if config.grid.is_none() {
                return Err(usage("profile needs --tau2-grid"));
            }
            let mut report = fit_report(&config)?;
            if let (Some(path), Some(points)) = (curve, &report.profile) {
                write_profile_curve(points, report.scale, File::create(path)?)?;
                report.exports.push(path.clone());
            }
            emit_report(&report)
        }
        Command::Test {
            fit,
            problem,
            mll0,
            mll1,
            num_covariates,
        } => {
            let value = if let (Some(l0), Some(l1)) = (mll0, mll1) {
                let kind = fit.family.unwrap_or(FamilyKind::Weibull);
                json!({ "result": lrt_for(*problem, kind, *l0, *l1, *num_covariates), "alternative_at_null": false })
            } else {
                let config = build_config(fit, cli)?;
                let r = run_lrt(&config, *problem)?;
                json!({
                    "result": r.result,
                    "alternative_at_null": r.alternative_at_null,
                    "restricted": r.restricted,
                    "unrestricted": r.unrestricted,
                })
            };
            let text = serde_json::to_string_pretty(&value)?;
            match &fit.output {
                Some(p) => fs::write(p, text + "\n")?,
                None => print_stdout(&(text + "\n"))?,
            }
            Ok(())
        }
        Command::Simulate {
            config,
            datasets,
            summary,
            n,
            reps,
        } => {
            let mut base = SimConfig::from_toml(&fs::read_to_string(config)?)?;
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            if let Some(r) = reps {
                base.reps = *r;
            }
            let sizes = n.clone().unwrap_or_else(|| vec![base.n]);
            if let Some(dir) = datasets {
                fs::create_dir_all(dir)?;
                for &size in &sizes {
                    let cfg = SimConfig {
                        n: size,
                        ..base.clone()
                    };
                    for rep in 0..cfg.reps {
                        let d = simulate_dataset(&cfg, rep)?;
                        let path = dir.join(format!("n{size}_rep{:04}.csv", rep + 1));
                        save_dataset(&d, &path)?;
                    }
                }
            }
            if summary.is_some() || datasets.is_none() {
                let em = EmConfig {
                    compute_se: false,
                    ..Default::default()
                };
                let mut out = Vec::new();
                for &size in &sizes {
                    out.push(run_study(
                        &SimConfig {
                            n: size,
                            ..base.clone()
                        },
                        &em,
                    )?);
                }
                write_summary_csv(&out, writer(summary.as_deref())?)?;
            }
            Ok(())
        }
        Command::Km { input, output } => {
            let data = load_dataset(input, Some(&[]))?;
            kaplan_meier(&data.records)?.write_csv(writer(output.as_deref())?)
        }
        Command::Curves {
            fit,
            profiles,
            report,
            times,
            curves_output,
        } => {
            let report = match report {
                Some(path) => serde_json::from_str::<FitReport>(&fs::read_to_string(path)?)?,
                None => {
                    let config = build_config(fit, cli)?;
                    fit_report(&config)?
                }
            };
            let model = report.fit.model()?;
            let names = report.fit.cure_hat.covariate_names();
            let profiles = load_profiles(profiles, &names)?;
            let grid = match times {
                Some(t) => parse_grid(t)?,
                None => GridSpec {
                    start: 0.0,
                    stop: 1.5 * report.fit.schedule.tau2 * report.scale,
                    step: 5.0,
                },
            };
            write_curves(
                &model,
                &report.fit.cure_hat,
                &profiles,
                &grid.values()?,
                report.scale,
                writer(curves_output.as_deref())?,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report_error(1, e.to_string().trim());
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => report_error(exit_code(&e), &e.to_string()),
    }
}
