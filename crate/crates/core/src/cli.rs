//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{fit_method, Hyper, Method};
use crate::error::{Error, ErrorKind, Result};
use crate::io::{
    export_path_diagram, load_csv_dataset, read_replications, save_model, summarize, write_cv_surface,
    write_replications, write_summary, CsvOptions, LoadedData, ModelArtifact,
};
use crate::model_selection::{cross_validate_and_fit, CvGrid, DEFAULT_FOLDS};
use crate::simulation::{run_scenario, ScenarioSpec, SimulationPlan, Tuning};
use crate::types::{FitConfig, TreatmentCoding};
use crate::weights::{weights_for, PropensitySource};

#[derive(Debug, Parser)]
#[command(name = "rrhte", version, about = "Robust sparse reduced-rank estimation of treatment effects on multiple outcomes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model at fixed tuning parameters.
    Fit(FitArgs),
    /// Cross-validate over a grid, then refit the selected point.
    Cv(CvArgs),
    /// Run seeded simulation replications for one scenario.
    Simulate(SimulateArgs),
    /// Summarize a replication table by median and interquartile range.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Coding {
    /// Arms coded +1 / -1.
    Pm1,
    /// Arms coded 1 / 0.
    #[value(name = "01")]
    ZeroOne,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Propensity {
    Rct,
    Known,
    Logistic,
}

impl From<Propensity> for PropensitySource {
    fn from(p: Propensity) -> PropensitySource {
        match p {
            Propensity::Rct => PropensitySource::RctHalf,
            Propensity::Known => PropensitySource::Known,
            Propensity::Logistic => PropensitySource::LogisticFit,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Covariate CSV (with header), including the treatment column.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Outcome CSV (with header), rows aligned with the covariates.
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Name of the treatment column in the covariate file.
    #[arg(long, default_value = "arm")]
    pub treatment: String,
    #[arg(long, value_enum, default_value = "pm1")]
    pub coding: Coding,
    /// Do not prepend an intercept column.
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, value_enum, default_value = "rct")]
    pub propensity: Propensity,
    /// Column of known propensities (required with --propensity known).
    #[arg(long)]
    pub propensity_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value = "wmcmr4")]
    pub method: String,
    /// Relative objective-decrease threshold of the outer loop.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub inner_tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 100)]
    pub max_inner: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra random initializations.
    #[arg(long, default_value_t = 0)]
    pub restarts: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Outlier penalty; omit to disable the outlier block.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Path-diagram file to write (reduced-rank methods only).
    #[arg(long)]
    pub diagram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Comma-separated lambda values; default is a data-dependent grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated phi values; default is a data-dependent grid.
    #[arg(long, value_delimiter = ',')]
    pub phis: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// CSV of the loss surface (lambda, phi, rank, fold, loss).
    #[arg(long)]
    pub surface: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub diagram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML, keys named after the scenario fields).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated methods; default is all five.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use fixed tuning parameters instead of cross-validation.
    #[arg(long)]
    pub no_cv: bool,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub phi: Option<f64>,
    /// Fixed rank; defaults to the scenario's true rank.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// Points per penalty axis of the cross-validation grid.
    #[arg(long, default_value_t = crate::model_selection::DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[arg(long, default_value_t = crate::model_selection::DEFAULT_MAX_RANK)]
    pub max_rank: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn load(args: &DataArgs) -> Result<LoadedData> {
    let coding = match args.coding {
        Coding::Pm1 => TreatmentCoding::PlusMinusOne,
        Coding::ZeroOne => TreatmentCoding::ZeroOne,
    };
    if matches!(args.propensity, Propensity::Known) && args.propensity_column.is_none() {
        return Err(Error::InvalidConfig("--propensity known needs --propensity-column".into()));
    }
    load_csv_dataset(
        &args.covariates,
        &args.outcomes,
        &CsvOptions {
            treatment_column: args.treatment.clone(),
            coding,
            add_intercept: !args.no_intercept,
            propensity_column: args.propensity_column.clone(),
        },
    )
}

fn fit_config(s: &SolverArgs) -> Result<FitConfig> {
    let cfg = FitConfig {
        outer_tol: s.tol,
        inner_tol: s.inner_tol,
        max_outer: s.max_iter,
        max_inner: s.max_inner,
        seed: s.seed,
        restarts: s.restarts,
        ..FitConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn positive_phi(phi: Option<f64>) -> Result<f64> {
    match phi {
        Some(v) if !(v > 0.0) => Err(Error::InvalidConfig(format!("phi must be positive, got {v}"))),
        Some(v) => Ok(v),
        None => Ok(f64::INFINITY),
    }
}

fn write_outputs(
    data: &LoadedData,
    model: &crate::baselines::BaselineModel,
    art: &ModelArtifact,
    out: &Path,
    diagram: Option<&PathBuf>,
) -> Result<()> {
    save_model(art, out)?;
    if let Some(path) = diagram {
        let factor = model.factor.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("method {} has no factorization to draw", model.method))
        })?;
        export_path_diagram(factor, &data.covariate_names, &data.outcome_names, path)?;
    }
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let method: Method = args.solver.method.parse()?;
    let cfg = fit_config(&args.solver)?;
    if args.rank == 0 {
        return Err(Error::InvalidConfig("rank must be positive".into()));
    }
    if args.diagram.is_some() && !method.uses_rank() {
        return Err(Error::InvalidConfig(format!("method {method} has no factorization to draw")));
    }
    let hyper = Hyper {
        lambda: args.lambda,
        phi: positive_phi(args.phi)?,
        rank: args.rank,
    };
    let data = load(&args.data)?;
    let source = args.data.propensity.into();
    let a = weights_for(source, &data.dataset)?;
    let model = fit_method(method, &data.dataset, &a, hyper, &cfg)?;
    let art = ModelArtifact::new(
        &model,
        &cfg,
        hyper.phi,
        hyper.lambda,
        hyper.rank,
        (&data.covariate_names, &data.outcome_names),
        source,
    );
    write_outputs(&data, &model, &art, &args.out, args.diagram.as_ref())
}

fn run_cv(args: &CvArgs) -> Result<()> {
    let method: Method = args.solver.method.parse()?;
    let cfg = fit_config(&args.solver)?;
    if args.diagram.is_some() && !method.uses_rank() {
        return Err(Error::InvalidConfig(format!("method {method} has no factorization to draw")));
    }
    let data = load(&args.data)?;
    let d = &data.dataset;
    let source = args.data.propensity.into();
    let a = weights_for(source, d)?;
    let mut grid = CvGrid::default_for(method, d, &a, args.solver.seed)?;
    grid.folds = args.folds;
    if let Some(l) = &args.lambdas {
        grid.lambdas = l.clone();
    }
    if let Some(p) = &args.phis {
        grid.phis = p.clone();
    }
    if let Some(r) = &args.ranks {
        grid.ranks = r.clone();
    }
    let (cv, model) = cross_validate_and_fit(d, source, &grid, method, &cfg)?;
    write_cv_surface(&cv.surface(), &args.surface)?;
    let art = ModelArtifact::new(
        &model,
        &cfg,
        cv.best.phi,
        cv.best.lambda,
        cv.best.rank,
        (&data.covariate_names, &data.outcome_names),
        source,
    );
    write_outputs(&data, &model, &art, &args.out, args.diagram.as_ref())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let text = crate::io::read_to_string(&args.config)?;
    let mut spec = ScenarioSpec::from_toml(&text)?;
    if let Some(r) = args.replications {
        spec.replications = r;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let methods = match &args.methods {
        Some(list) => list.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?,
        None => Method::ALL.to_vec(),
    };
    let mut plan = SimulationPlan::new(methods);
    plan.tuning = if args.no_cv {
        Tuning::Fixed {
            lambda: args.lambda,
            phi: positive_phi(args.phi)?,
            rank: args.rank,
        }
    } else {
        Tuning::Cv {
            folds: args.folds,
            points: args.grid_points,
            max_rank: args.max_rank,
        }
    };
    let rows = run_scenario(&spec, &plan)?;
    write_replications(&rows, &args.out)
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let rows = read_replications(&args.input)?;
    write_summary(&summarize(&rows), &args.out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Cv(a) => run_cv(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report(a),
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print one `error[<kind>]: <reason>` line to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            eprintln!("error[{}]: {}", kind_name(kind), e.to_string().replace('\n', " "));
            exit_code(kind)
        }
    }
}
