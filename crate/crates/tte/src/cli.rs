//! The `tte` command line.
//!
//! Exit codes: 0 on success, 1 when estimation or simulation fails, 2 on
//! usage, configuration or input-format errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tte_core::estimators::{
    estimate, fit_nuisance, nuisance_values, Estimand, EstimateReport, Method, Needs, Options, Scale,
};
use tte_core::panel::{positivity_diagnostics, Design, OutcomeFamily};
use tte_core::simgen::{generate, DgpSpec};

use crate::config::{read_dgp, FormulaConfig};
use crate::study::{design_study, population_limits, DEFAULT_MC_N};
use crate::{io, parallel, Error};

#[derive(Debug, Parser)]
#[command(name = "tte", version, about = "Model-free effect estimation for sequentially emulated target trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one dataset from a simulation config and write it as long-format CSV.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study of every estimator applicable to the design.
    Replicate(ReplicateArgs),
    /// Estimate effects on a long-format CSV.
    Analyze(AnalyzeArgs),
    /// Per-visit marginal effects of the noncollapsibility example.
    DemoNoncollapsibility(DemoArgs),
    /// Monte Carlo population limits of the estimands and the pooled comparators.
    Limits(LimitsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignArg {
    Visit,
    Calendar,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Visit => Design::VisitTime,
            DesignArg::Calendar => Design::CalendarTime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EstimandArg {
    PsiU,
    PsiE,
    PsiB,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ipw,
    Gcomp,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Rd,
    Logodds,
    All,
}

/// Truncation percentile of IPW weights, or `none`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation(pub Option<f64>);

fn parse_truncation(s: &str) -> Result<Truncation, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Truncation(None));
    }
    match s.parse::<f64>() {
        Ok(p) if p > 0.0 && p <= 100.0 => Ok(Truncation(Some(p))),
        _ => Err(format!("expected a percentile in (0, 100] or `none`, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation settings (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write counterfactual outcomes and true propensities here.
    #[arg(long)]
    pub counterfactuals: Option<PathBuf>,
    /// Override the design of the config.
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,
    /// Truncation percentile of IPW weights.
    #[arg(long, value_parser = parse_truncation, default_value = "none")]
    pub truncate: Truncation,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Draw size of Monte Carlo targets.
    #[arg(long, default_value_t = DEFAULT_MC_N)]
    pub mc_n: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Long-format CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Column mapping and nuisance-model formulas (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "visit")]
    pub design: DesignArg,
    #[arg(long, value_enum, default_value = "all")]
    pub estimand: EstimandArg,
    #[arg(long, value_enum, default_value = "all")]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "rd")]
    pub scale: ScaleArg,
    #[arg(long, value_parser = parse_truncation, default_value = "95")]
    pub truncate: Truncation,
    /// Estimates as CSV, or JSON when the name ends in `.json`; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Propensity diagnostics CSV.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Propensities below this value are counted in the diagnostics.
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    /// Confidence level of the intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LimitsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MC_N)]
    pub mc_n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output JSON; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn with_path(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Replicate(a) => replicate(a),
        Command::Analyze(a) => analyze(a),
        Command::DemoNoncollapsibility(a) => demo(a),
        Command::Limits(a) => limits(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| runtime(with_path(p, e)))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn finish(res: Result<(), Error>, path: Option<&Path>) -> Result<(), CliError> {
    res.map_err(|e| match path {
        Some(p) => runtime(with_path(p, e)),
        None => runtime(e),
    })
}

fn load_dgp(path: &Path, design: Option<DesignArg>) -> Result<DgpSpec, CliError> {
    let mut dgp = read_dgp(path).map_err(|e| usage(with_path(path, e)))?;
    if let Some(d) = design {
        dgp.design = d.into();
    }
    Ok(dgp)
}

fn positive(name: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(usage(format!("--{name} must be at least 1")));
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut dgp = load_dgp(&a.config, a.design)?;
    positive("n", a.n)?;
    dgp.emit_counterfactuals = a.counterfactuals.is_some();
    let sim = generate(&dgp, a.n, a.seed).map_err(runtime)?;
    finish(io::write_long_csv(&sim.dataset, output(a.out.as_deref())?), a.out.as_deref())?;
    if let (Some(path), Some(cf)) = (&a.counterfactuals, &sim.counterfactuals) {
        finish(io::write_counterfactual_csv(&sim.dataset, cf, output(Some(path))?), Some(path))?;
    }
    Ok(())
}

fn replicate(a: ReplicateArgs) -> Result<(), CliError> {
    let dgp = load_dgp(&a.config, a.design)?;
    positive("reps", a.reps)?;
    positive("n", a.n)?;
    if a.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let mut study = design_study(&dgp, a.reps, a.n, a.seed, a.mc_n).map_err(runtime)?;
    for e in &mut study.estimators {
        e.truncation = a.truncate.0;
    }
    let table = parallel::replicate_study_parallel(&study, a.threads).map_err(runtime)?;
    if table.failures > 0 {
        eprintln!("{} of {} replications failed and were excluded", table.failures, table.reps);
    }
    finish(io::write_monte_carlo_csv(&table, output(a.out.as_deref())?), a.out.as_deref())
}

fn requested<T: Copy>(all: bool, one: Option<T>, every: &[T]) -> Vec<T> {
    if all {
        every.to_vec()
    } else {
        one.into_iter().collect()
    }
}

fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(usage("--level must lie in (0, 1)"));
    }
    let formula = match &a.config {
        Some(p) => FormulaConfig::read(p).map_err(|e| usage(with_path(p, e)))?,
        None => FormulaConfig::default(),
    };
    let design: Design = a.design.into();
    let file = File::open(&a.data).map_err(|e| usage(with_path(&a.data, e)))?;
    let ds = io::ingest_long_csv(BufReader::new(file), &formula.schema, design, None)
        .map_err(|e| usage(with_path(&a.data, e)))?;
    let models = formula.working_models(&ds).map_err(usage)?;

    let estimands = requested(
        a.estimand == EstimandArg::All,
        match a.estimand {
            EstimandArg::PsiU => Some(Estimand::PsiU),
            EstimandArg::PsiE => Some(Estimand::PsiE),
            EstimandArg::PsiB => Some(Estimand::PsiB),
            EstimandArg::All => None,
        },
        match design {
            Design::VisitTime => &[Estimand::PsiU, Estimand::PsiE, Estimand::PsiB],
            Design::CalendarTime => &[Estimand::PsiU, Estimand::PsiE],
        },
    );
    let methods = requested(
        a.method == MethodArg::All,
        match a.method {
            MethodArg::Ipw => Some(Method::Ipw),
            MethodArg::Gcomp => Some(Method::Gcomp),
            MethodArg::All => None,
        },
        &[Method::Ipw, Method::Gcomp],
    );
    let binary = ds.outcome_family() == OutcomeFamily::Binary;
    let scales = requested(
        a.scale == ScaleArg::All,
        match a.scale {
            ScaleArg::Rd => Some(Scale::RiskDifference),
            ScaleArg::Logodds => Some(Scale::LogOdds),
            ScaleArg::All => None,
        },
        if binary { &[Scale::RiskDifference, Scale::LogOdds] } else { &[Scale::RiskDifference] },
    );

    let mut needs = Needs { propensity: true, ..Needs::default() };
    for &e in &estimands {
        for &m in &methods {
            needs = needs.union(Needs::for_estimator(e, m));
        }
    }
    let nuis = fit_nuisance(&ds, &models, needs).map_err(runtime)?;
    let mut reports: Vec<EstimateReport> = Vec::new();
    for &e in &estimands {
        for &m in &methods {
            for &scale in &scales {
                let opts = Options { scale, truncation: a.truncate.0, level: a.level };
                reports.push(estimate(&ds, &nuis, e, m, opts).map_err(runtime)?);
            }
        }
    }

    let out = a.out.as_deref();
    let json = out.is_some_and(|p| p.extension().is_some_and(|x| x == "json"));
    let writer = output(out)?;
    if json {
        finish(io::write_json(&reports, writer), out)?;
    } else {
        finish(io::write_reports_csv(&reports, writer), out)?;
    }

    let diag_path = a.diagnostics.clone().or_else(|| {
        out.map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            p.with_file_name(format!("{stem}_diagnostics.csv"))
        })
    });
    if let Some(path) = diag_path {
        let values = nuisance_values(&ds, &nuis).map_err(runtime)?;
        let diags = positivity_diagnostics(&ds, &values.propensity, a.threshold).map_err(runtime)?;
        finish(io::write_diagnostics_csv(&diags, output(Some(&path))?), Some(&path))?;
    }
    Ok(())
}

fn demo(a: DemoArgs) -> Result<(), CliError> {
    positive("reps", a.reps)?;
    positive("n", a.n)?;
    if a.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let rows = parallel::noncollapsibility_demo(a.reps, a.n, a.seed, a.threads).map_err(runtime)?;
    finish(io::write_nc_csv(&rows, output(a.out.as_deref())?), a.out.as_deref())
}

fn limits(a: LimitsArgs) -> Result<(), CliError> {
    let dgp = load_dgp(&a.config, a.design)?;
    if a.mc_n < 100_000 {
        return Err(usage("--mc-n must be at least 100000"));
    }
    let records = population_limits(&dgp, a.mc_n, a.seed).map_err(runtime)?;
    finish(io::write_json(&records, output(a.out.as_deref())?), a.out.as_deref())
}
