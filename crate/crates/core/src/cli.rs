//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 when a computation fails.
//! Output files are written to a temporary sibling and renamed into place, so
//! a failed run never leaves a partial file behind.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::design::{load_csv, parse_formula, ModelSpec};
use crate::error::{Error, Result};
use crate::glmm::ObsVarianceApprox;
use crate::lmm::Method;
use crate::report::{analyze_model, compare_models, residualize, AnalysisOptions, ComparisonTable, TableRow};
use crate::sim::{parse_beta_grid, run_study, Covariate, SimConfig, Study};
use crate::stats::format_sig10;
use crate::varfun::{distance, Family, Link, PowerVariance};

#[derive(Debug, Parser)]
#[command(name = "mixr2", version, about = "Coefficients of determination for random-intercept mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one mixed model and report its R² panel.
    Fit(FitArgs),
    /// Fit several models on the same data and print a comparison table.
    Table(TableArgs),
    /// Run a seeded Monte-Carlo study and write median summaries as CSV.
    Simulate(SimulateArgs),
    /// Variance-function distance between a response and fitted mean(s).
    Distance(DistanceArgs),
    /// Append the residual of a column regressed on a grouping factor.
    Residualize(ResidualizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Tsv,
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Approx {
    Lognormal,
    Delta,
    Trigamma,
}

impl From<Approx> for ObsVarianceApprox {
    fn from(a: Approx) -> Self {
        match a {
            Approx::Lognormal => ObsVarianceApprox::Lognormal,
            Approx::Delta => ObsVarianceApprox::Delta,
            Approx::Trigamma => ObsVarianceApprox::Trigamma,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Response family: gaussian, binomial or poisson.
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    /// Link function; defaults to the family's canonical link.
    #[arg(long)]
    pub link: Option<String>,
    /// Restricted maximum likelihood for gaussian models (default: ML).
    #[arg(long)]
    pub reml: bool,
    /// Adaptive Gauss–Hermite nodes for non-gaussian models; 1 is Laplace.
    #[arg(long, default_value_t = crate::glmm::DEFAULT_NODES)]
    pub nodes: usize,
    /// Also refit as a GLM with the group as a fixed factor (R_V², R_KL²).
    #[arg(long)]
    pub benchmarks: bool,
    /// Observation-level variance used by the poisson comparator.
    #[arg(long, value_enum, default_value = "lognormal")]
    pub approx: Approx,
    /// Columns to treat as categorical even when they look numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Model formula, e.g. "y ~ x + (1|g) + offset(log(n))".
    #[arg(long)]
    pub formula: String,
    /// Label used in the report.
    #[arg(long, default_value = "model")]
    pub label: String,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Model formula; repeat for several models.
    #[arg(long, conflicts_with = "models_file")]
    pub formula: Vec<String>,
    /// File with one `label = formula` per line; `#` starts a comment.
    #[arg(long)]
    pub models_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// lmm, logistic, loglinear-poisson or loglinear-negbin.
    #[arg(long)]
    pub study: String,
    /// Observations per data set (default 200 for lmm, 400 otherwise).
    #[arg(long)]
    pub n_obs: Option<usize>,
    /// Number of groups.
    #[arg(long, default_value_t = 50)]
    pub m: usize,
    /// Replicates per grid point.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Effect sizes as start:stop:step or a comma-separated list.
    #[arg(long, default_value = "0:2:0.25")]
    pub beta_grid: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Standard deviation of the group intercepts (default 1, or 0.5 for the loglinear studies).
    #[arg(long)]
    pub random_sd: Option<f64>,
    /// Successes r of the negative-binomial counts.
    #[arg(long, default_value_t = 1.0)]
    pub negbin_size: f64,
    /// Covariate models to fit.
    #[arg(long, value_delimiter = ',', default_value = "x1,x2")]
    pub covariates: Vec<String>,
    #[arg(long, default_value_t = crate::glmm::DEFAULT_NODES)]
    pub nodes: usize,
    /// Restricted maximum likelihood for the lmm study.
    #[arg(long)]
    pub reml: bool,
    /// Force the fixed-effects GLM benchmarks on (default on except for lmm).
    #[arg(long, conflicts_with = "no_benchmarks")]
    pub benchmarks: bool,
    #[arg(long)]
    pub no_benchmarks: bool,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    /// gaussian, binomial, poisson, gamma, inverse-gaussian or quasi.
    #[arg(long)]
    pub family: String,
    /// Variance power for the quasi family, V(μ) = scale·μ^power.
    #[arg(long)]
    pub power: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Observed response.
    #[arg(long, allow_hyphen_values = true)]
    pub y: f64,
    /// Fitted mean.
    #[arg(long, allow_hyphen_values = true)]
    pub mu: f64,
    /// Reference mean; prints the ratio d_V(y, mu) / d_V(y, mu0).
    #[arg(long, allow_hyphen_values = true)]
    pub mu0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ResidualizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Numeric column to residualize.
    #[arg(long)]
    pub column: String,
    /// Grouping column.
    #[arg(long)]
    pub by: String,
    /// Name of the new column (default: <column>_r).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Table(a) => table(a),
        Command::Simulate(a) => simulate(a),
        Command::Distance(a) => distance_cmd(a),
        Command::Residualize(a) => residualize_cmd(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())?;
            lock.flush()?;
            Ok(())
        }
    }
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn options(model: &ModelArgs) -> std::result::Result<(Family, AnalysisOptions), Failure> {
    let family = Family::parse(&model.family, model.link.as_deref()).map_err(usage)?;
    if model.nodes == 0 || model.nodes > 50 || model.nodes.is_multiple_of(2) {
        return Err(Failure::Usage(format!("--nodes must be odd and within 1..=50, got {}", model.nodes)));
    }
    Ok((
        family,
        AnalysisOptions {
            method: if model.reml { Method::Reml } else { Method::Ml },
            nodes: model.nodes,
            benchmarks: model.benchmarks,
            approx: model.approx.into(),
        },
    ))
}

fn fit(a: FitArgs) -> std::result::Result<(), Failure> {
    let (family, opts) = options(&a.model)?;
    let spec = parse_formula(&a.formula).map_err(usage)?.with_family(family);
    let data = load_csv(&a.model.data, &a.model.categorical)?;
    let report = analyze_model(&data, &spec, &opts, &a.label)?;
    let table = ComparisonTable {
        rows: vec![TableRow {
            label: report.label.clone(),
            formula: report.formula.clone(),
            report: Some(report.clone()),
            error: None,
        }],
        highlights: Default::default(),
    };
    let text = match a.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&report.to_json()).map_err(Error::from)?),
        Format::Tsv => table.to_tsv(),
        Format::Md => table.to_markdown(),
    };
    emit(a.model.out.as_deref(), &text)?;
    Ok(())
}

/// Reads `label = formula` lines. A line without `=` uses the formula as its
/// own label.
pub fn parse_models_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((label, formula)) => {
                let (label, formula) = (label.trim(), formula.trim());
                if label.is_empty() || formula.is_empty() {
                    return Err(Error::InvalidArgument(format!("malformed model line `{line}`")));
                }
                out.push((label.to_string(), formula.to_string()));
            }
            None => out.push((line.to_string(), line.to_string())),
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("models file lists no models".into()));
    }
    Ok(out)
}

fn table(a: TableArgs) -> std::result::Result<(), Failure> {
    let (family, opts) = options(&a.model)?;
    let entries: Vec<(String, String)> = match (&a.models_file, a.formula.is_empty()) {
        (Some(path), true) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            parse_models_file(&text).map_err(usage)?
        }
        (None, false) => a.formula.iter().map(|f| (f.clone(), f.clone())).collect(),
        _ => return Err(Failure::Usage("give --formula one or more times, or --models-file".into())),
    };
    let specs: Vec<(String, ModelSpec)> = entries
        .into_iter()
        .map(|(label, f)| Ok((label, parse_formula(&f)?.with_family(family))))
        .collect::<Result<_>>()
        .map_err(usage)?;
    let data = load_csv(&a.model.data, &a.model.categorical)?;
    let table = compare_models(&data, &specs, &opts)?;
    let text = match a.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&table.to_json()).map_err(Error::from)?),
        Format::Tsv => table.to_tsv(),
        Format::Md => table.to_markdown(),
    };
    emit(a.model.out.as_deref(), &text)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> std::result::Result<(), Failure> {
    let study = Study::parse(&a.study).map_err(usage)?;
    let mut config = SimConfig::new(study);
    if let Some(n) = a.n_obs {
        config.n_obs = n;
    }
    config.m = a.m;
    config.replicates = a.reps;
    config.beta_grid = parse_beta_grid(&a.beta_grid).map_err(usage)?;
    config.seed = a.seed;
    if let Some(sd) = a.random_sd {
        config.random_sd = sd;
    }
    config.negbin_size = a.negbin_size;
    config.covariates = a
        .covariates
        .iter()
        .map(|c| Covariate::parse(c.trim()))
        .collect::<Result<_>>()
        .map_err(usage)?;
    config.nodes = a.nodes;
    if a.nodes == 0 || a.nodes > 50 || a.nodes.is_multiple_of(2) {
        return Err(Failure::Usage(format!("--nodes must be odd and within 1..=50, got {}", a.nodes)));
    }
    config.lmm_method = if a.reml { Method::Reml } else { Method::Ml };
    if a.benchmarks {
        config.benchmarks = true;
    }
    if a.no_benchmarks {
        config.benchmarks = false;
    }
    config.threads = a.threads;
    config.validate().map_err(usage)?;
    let result = run_study(&config)?;
    if result.flagged {
        eprintln!("warning: more than 5% of the fits failed at some grid point; see n_fail");
    }
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    emit(a.out.as_deref(), std::str::from_utf8(&buf).expect("csv output is UTF-8"))?;
    Ok(())
}

fn distance_cmd(a: DistanceArgs) -> std::result::Result<(), Failure> {
    let family = if a.family == "quasi" {
        let (Some(power), scale) = (a.power, a.scale.unwrap_or(1.0)) else {
            return Err(Failure::Usage("the quasi family needs --power".into()));
        };
        Family::quasi(PowerVariance { scale, power }, Link::Identity).map_err(usage)?
    } else {
        if a.power.is_some() || a.scale.is_some() {
            return Err(Failure::Usage("--power and --scale apply only to --family quasi".into()));
        }
        Family::parse(&a.family, None).map_err(usage)?
    };
    let d = distance(&family, a.y, a.mu)?.d_v;
    let mut text = format!("d_v\t{}\n", format_sig10(d));
    if let Some(mu0) = a.mu0 {
        let d0 = distance(&family, a.y, mu0)?.d_v;
        if d0 == 0.0 {
            return Err(Error::ZeroDenominator("reference distance").into());
        }
        text.push_str(&format!("d_v0\t{}\nratio\t{}\n", format_sig10(d0), format_sig10(d / d0)));
    }
    emit(None, &text)?;
    Ok(())
}

fn residualize_cmd(a: ResidualizeArgs) -> std::result::Result<(), Failure> {
    let name = a.name.clone().unwrap_or_else(|| format!("{}_r", a.column));
    let data = load_csv(&a.data, &a.categorical)?;
    let out = residualize(&data, &a.column, &a.by, &name)?;
    let mut buf = Vec::new();
    out.write_csv(&mut buf)?;
    emit(a.out.as_deref(), std::str::from_utf8(&buf).expect("csv output is UTF-8"))?;
    Ok(())
}
