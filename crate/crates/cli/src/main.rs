use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use twostage_core::dgp::MIN_POPULATION;
use twostage_core::harness::{write_metrics_csv, write_raw_ndjson, TRUTH_POPULATION};
use twostage_core::{
    analyze, read_individual_csv, run_experiment, true_values, AnalysisConfig, DgpKind, DgpSpec,
    Error, EstimatorKind, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "twostage",
    version,
    about = "Two-stage TMLE for cluster randomized trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study of the estimators on a simulated design.
    Simulate(SimulateArgs),
    /// Two-stage analysis of an individual-level dataset.
    Analyze(AnalyzeArgs),
    /// Population values of the simulated designs.
    Truth(TruthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dgp {
    Main,
    Supp,
}

impl From<Dgp> for DgpKind {
    fn from(d: Dgp) -> Self {
        match d {
            Dgp::Main => DgpKind::Main,
            Dgp::Supp => DgpKind::Supplementary,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "main")]
    dgp: Dgp,
    /// Number of clusters per trial (even).
    #[arg(long, default_value_t = 30)]
    clusters: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated subset of t_test, care, tmle, gee.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Option<Vec<EstimatorKind>>,
    /// Remove the intervention effect from the design.
    #[arg(long)]
    null: bool,
    /// Metrics CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replicate estimates as newline-delimited JSON.
    #[arg(long)]
    raw_out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Result JSON; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long, value_enum, default_value = "main")]
    dgp: Dgp,
    #[arg(long, default_value_t = TRUTH_POPULATION)]
    pop: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    null: bool,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    EstimatorKind::parse(s)
        .ok_or_else(|| format!("unknown estimator `{s}` (expected t_test, care, tmle or gee)"))
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schema(_) | Error::MissingColumn(_) => 2,
            Error::NoMeasuredOutcomes(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Reports an invalid flag value with the usage line and exits with status 2.
fn usage(message: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ValueValidation, message)
        .exit()
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    if args.clusters < 4 || args.clusters % 2 != 0 {
        usage("--clusters must be an even number of at least 4");
    }
    if args.reps == 0 {
        usage("--reps must be at least 1");
    }
    let mut dgp = DgpSpec::new(args.dgp.into(), args.clusters, args.seed);
    dgp.null_effect = args.null;
    let mut config = ExperimentConfig::new(dgp, args.reps);
    if let Some(est) = args.estimators {
        config.estimators = est;
    }
    config.jobs = args.jobs;
    let result = run_experiment(&config)?;

    let mut csv = Vec::new();
    write_metrics_csv(&result.rows, &mut csv)?;
    emit(args.out.as_deref(), &csv)?;
    if let Some(raw) = &args.raw_out {
        let mut buf = Vec::new();
        write_raw_ndjson(&result.replicates, &mut buf)?;
        write_atomic(raw, &buf)?;
    }
    let failures = result.total_failures();
    if failures > 0 {
        eprintln!(
            "warning: {failures} estimator evaluations failed and were excluded from the metrics"
        );
    }
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_failure(&args.config, e))?;
    let config = AnalysisConfig::from_json(&text)?;
    let file = fs::File::open(&args.data).map_err(|e| io_failure(&args.data, e))?;
    let clusters = read_individual_csv(std::io::BufReader::new(file))?;
    let output = analyze(&clusters, &config)?;
    let mut bytes = serde_json::to_vec_pretty(&output).map_err(Error::from)?;
    bytes.push(b'\n');
    emit(args.out.as_deref(), &bytes)
}

fn truth(args: TruthArgs) -> Result<(), Failure> {
    let mut spec = DgpSpec::new(args.dgp.into(), 2, args.seed);
    spec.null_effect = args.null;
    if args.pop < MIN_POPULATION {
        usage(format!("--pop must be at least {MIN_POPULATION}"));
    }
    let v = true_values(&spec, args.pop)?;
    let mut bytes = serde_json::to_vec_pretty(&v).map_err(Error::from)?;
    bytes.push(b'\n');
    emit(None, &bytes)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Truth(a) => truth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
