//! `sensorsel`: relaxed sensor selection, sweeps and ellipsoids from the
//! command line.
//!
//! Exit codes: 0 on success, 1 when a solve fails to converge or a check
//! fails, 2 on bad input.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use sensorsel_core::data::{activity_fixture, gen_synthetic};
use sensorsel_core::diagnostics::run_checks;
use sensorsel_core::experiment::{run_experiment, DataSource, Dataset, ExperimentConfig, ExperimentError};
use sensorsel_core::ingest::{write_csv_matrix, IngestError};
use sensorsel_core::mvee::{mvee_solve, MveeConfig, MveeError};
use sensorsel_core::newton::{newton_solve, NewtonError, NewtonOutcome, StopReason};
use sensorsel_core::selection::select;
use sensorsel_core::{Backend, BarrierError, NewtonConfig, SensorProblem, SolveTrace};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Convergence(String),
    #[error("output: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Convergence(_) => 1,
            CliError::Input(_) | CliError::Io(_) => 2,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<BarrierError> for CliError {
    fn from(e: BarrierError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Io(e) => CliError::Io(e),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<NewtonError> for CliError {
    fn from(e: NewtonError) -> Self {
        match e {
            NewtonError::InfeasibleBudget { .. } | NewtonError::InvalidConfig(_) | NewtonError::Barrier(_) => {
                CliError::Input(e.to_string())
            }
            other => CliError::Convergence(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sensorsel", version, about = "Sensor selection via log-det maximization and Gaussian belief propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a generated matrix as CSV.
    Synth(SynthArgs),
    /// Solve one relaxed problem.
    Solve(SolveArgs),
    /// Solve, round, run local search and report bounds.
    Select(SelectArgs),
    /// Run every budget in a range against one or more backends.
    Sweep(SweepArgs),
    /// Minimum-volume origin-centered ellipsoid enclosing the rows.
    Mvee(MveeArgs),
    /// Run the invariant checks on one instance.
    Check(CheckArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SynthKind {
    /// Rows drawn from N(0, I/√n).
    Gaussian,
    /// Nonnegative daily activity with some idle columns.
    Activity,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Gaussian)]
    kind: SynthKind,
    /// Rows (sensors, or days for activity data).
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Columns (parameters, or links for activity data).
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Columns active on every row (activity data only).
    #[arg(long)]
    active: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV matrix with one row per sensor; synthetic data when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop CSV columns nonzero on fewer than this fraction of rows.
    #[arg(long, default_value_t = 1.0)]
    min_activity: f64,
    /// Scale CSV columns to unit root-mean-square.
    #[arg(long)]
    scale_columns: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, CliError> {
        let source = match &self.input {
            Some(path) => DataSource::Csv {
                path: path.clone(),
                min_activity: self.min_activity,
                scale: self.scale_columns,
            },
            None => DataSource::Synthetic {
                m: self.m,
                n: self.n,
                seed: self.seed,
            },
        };
        Ok(source.load()?)
    }
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Barrier weight; defaults to ln(1.005)·n/m.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, default_value = "exact", value_parser = parse_backend)]
    backend: Backend,
    /// Newton decrement tolerance.
    #[arg(long, default_value_t = 1e-3)]
    newton_tol: f64,
    /// GaBP message convergence threshold.
    #[arg(long, default_value_t = 1e-8)]
    gabp_tol: f64,
    #[arg(long, default_value_t = 50)]
    max_newton: usize,
    /// Record the gradient error against the exact gradient every iteration.
    #[arg(long)]
    gradient_oracle: bool,
}

impl SolverArgs {
    fn newton(&self) -> NewtonConfig {
        let mut cfg = NewtonConfig::with_backend(self.backend)
            .with_tolerance(self.newton_tol)
            .with_gabp_threshold(self.gabp_tol);
        cfg.max_iterations = self.max_newton;
        cfg.gradient_oracle = self.gradient_oracle;
        cfg
    }

    fn problem(&self, data: &Dataset, k: usize) -> Result<SensorProblem, CliError> {
        let a = &data.matrix;
        let kappa = self.kappa.unwrap_or_else(|| SensorProblem::default_kappa(a.rows(), a.cols()));
        Ok(SensorProblem::new(a.clone(), k, kappa)?)
    }
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Number of sensors to select.
    #[arg(long)]
    k: usize,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Local search passes; 0 disables it.
    #[arg(long, default_value_t = 1000)]
    passes: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// First budget; defaults to n.
    #[arg(long)]
    k_from: Option<usize>,
    /// Last budget, inclusive; defaults to the first budget plus 20.
    #[arg(long)]
    k_to: Option<usize>,
    #[arg(long, default_value_t = 1)]
    k_step: usize,
    /// Comma-separated backends; overrides --backend.
    #[arg(long, value_delimiter = ',', value_parser = parse_backend)]
    backends: Vec<Backend>,
    #[arg(long, default_value_t = 1000)]
    passes: usize,
    /// Directory for per-cell Newton traces.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Record wall-clock time per cell (output is then not reproducible).
    #[arg(long)]
    timing: bool,
    /// Output JSON lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MveeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-4)]
    kappa: f64,
    /// Report points with level above 1 + tol.
    #[arg(long, default_value_t = 5e-2)]
    enclosure_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    newton_tol: f64,
    #[arg(long, default_value_t = 200)]
    max_newton: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    solve: SolveArgs,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            CliError::Input(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<(), CliError> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SolveReport<'a> {
    m: usize,
    n: usize,
    k: usize,
    kappa: f64,
    backend: Backend,
    stop: StopReason,
    objective: f64,
    z: &'a [f64],
    kept_columns: &'a [usize],
    trace: &'a SolveTrace,
}

fn solve_outcome(args: &SolveArgs) -> Result<(Dataset, SensorProblem, NewtonOutcome), CliError> {
    let data = args.data.load()?;
    let problem = args.solver.problem(&data, args.k)?;
    let out = newton_solve(&problem, &args.solver.newton())?;
    Ok((data, problem, out))
}

fn report<'a>(p: &SensorProblem, data: &'a Dataset, out: &'a NewtonOutcome) -> SolveReport<'a> {
    SolveReport {
        m: p.m(),
        n: p.n(),
        k: p.budget(),
        kappa: p.kappa(),
        backend: out.trace.backend,
        stop: out.trace.stop,
        objective: out.trace.final_objective,
        z: out.point.as_slice(),
        kept_columns: &data.kept_columns,
        trace: &out.trace,
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.n == 0 || args.m == 0 {
        return Err(CliError::Input("m and n must be positive".into()));
    }
    let (matrix, prefix) = match args.kind {
        SynthKind::Gaussian => (gen_synthetic(args.m, args.n, args.seed), "x"),
        SynthKind::Activity => {
            let active = args.active.unwrap_or(args.n);
            if active > args.n {
                return Err(CliError::Input(format!("--active {active} exceeds --n {}", args.n)));
            }
            (activity_fixture(args.m, args.n, active, args.seed), "link")
        }
    };
    let header: Vec<String> = (0..args.n).map(|c| format!("{prefix}{c}")).collect();
    let mut out = output(&args.out)?;
    write_csv_matrix(&matrix, &mut out, Some(&header))?;
    out.flush()?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let (data, problem, out) = solve_outcome(args)?;
    emit(&args.out, &report(&problem, &data, &out))
}

#[derive(Serialize)]
struct SelectReport<'a> {
    #[serde(flatten)]
    solve: SolveReport<'a>,
    selection: sensorsel_core::SelectionResult,
}

fn cmd_select(args: &SelectArgs) -> Result<(), CliError> {
    let (data, problem, out) = solve_outcome(&args.solve)?;
    let selection = select(&problem, &out.point, args.passes)?;
    emit(
        &args.solve.out,
        &SelectReport {
            solve: report(&problem, &data, &out),
            selection,
        },
    )
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let data = args.data.load()?;
    let n = data.matrix.cols();
    let from = args.k_from.unwrap_or(n);
    let to = args.k_to.unwrap_or(from + 20);
    if args.k_step == 0 || to < from {
        return Err(CliError::Input(format!("empty budget range {from}..={to} step {}", args.k_step)));
    }
    let cfg = ExperimentConfig {
        k_values: (from..=to).step_by(args.k_step).collect(),
        kappa: args.solver.kappa,
        backends: if args.backends.is_empty() {
            vec![args.solver.backend]
        } else {
            args.backends.clone()
        },
        newton: args.solver.newton(),
        local_search_passes: args.passes,
        timing: args.timing,
    };
    let mut out = output(&args.out)?;
    let summary = run_experiment(&data.matrix, &cfg, &mut out, args.trace_dir.as_deref())?;
    out.flush()?;
    if summary.all_finished() {
        Ok(())
    } else {
        Err(CliError::Convergence(format!("{} of {} cells failed", summary.failed, summary.cells)))
    }
}

#[derive(Serialize)]
struct MveeReport<'a> {
    m: usize,
    n: usize,
    kappa: f64,
    shape: Vec<Vec<f64>>,
    log_volume: f64,
    weights: &'a [f64],
    newton_iterations: usize,
    report: &'a sensorsel_core::mvee::EnclosureReport,
}

fn cmd_mvee(args: &MveeArgs) -> Result<(), CliError> {
    let data = args.data.load()?;
    let mut cfg = MveeConfig {
        kappa: args.kappa,
        enclosure_tol: args.enclosure_tol,
        ..MveeConfig::default()
    };
    cfg.newton.tolerance = args.newton_tol;
    cfg.newton.max_iterations = args.max_newton;
    let sol = mvee_solve(&data.matrix, &cfg).map_err(|e| match e {
        MveeError::NoConvergence(_) => CliError::Convergence(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    let shape = sol.ellipsoid.shape();
    emit(
        &args.out,
        &MveeReport {
            m: data.matrix.rows(),
            n: data.matrix.cols(),
            kappa: args.kappa,
            shape: (0..shape.rows()).map(|r| shape.row(r).to_vec()).collect(),
            log_volume: sol.ellipsoid.log_volume(),
            weights: sol.weights.as_slice(),
            newton_iterations: sol.trace.newton_iterations(),
            report: &sol.report,
        },
    )?;
    if sol.report.encloses() {
        Ok(())
    } else {
        Err(CliError::Convergence(format!(
            "{} points outside the ellipsoid beyond tolerance",
            sol.report.violations.len()
        )))
    }
}

fn cmd_check(args: &CheckArgs) -> Result<(), CliError> {
    let data = args.solve.data.load()?;
    let problem = args.solve.solver.problem(&data, args.solve.k)?;
    let report = run_checks(&problem, &args.solve.solver.newton())?;
    emit(&args.solve.out, &report)?;
    match report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(()),
        failed => Err(CliError::Convergence(format!("failed checks: {}", failed.join(", ")))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Select(a) => cmd_select(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Mvee(a) => cmd_mvee(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sensorsel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
