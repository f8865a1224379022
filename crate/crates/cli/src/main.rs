//! `oro`: entropic optimal transport with overrelaxed Sinkhorn iterations.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use io::{fmt_f64, opt_count, opt_f64, read_matrix, read_vector, write_matrix, write_text, InputError};
use oro_core::bench::{
    epsilon_grid, run_speed_ratio, BenchOptions, BenchResult, ExperimentSetting, SettingKind, Strategy,
    DEFAULT_BENCH_MAX_ITER, DEFAULT_INSTANCES, DEFAULT_MIN_EPSILON_FACTOR,
};
use oro_core::solver::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use oro_core::{
    adaptive::{DEFAULT_DELTA, DEFAULT_THETA0},
    dual_objective, primal_objective, solve, spectral, Method, OtError, RelaxationConfig, SolveConfig, Termination,
    TransportProblem,
};

const EXIT_INPUT: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "oro", version, about = "Entropic optimal transport with overrelaxed Sinkhorn iterations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ProblemArgs {
    /// Cost matrix, one row per line
    #[arg(long)]
    cost: PathBuf,
    /// First marginal (row or column)
    #[arg(long)]
    mu1: PathBuf,
    /// Second marginal (row or column)
    #[arg(long)]
    mu2: PathBuf,
    #[arg(long)]
    epsilon: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sinkhorn,
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Estimated,
    Measured,
    Fixed,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and write the plan and a JSON report
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, value_enum, default_value = "adaptive")]
        method: MethodArg,
        /// Relaxation parameter for --method fixed
        #[arg(long, default_value_t = 1.5)]
        omega: f64,
        #[arg(long, default_value_t = DEFAULT_THETA0)]
        theta0: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long, default_value = "plan.csv")]
        plan_out: PathBuf,
        #[arg(long, default_value = "report.json")]
        report_out: PathBuf,
    },
    /// Spectral gap and predicted local rates, printed as JSON
    Rate {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Also write the JSON to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sinkhorn versus overrelaxation iteration ratios on synthetic problems
    Benchmark {
        #[arg(long, value_enum)]
        setting: SettingArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "estimated")]
        strategy: StrategyArg,
        /// theta0 for --strategy fixed
        #[arg(long, default_value_t = DEFAULT_THETA0)]
        theta0: f64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Comma-separated regularization values; overrides the default grid
        #[arg(long)]
        epsilons: Option<String>,
        /// Number of points of the default grid
        #[arg(long, default_value_t = 7)]
        epsilon_count: usize,
        /// Smallest grid value as a fraction of the max cost
        #[arg(long, default_value_t = DEFAULT_MIN_EPSILON_FACTOR)]
        min_epsilon_factor: f64,
        #[arg(long, default_value_t = DEFAULT_BENCH_MAX_ITER)]
        max_iter: usize,
        #[arg(long, default_value = "benchmark.csv")]
        csv_out: PathBuf,
        #[arg(long, default_value = "benchmark.json")]
        json_out: PathBuf,
    },
}

enum Failure {
    Input(String),
    NotConverged(String),
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure::Input(e.0)
    }
}

impl From<OtError> for Failure {
    fn from(e: OtError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve { problem, method, omega, theta0, delta, tol, max_iter, plan_out, report_out } => {
            let method = match method {
                MethodArg::Sinkhorn => Ok(Method::Sinkhorn),
                MethodArg::Fixed => Ok(Method::FixedOmega(omega)),
                MethodArg::Adaptive => RelaxationConfig::new(theta0, delta).map(Method::Adaptive),
            };
            method
                .map_err(Failure::from)
                .and_then(|m| cmd_solve(&problem, m, tol, max_iter, &plan_out, &report_out))
        }
        Command::Rate { problem, out } => cmd_rate(&problem, out.as_deref()),
        Command::Benchmark {
            setting,
            n,
            seed,
            strategy,
            theta0,
            instances,
            epsilons,
            epsilon_count,
            min_epsilon_factor,
            max_iter,
            csv_out,
            json_out,
        } => {
            let kind = match setting {
                SettingArg::A => SettingKind::QuadraticPlateaus,
                SettingArg::B => SettingKind::RandomCostUniform,
            };
            let strategy = match strategy {
                StrategyArg::Estimated => Strategy::Estimated,
                StrategyArg::Measured => Strategy::Measured,
                StrategyArg::Fixed => Strategy::FixedTheta(theta0),
            };
            let epsilon_list = match epsilons {
                Some(list) => io::parse_list(&list).map_err(|e| Failure::Input(format!("--epsilons: {e}"))),
                None => Ok(epsilon_grid(kind, n, min_epsilon_factor, epsilon_count)),
            };
            epsilon_list
                .and_then(|epsilon_list| Ok((epsilon_list, threads_from_env()?)))
                .and_then(|(epsilon_list, threads)| {
                    let setting = ExperimentSetting { kind, n, seed, epsilon_list, strategy, instances };
                    let options = BenchOptions { max_iter, threads, ..BenchOptions::default() };
                    cmd_benchmark(&setting, &options, &csv_out, &json_out)
                })
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
    }
}

/// `ORO_THREADS` caps the benchmark worker count; unset or 0 means all cores.
fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("ORO_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::Input(format!("ORO_THREADS must be a non-negative integer, got '{v}'"))),
    }
}

fn load_problem(args: &ProblemArgs) -> Result<TransportProblem, Failure> {
    let cost = read_matrix(&args.cost)?;
    let mu1 = read_vector(&args.mu1)?;
    let mu2 = read_vector(&args.mu2)?;
    let (n1, n2) = cost.dim();
    for (path, mu, n, name) in [(&args.mu1, &mu1, n1, "rows"), (&args.mu2, &mu2, n2, "columns")] {
        if mu.len() != n {
            return Err(Failure::Input(format!(
                "dimension mismatch: cost {} has {n} {name} but {} has {} entries",
                args.cost.display(),
                path.display(),
                mu.len()
            )));
        }
        if let Some((i, v)) = mu.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Failure::Input(format!(
                "{}: marginal entries must be positive, entry {} is {v}",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(TransportProblem::new(cost, mu1, mu2, args.epsilon)?)
}

#[derive(Serialize)]
struct OmegaSummary {
    count: usize,
    min: Option<f64>,
    max: Option<f64>,
    mean: Option<f64>,
    last: Option<(f64, f64)>,
}

#[derive(Serialize)]
struct SolveJson {
    method: String,
    epsilon: f64,
    tol: f64,
    iterations: usize,
    converged: bool,
    termination: Termination,
    final_row_error: f64,
    final_col_error: f64,
    dual_objective: f64,
    primal_objective: Option<f64>,
    kernel_applications: u64,
    omega: OmegaSummary,
}

fn cmd_solve(
    args: &ProblemArgs,
    method: Method,
    tol: f64,
    max_iter: usize,
    plan_out: &Path,
    report_out: &Path,
) -> Result<(), Failure> {
    let problem = load_problem(args)?;
    let config = SolveConfig { record_dual_objective: false, ..SolveConfig::new(method).with_tol(tol).with_max_iter(max_iter).with_telemetry() };
    let report = solve(&problem, &config)?;

    let omegas: Vec<f64> = report.omega_trace().into_iter().flat_map(|(r, c)| [r, c]).collect();
    let omega = OmegaSummary {
        count: omegas.len(),
        min: omegas.iter().copied().reduce(f64::min),
        max: omegas.iter().copied().reduce(f64::max),
        mean: (!omegas.is_empty()).then(|| omegas.iter().sum::<f64>() / omegas.len() as f64),
        last: report.omega_trace().last().copied(),
    };
    let plan = report.plan(&problem).ok();
    let json = SolveJson {
        method: match method {
            Method::Sinkhorn => "sinkhorn".into(),
            Method::FixedOmega(w) => format!("fixed({w})"),
            Method::Adaptive(c) => format!("adaptive(theta0={}, delta={})", c.theta0, c.delta),
        },
        epsilon: problem.epsilon(),
        tol,
        iterations: report.iterations,
        converged: report.converged,
        termination: report.termination,
        final_row_error: report.final_row_error,
        final_col_error: report.final_col_error,
        dual_objective: dual_objective(&problem, &report.final_state),
        primal_objective: plan.as_ref().map(|p| primal_objective(&problem, p)),
        kernel_applications: report.kernel_applications,
        omega,
    };
    if let Some(plan) = &plan {
        write_matrix(plan_out, &plan.entries().to_owned())?;
    }
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    write_text(report_out, &format!("{text}\n"))?;

    if report.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "stopped after {} iterations ({:?}), residuals {} / {}",
            report.iterations,
            report.termination,
            fmt_f64(report.final_row_error),
            fmt_f64(report.final_col_error)
        )))
    }
}

fn cmd_rate(args: &ProblemArgs, out: Option<&Path>) -> Result<(), Failure> {
    let problem = load_problem(args)?;
    let report = spectral::analyze(&problem)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = out {
        write_text(path, &format!("{text}\n"))?;
    }
    Ok(())
}

const CSV_HEADER: [&str; 10] =
    ["setting", "epsilon", "strategy", "eta", "theta0", "sk_iters", "or_iters", "ratio", "converged_sk", "converged_or"];

fn summary_csv(result: &BenchResult) -> Result<String, Failure> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_error = |e: csv::Error| Failure::Input(format!("cannot format CSV: {e}"));
    writer.write_record(CSV_HEADER).map_err(csv_error)?;
    for row in &result.summary {
        writer
            .write_record([
                row.setting.clone(),
                fmt_f64(row.epsilon),
                row.strategy.clone(),
                opt_f64(row.eta),
                opt_f64(row.theta0),
                opt_count(row.sk_iters),
                opt_count(row.or_iters),
                opt_f64(row.ratio),
                row.converged_sk.to_string(),
                row.converged_or.to_string(),
            ])
            .map_err(csv_error)?;
    }
    let bytes = writer.into_inner().map_err(|e| Failure::Input(format!("cannot format CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

fn cmd_benchmark(setting: &ExperimentSetting, options: &BenchOptions, csv_out: &Path, json_out: &Path) -> Result<(), Failure> {
    let result = run_speed_ratio(setting, options)?;
    write_text(csv_out, &summary_csv(&result)?)?;
    let json = serde_json::to_string_pretty(&result).expect("benchmark result serializes");
    write_text(json_out, &format!("{json}\n"))?;
    for cell in result.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "warning: epsilon {} instance {} failed: {}",
            cell.epsilon,
            cell.instance,
            cell.error.as_deref().unwrap_or_default()
        );
    }
    if result.failed_cells() == result.cells.len() {
        return Err(Failure::NotConverged("every benchmark cell failed".into()));
    }
    Ok(())
}
