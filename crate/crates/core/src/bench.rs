//! Sinkhorn-Knopp versus adaptive overrelaxation on synthetic problems.
//!
//! Two settings are provided. `QuadraticPlateaus` discretizes `[0, 1]` with
//! squared distance cost and plateau-shaped marginals; `RandomCostUniform`
//! draws an i.i.d. uniform cost with uniform marginals. For each `epsilon`
//! and each instance the iteration counts needed to bring the gauge-fixed
//! dual potential within `alpha_tol` of a tight reference are compared.
//!
//! Instance `k` of a run seeded with `seed` uses `seed + k`. Each instance
//! seed drives a ChaCha8 generator whose stream 0 produces the problem and
//! stream 1 the independent problem used to estimate the spectral gap.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{RelaxationConfig, DEFAULT_DELTA};
use crate::error::{OtError, Result};
use crate::problem::TransportProblem;
use crate::solver::{reference_solve, solve, Method, SolveConfig};
use crate::spectral::{alpha_error_trace, contracting_part, empirical_rate, optimal_theta, RateFit};

pub const PROBLEM_STREAM: u64 = 0;
pub const ESTIMATION_STREAM: u64 = 1;
pub const DEFAULT_ALPHA_TOL: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 5;
pub const DEFAULT_BENCH_MAX_ITER: usize = 1_000_000;
pub const PLATEAU_BASE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingKind {
    QuadraticPlateaus,
    RandomCostUniform,
}

impl SettingKind {
    /// Short label, `a` or `b`.
    pub fn label(&self) -> &'static str {
        match self {
            SettingKind::QuadraticPlateaus => "a",
            SettingKind::RandomCostUniform => "b",
        }
    }

    /// Cost scale used to place the default epsilon grid.
    pub fn nominal_max_cost(&self, n: usize) -> f64 {
        match self {
            SettingKind::QuadraticPlateaus => {
                let s = (n as f64 - 1.0) / n as f64;
                s * s
            }
            SettingKind::RandomCostUniform => 1.0,
        }
    }

    pub fn generate(&self, n: usize, seed: u64, stream: u64, epsilon: f64) -> Result<TransportProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match self {
            SettingKind::QuadraticPlateaus => quadratic_plateaus(n, &mut rng, epsilon),
            SettingKind::RandomCostUniform => random_cost_uniform(n, &mut rng, epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// `theta0` from the gap measured on an independent problem.
    Estimated,
    /// `theta0` from the gap measured on the problem being solved.
    Measured,
    FixedTheta(f64),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Estimated => "estimated".into(),
            Strategy::Measured => "measured".into(),
            Strategy::FixedTheta(t) => format!("fixed({t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetting {
    pub kind: SettingKind,
    pub n: usize,
    pub seed: u64,
    pub epsilon_list: Vec<f64>,
    pub strategy: Strategy,
    pub instances: usize,
}

impl ExperimentSetting {
    /// Setting with the default log-spaced epsilon grid and instance count.
    pub fn new(kind: SettingKind, n: usize, seed: u64, strategy: Strategy) -> Self {
        Self {
            kind,
            n,
            seed,
            epsilon_list: default_epsilons(kind, n, 7),
            strategy,
            instances: DEFAULT_INSTANCES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(OtError::InvalidConfig(format!("n must be at least 2, got {}", self.n)));
        }
        if self.epsilon_list.is_empty() {
            return Err(OtError::InvalidConfig("epsilon list is empty".into()));
        }
        if let Some(e) = self.epsilon_list.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(OtError::InvalidConfig(format!("epsilon must be positive, got {e}")));
        }
        if self.instances == 0 {
            return Err(OtError::InvalidConfig("instances must be positive".into()));
        }
        if let Strategy::FixedTheta(t) = self.strategy {
            RelaxationConfig::new(t, DEFAULT_DELTA)?;
        }
        Ok(())
    }
}

pub const DEFAULT_MIN_EPSILON_FACTOR: f64 = 1e-3;

/// `count` values log-spaced over `[1e-3, 1]` times the nominal max cost, decreasing.
pub fn default_epsilons(kind: SettingKind, n: usize, count: usize) -> Vec<f64> {
    epsilon_grid(kind, n, DEFAULT_MIN_EPSILON_FACTOR, count)
}

/// `count` values log-spaced over `[min_factor, 1]` times the nominal max cost, decreasing.
pub fn epsilon_grid(kind: SettingKind, n: usize, min_factor: f64, count: usize) -> Vec<f64> {
    let scale = kind.nominal_max_cost(n);
    let decades = -min_factor.log10();
    match count {
        0 => Vec::new(),
        1 => vec![scale],
        _ => (0..count)
            .map(|k| scale * 10f64.powf(-decades * k as f64 / (count - 1) as f64))
            .collect(),
    }
}

fn plateau_marginal(grid: &Array1<f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let h: f64 = rng.gen();
    let (u, v): (f64, f64) = (rng.gen(), rng.gen());
    let (l, r) = if u <= v { (u, v) } else { (v, u) };
    let density = grid.mapv(|x| PLATEAU_BASE + if l <= x && x <= r { h } else { 0.0 });
    let total = density.sum();
    density / total
}

fn quadratic_plateaus(n: usize, rng: &mut ChaCha8Rng, epsilon: f64) -> Result<TransportProblem> {
    let grid = Array1::from_shape_fn(n, |i| (i as f64 + 0.5) / n as f64);
    let cost = Array2::from_shape_fn((n, n), |(i, j)| (grid[i] - grid[j]).powi(2));
    let mu1 = plateau_marginal(&grid, rng);
    let mu2 = plateau_marginal(&grid, rng);
    TransportProblem::new(cost, mu1, mu2, epsilon)
}

fn random_cost_uniform(n: usize, rng: &mut ChaCha8Rng, epsilon: f64) -> Result<TransportProblem> {
    let cost = Array2::from_shape_simple_fn((n, n), || rng.gen::<f64>());
    let mu = Array1::from_elem(n, 1.0 / n as f64);
    TransportProblem::new(cost, mu.clone(), mu, epsilon)
}

/// Setting (a): squared distance on a regular grid of `[0, 1]`, plateau marginals.
pub fn gen_setting_a(n: usize, seed: u64, epsilon: f64) -> Result<TransportProblem> {
    SettingKind::QuadraticPlateaus.generate(n, seed, PROBLEM_STREAM, epsilon)
}

/// Setting (b): i.i.d. uniform cost on `[0, 1]`, uniform marginals.
pub fn gen_setting_b(n: usize, seed: u64, epsilon: f64) -> Result<TransportProblem> {
    SettingKind::RandomCostUniform.generate(n, seed, PROBLEM_STREAM, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub alpha_tol: f64,
    pub reference_residual: f64,
    pub max_iter: usize,
    pub delta: f64,
    pub rate_fit: RateFit,
    /// Worker threads for independent cells; 0 uses all available cores.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            alpha_tol: DEFAULT_ALPHA_TOL,
            reference_residual: crate::spectral::REFERENCE_RESIDUAL,
            max_iter: DEFAULT_BENCH_MAX_ITER,
            delta: DEFAULT_DELTA,
            rate_fit: RateFit::default(),
            threads: 1,
        }
    }
}

fn reference_alpha(problem: &TransportProblem, options: &BenchOptions) -> Result<Array1<f64>> {
    let report = reference_solve(problem, options.reference_residual)?;
    Ok(report.final_state.gauge_fixed_alpha(problem.epsilon()))
}

/// Minimum trace length for the whole-trace fallback fit.
pub const SHORT_TRACE_MIN_POINTS: usize = 3;

/// Strongly regularized problems reach the floor in a handful of iterations;
/// their rate is then fitted on the whole trace instead of the tail window.
fn eta_from_trace(errors: &[f64], options: &BenchOptions) -> Result<f64> {
    let rate = match empirical_rate(errors, &options.rate_fit) {
        Err(OtError::TraceTooShort { .. }) => {
            let whole = RateFit { window_fraction: 1.0, min_points: SHORT_TRACE_MIN_POINTS, ..options.rate_fit };
            empirical_rate(errors, &whole)?
        }
        other => other?,
    };
    let eta = 1.0 - rate;
    if eta > 0.0 {
        Ok(eta)
    } else {
        Err(OtError::SolveFailed(format!("no contraction observed in the error trace (eta = {eta:e})")))
    }
}

/// Gap `1 - rate` of Sinkhorn-Knopp on `problem`, measured against its reference.
pub fn measure_eta(problem: &TransportProblem, options: &BenchOptions) -> Result<f64> {
    let alpha = reference_alpha(problem, options)?;
    let errors = alpha_error_trace(problem, Method::Sinkhorn, &alpha, options.rate_fit.floor, options.max_iter)?;
    eta_from_trace(&errors, options)
}

/// Gap measured on the independent problem of `kind` drawn from stream 1 of `seed`.
pub fn estimate_eta(kind: SettingKind, n: usize, epsilon: f64, seed: u64, options: &BenchOptions) -> Result<f64> {
    let problem = kind.generate(n, seed, ESTIMATION_STREAM, epsilon)?;
    measure_eta(&problem, options)
}

/// Outcome of one (epsilon, instance) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub epsilon: f64,
    pub instance: usize,
    pub seed: u64,
    pub eta: Option<f64>,
    pub theta0: Option<f64>,
    pub sk_iters: Option<usize>,
    pub or_iters: Option<usize>,
    pub converged_sk: bool,
    pub converged_or: bool,
    /// `sk_iters / or_iters` when both runs converged.
    pub ratio: Option<f64>,
    /// Kernel reductions per iteration of each run, `(sk, or)`.
    pub kernel_applications: Option<(u64, u64)>,
    pub error: Option<String>,
}

impl CellResult {
    fn failed(epsilon: f64, instance: usize, seed: u64, error: OtError) -> Self {
        Self {
            epsilon,
            instance,
            seed,
            eta: None,
            theta0: None,
            sk_iters: None,
            or_iters: None,
            converged_sk: false,
            converged_or: false,
            ratio: None,
            kernel_applications: None,
            error: Some(error.to_string()),
        }
    }
}

/// Per-epsilon medians over instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub setting: String,
    pub epsilon: f64,
    pub strategy: String,
    pub eta: Option<f64>,
    pub theta0: Option<f64>,
    pub sk_iters: Option<f64>,
    pub or_iters: Option<f64>,
    /// Median of the per-instance ratios over instances where both runs converged.
    pub ratio: Option<f64>,
    /// Every instance's SK run reached `alpha_tol`.
    pub converged_sk: bool,
    pub converged_or: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub setting: ExperimentSetting,
    pub options: BenchOptions,
    pub cells: Vec<CellResult>,
    pub summary: Vec<EpsilonSummary>,
}

impl BenchResult {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn first_below(errors: &[f64], tol: f64) -> Option<usize> {
    errors.iter().position(|e| *e <= tol)
}

fn run_cell(setting: &ExperimentSetting, options: &BenchOptions, epsilon: f64, instance: usize) -> CellResult {
    let seed = setting.seed.wrapping_add(instance as u64);
    match try_cell(setting, options, epsilon, seed) {
        Ok(mut cell) => {
            cell.instance = instance;
            cell
        }
        Err(e) => CellResult::failed(epsilon, instance, seed, e),
    }
}

fn try_cell(setting: &ExperimentSetting, options: &BenchOptions, epsilon: f64, seed: u64) -> Result<CellResult> {
    let problem = setting.kind.generate(setting.n, seed, PROBLEM_STREAM, epsilon)?;
    let alpha = reference_alpha(&problem, options)?;

    let sk_floor = match setting.strategy {
        Strategy::Measured => options.rate_fit.floor.min(options.alpha_tol),
        _ => options.alpha_tol,
    };
    let sk_config = SolveConfig {
        record_dual_objective: false,
        dual_precision_target: Some(sk_floor),
        reference_alpha: Some(alpha.clone()),
        stall_window: Some(crate::spectral::STALL_WINDOW),
        ..SolveConfig::new(Method::Sinkhorn).with_max_iter(options.max_iter).with_telemetry()
    };
    let sk = solve(&problem, &sk_config)?;
    let sk_errors: Vec<f64> = sk.trace.iter().filter_map(|r| r.alpha_error).collect();
    let sk_iters = first_below(&sk_errors, options.alpha_tol);

    let eta = match setting.strategy {
        Strategy::Estimated => Some(estimate_eta(setting.kind, setting.n, epsilon, seed, options)?),
        Strategy::Measured => Some(eta_from_trace(contracting_part(&sk_errors, sk.termination), options)?),
        Strategy::FixedTheta(_) => None,
    };
    let theta0 = match (setting.strategy, eta) {
        (Strategy::FixedTheta(t), _) => t,
        (_, Some(eta)) => optimal_theta(eta.min(1.0))?,
        _ => unreachable!("eta is computed for every non-fixed strategy"),
    };

    let relax = RelaxationConfig::new(theta0, options.delta)?;
    let or_config = SolveConfig {
        method: Method::Adaptive(relax),
        record_telemetry: false,
        dual_precision_target: Some(options.alpha_tol),
        ..sk_config
    };
    let or = solve(&problem, &or_config)?;
    let or_iters = or.converged.then_some(or.iterations);

    let per_iter = |r: &crate::solver::SolveReport| r.kernel_applications.saturating_sub(2) / r.iterations.max(1) as u64;
    Ok(CellResult {
        epsilon,
        instance: 0,
        seed,
        eta,
        theta0: Some(theta0),
        sk_iters: sk_iters.or((!sk.converged).then_some(sk.iterations)),
        or_iters: or_iters.or(Some(or.iterations)),
        converged_sk: sk_iters.is_some(),
        converged_or: or.converged,
        ratio: match (sk_iters, or_iters) {
            (Some(s), Some(o)) => Some(s as f64 / o.max(1) as f64),
            _ => None,
        },
        kernel_applications: Some((per_iter(&sk), per_iter(&or))),
        error: None,
    })
}

fn summarize(setting: &ExperimentSetting, epsilon: f64, cells: &[&CellResult]) -> EpsilonSummary {
    let collect = |f: &dyn Fn(&CellResult) -> Option<f64>| median(&cells.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
    EpsilonSummary {
        setting: setting.kind.label().into(),
        epsilon,
        strategy: setting.strategy.label(),
        eta: collect(&|c| c.eta),
        theta0: collect(&|c| c.theta0),
        sk_iters: collect(&|c| c.sk_iters.map(|v| v as f64)),
        or_iters: collect(&|c| c.or_iters.map(|v| v as f64)),
        ratio: collect(&|c| c.ratio),
        converged_sk: cells.iter().all(|c| c.converged_sk),
        converged_or: cells.iter().all(|c| c.converged_or),
    }
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let threads = if requested == 0 { available } else { requested };
    threads.clamp(1, jobs.max(1))
}

/// Runs every (epsilon, instance) cell of `setting`.
///
/// Cell failures are recorded in the result rather than returned; the output
/// does not depend on the number of threads.
pub fn run_speed_ratio(setting: &ExperimentSetting, options: &BenchOptions) -> Result<BenchResult> {
    setting.validate()?;
    RelaxationConfig::new(1.0, options.delta)?;
    if !(options.alpha_tol > 0.0 && options.reference_residual > 0.0) || options.max_iter == 0 {
        return Err(OtError::InvalidConfig("benchmark tolerances and max_iter must be positive".into()));
    }

    let jobs: Vec<(f64, usize)> = setting
        .epsilon_list
        .iter()
        .flat_map(|&e| (0..setting.instances).map(move |k| (e, k)))
        .collect();
    let slots: Vec<Mutex<Option<CellResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(options.threads, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(epsilon, instance)) = jobs.get(j) else { break };
                let cell = run_cell(setting, options, epsilon, instance);
                *slots[j].lock().expect("result slot poisoned") = Some(cell);
            });
        }
    });
    let cells: Vec<CellResult> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot poisoned").expect("every cell is processed"))
        .collect();

    let summary = setting
        .epsilon_list
        .iter()
        .map(|&e| {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.epsilon == e).collect();
            summarize(setting, e, &group)
        })
        .collect();
    Ok(BenchResult { setting: setting.clone(), options: *options, cells, summary })
}
