//! Iteration drivers: plain Sinkhorn-Knopp, fixed-parameter overrelaxation
//! and the safeguarded adaptive scheme.
//!
//! All three alternate a row half-step and a column half-step on the log
//! scalings. One loop iteration performs exactly two kernel reductions (one
//! per axis) for every method. The stopping test reuses the row reduction
//! that the next row half-step needs anyway, and the column residual comes
//! from the reduction of the previous column half-step, so checking
//! convergence costs no extra kernel pass.

use ndarray::{Array1, Zip};
use serde::{Deserialize, Serialize};

use crate::adaptive::{theta_from_log_ratios, RelaxationConfig};
use crate::error::{OtError, Result};
use crate::problem::{
    dual_objective, log_row_marginals, plan_from_state, row_log_sum_exp, ScalingState, TransportPlan, TransportProblem,
};
use crate::projections::{lyapunov_decrease_from_log_ratios, lyapunov_reference, ProjectionAxis};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// A run whose row residual grows past this multiple of its initial value is declared diverged.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Sinkhorn,
    FixedOmega(f64),
    Adaptive(RelaxationConfig),
}

impl Method {
    fn validate(&self) -> Result<()> {
        match self {
            Method::Sinkhorn => Ok(()),
            Method::FixedOmega(w) if *w > 0.0 && *w < 2.0 => Ok(()),
            Method::FixedOmega(w) => Err(OtError::InvalidConfig(format!("fixed omega must lie in (0, 2), got {w}"))),
            Method::Adaptive(cfg) => cfg.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub method: Method,
    /// Threshold on the L-infinity row and column marginal residuals.
    pub tol: f64,
    pub max_iter: usize,
    /// Record one [`TraceRecord`] per iterate.
    pub record_telemetry: bool,
    /// Add the dual objective to each record (one extra kernel pass per iterate).
    pub record_dual_objective: bool,
    /// Clone the scaling state into each record.
    pub record_iterates: bool,
    /// Additional stop on the dual variable. Without `reference_alpha` the
    /// per-iteration change `|alpha_l - alpha_{l-1}|_inf / omega` must drop
    /// below it (on top of the residual test); with a reference the distance
    /// to it replaces the residual test.
    pub dual_precision_target: Option<f64>,
    /// Gauge-fixed (`alpha[0] = 0`) reference potential from a tighter solve.
    pub reference_alpha: Option<Array1<f64>>,
    /// Reference plan; enables KL-to-reference telemetry.
    pub reference_plan: Option<TransportPlan>,
    /// Stop with [`Termination::Stalled`] once the distance to `reference_alpha`
    /// has not reached a new minimum for this many iterations.
    pub stall_window: Option<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::Sinkhorn,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            record_telemetry: false,
            record_dual_objective: true,
            record_iterates: false,
            dual_precision_target: None,
            reference_alpha: None,
            reference_plan: None,
            stall_window: None,
        }
    }
}

impl SolveConfig {
    pub fn new(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_telemetry(mut self) -> Self {
        self.record_telemetry = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if !(self.tol > 0.0) {
            return Err(OtError::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(OtError::InvalidConfig("max_iter must be positive".into()));
        }
        if self.stall_window == Some(0) {
            return Err(OtError::InvalidConfig("stall window must be positive".into()));
        }
        if let Some(t) = self.dual_precision_target {
            if !(t > 0.0) {
                return Err(OtError::InvalidConfig(format!("dual precision target must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
    /// The distance to the reference potential stopped improving.
    Stalled,
}

/// Telemetry for iterate `l`: residuals of `gamma^l`, then the half-steps
/// that produce `gamma^(l+1)` (absent for the final iterate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub row_error: f64,
    pub col_error: f64,
    pub omega_row: Option<f64>,
    pub omega_col: Option<f64>,
    pub decrease_row: Option<f64>,
    pub decrease_col: Option<f64>,
    pub dual_objective: Option<f64>,
    /// `KL(reference, gamma^l)`.
    pub kl_to_reference: Option<f64>,
    /// `KL(reference, .)` after the row half-step.
    pub kl_after_row: Option<f64>,
    /// `|alpha^l - alpha*|_inf`, both gauge-fixed.
    pub alpha_error: Option<f64>,
    #[serde(skip)]
    pub state: Option<ScalingState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub final_state: ScalingState,
    /// Completed full iterations (row then column half-step).
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub final_row_error: f64,
    pub final_col_error: f64,
    pub final_alpha_error: Option<f64>,
    /// Row or column kernel reductions performed by the iteration itself.
    pub kernel_applications: u64,
    pub trace: Vec<TraceRecord>,
}

impl SolveReport {
    pub fn plan(&self, problem: &TransportProblem) -> Result<TransportPlan> {
        plan_from_state(problem, &self.final_state)
    }

    pub fn omega_trace(&self) -> Vec<(f64, f64)> {
        self.trace.iter().filter_map(|r| Some((r.omega_row?, r.omega_col?))).collect()
    }
}

/// `|A1 gamma - mu1|_inf` for the plan implied by `state`.
pub fn stopping_error(state: &ScalingState, problem: &TransportProblem) -> Result<f64> {
    crate::problem::check_state_dims(problem, state)?;
    let log_rows = log_row_marginals(problem, state);
    Ok(linf_residual(log_rows.view(), problem.mu1()))
}

fn linf_residual(log_marginal: ndarray::ArrayView1<'_, f64>, mu: ndarray::ArrayView1<'_, f64>) -> f64 {
    Zip::from(log_marginal).and(mu).fold(0.0f64, |acc, l, m| {
        let r = (l.exp() - m).abs();
        if r.is_nan() || acc.is_nan() {
            f64::NAN
        } else {
            acc.max(r)
        }
    })
}

fn linf_distance(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    Zip::from(x).and(y).fold(0.0f64, |acc, a, b| acc.max((a - b).abs()))
}

/// Runs `config.method` from `a = b = 1`.
pub fn solve(problem: &TransportProblem, config: &SolveConfig) -> Result<SolveReport> {
    config.validate()?;
    if let Some(alpha) = &config.reference_alpha {
        if alpha.len() != problem.n1() {
            return Err(OtError::DimensionMismatch {
                expected: format!("reference alpha of length {}", problem.n1()),
                got: format!("length {}", alpha.len()),
            });
        }
    }
    Driver::new(problem, config).run()
}

/// Plain alternating Bregman projections; `config.method` is ignored.
pub fn solve_sinkhorn(problem: &TransportProblem, config: &SolveConfig) -> Result<SolveReport> {
    solve(problem, &SolveConfig { method: Method::Sinkhorn, ..config.clone() })
}

/// Alternating `omega`-overrelaxed projections with no safeguard; may diverge.
pub fn solve_fixed_omega(problem: &TransportProblem, omega: f64, config: &SolveConfig) -> Result<SolveReport> {
    solve(problem, &SolveConfig { method: Method::FixedOmega(omega), ..config.clone() })
}

/// Overrelaxation with the Lyapunov safeguard, converging for any start.
pub fn solve_adaptive(problem: &TransportProblem, relax: RelaxationConfig, config: &SolveConfig) -> Result<SolveReport> {
    solve(problem, &SolveConfig { method: Method::Adaptive(relax), ..config.clone() })
}

/// Tight solve used as ground truth by the rate analysis and the benchmarks.
///
/// Uses the adaptive scheme with `theta0 = 1.9`, which is globally convergent
/// and far faster than plain iterations when the problem is ill-conditioned.
pub fn reference_solve(problem: &TransportProblem, residual: f64) -> Result<SolveReport> {
    let relax = RelaxationConfig::new(1.9, crate::adaptive::DEFAULT_DELTA)?;
    let config = SolveConfig::new(Method::Adaptive(relax)).with_tol(residual).with_max_iter(2_000_000);
    let report = solve(problem, &config)?;
    if !report.converged {
        return Err(OtError::SolveFailed(format!(
            "reference solve stopped after {} iterations ({:?}) with residual {:e}",
            report.iterations,
            report.termination,
            report.final_row_error.max(report.final_col_error)
        )));
    }
    Ok(report)
}

struct Driver<'a> {
    problem: &'a TransportProblem,
    config: &'a SolveConfig,
    state: ScalingState,
    /// Row reduction `ln(K b)` for the current `b`.
    row_lse: Array1<f64>,
    /// Column reduction `ln(K^T a)` for the current `a`.
    col_lse: Array1<f64>,
    log_ratio: Array1<f64>,
    kernel_applications: u64,
}

impl<'a> Driver<'a> {
    fn new(problem: &'a TransportProblem, config: &'a SolveConfig) -> Self {
        Self {
            problem,
            config,
            state: ScalingState::identity(problem),
            row_lse: Array1::zeros(problem.n1()),
            col_lse: Array1::zeros(problem.n2()),
            log_ratio: Array1::zeros(0),
            kernel_applications: 0,
        }
    }

    fn reduce_rows(&mut self) {
        row_log_sum_exp(self.problem.log_kernel(), self.state.log_b.view(), &mut self.row_lse);
        self.kernel_applications += 1;
    }

    fn reduce_cols(&mut self) {
        row_log_sum_exp(self.problem.log_kernel_t(), self.state.log_a.view(), &mut self.col_lse);
        self.kernel_applications += 1;
    }

    fn omega(&self, log_ratio: &Array1<f64>) -> Result<f64> {
        match self.config.method {
            Method::Sinkhorn => Ok(1.0),
            Method::FixedOmega(w) => Ok(w),
            Method::Adaptive(cfg) => theta_from_log_ratios(log_ratio.view(), &cfg),
        }
    }

    /// Applies one half-step along `axis`, given the reduction for that axis.
    /// Returns `(omega, log ratio before the step)`.
    fn half_step(&mut self, axis: ProjectionAxis) -> Result<f64> {
        let (scale, lse, log_mu) = match axis {
            ProjectionAxis::Rows => (&self.state.log_a, &self.row_lse, self.problem.log_mu1()),
            ProjectionAxis::Cols => (&self.state.log_b, &self.col_lse, self.problem.log_mu2()),
        };
        let mut log_ratio = scale + lse;
        log_ratio -= &log_mu;
        crate::projections::check_ratio(axis, log_ratio.view())?;
        let omega = self.omega(&log_ratio)?;
        let scale = match axis {
            ProjectionAxis::Rows => &mut self.state.log_a,
            ProjectionAxis::Cols => &mut self.state.log_b,
        };
        match self.config.method {
            // classic form a = mu / (K b): direct assignment, not an increment
            Method::Sinkhorn => Zip::from(scale).and(&log_mu).and(lse).for_each(|s, m, l| *s = m - l),
            _ => scale.zip_mut_with(&log_ratio, |s, r| *s -= omega * r),
        }
        self.log_ratio = log_ratio;
        Ok(omega)
    }

    fn alpha_error(&self) -> Option<f64> {
        let reference = self.config.reference_alpha.as_ref()?;
        let alpha = self.state.gauge_fixed_alpha(self.problem.epsilon());
        Some(linf_distance(&alpha, reference))
    }

    fn current_plan(&self) -> Result<TransportPlan> {
        plan_from_state(self.problem, &self.state)
    }

    fn run(mut self) -> Result<SolveReport> {
        let cfg = self.config;
        let telemetry = cfg.record_telemetry;
        let eps = self.problem.epsilon();
        let mu1 = self.problem.mu1();
        let mu2 = self.problem.mu2();

        let mut trace = Vec::new();
        self.reduce_cols();
        let mut initial_row_error = None;
        let mut last_alpha_step = f64::INFINITY;
        let mut iteration = 0usize;
        let mut best_alpha = (f64::INFINITY, 0usize);

        loop {
            self.reduce_rows();
            let row_error = linf_residual((&self.state.log_a + &self.row_lse).view(), mu1);
            let col_error = linf_residual((&self.state.log_b + &self.col_lse).view(), mu2);
            let alpha_error = self.alpha_error();
            let initial = *initial_row_error.get_or_insert(row_error);

            let record = if telemetry {
                let kl_to_reference = match &cfg.reference_plan {
                    Some(r) => Some(lyapunov_reference(&self.current_plan()?, r)),
                    None => None,
                };
                Some(TraceRecord {
                    iteration,
                    row_error,
                    col_error,
                    omega_row: None,
                    omega_col: None,
                    decrease_row: None,
                    decrease_col: None,
                    dual_objective: cfg.record_dual_objective.then(|| dual_objective(self.problem, &self.state)),
                    kl_to_reference,
                    kl_after_row: None,
                    alpha_error,
                    state: cfg.record_iterates.then(|| self.state.clone()),
                })
            } else {
                None
            };

            if let Some(err) = alpha_error {
                if err < best_alpha.0 {
                    best_alpha = (err, iteration);
                }
            }
            let stalled = cfg.stall_window.is_some_and(|w| alpha_error.is_some() && iteration - best_alpha.1 >= w);
            let diverged = !row_error.is_finite()
                || !col_error.is_finite()
                || (initial > 0.0 && row_error > DIVERGENCE_FACTOR * initial);
            let converged = match (cfg.dual_precision_target, &cfg.reference_alpha, alpha_error) {
                (Some(target), Some(_), Some(err)) => err <= target,
                (Some(target), None, _) => row_error <= cfg.tol && col_error <= cfg.tol && last_alpha_step <= target,
                _ => row_error <= cfg.tol && col_error <= cfg.tol,
            };

            if diverged || converged || stalled || iteration >= cfg.max_iter {
                if let Some(r) = record {
                    trace.push(r);
                }
                let termination = if converged {
                    Termination::Converged
                } else if diverged {
                    Termination::Diverged
                } else if stalled {
                    Termination::Stalled
                } else {
                    Termination::MaxIterations
                };
                return Ok(SolveReport {
                    final_state: self.state,
                    iterations: iteration,
                    converged: termination == Termination::Converged,
                    termination,
                    final_row_error: row_error,
                    final_col_error: col_error,
                    final_alpha_error: alpha_error,
                    kernel_applications: self.kernel_applications,
                    trace,
                });
            }

            let omega_row = self.half_step(ProjectionAxis::Rows)?;
            last_alpha_step = eps * self.log_ratio.iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
            let decrease_row = telemetry.then(|| lyapunov_decrease_from_log_ratios(mu1, self.log_ratio.view(), omega_row));
            let kl_after_row = match (&cfg.reference_plan, telemetry) {
                (Some(r), true) => Some(lyapunov_reference(&self.current_plan()?, r)),
                _ => None,
            };

            self.reduce_cols();
            let omega_col = self.half_step(ProjectionAxis::Cols)?;
            let decrease_col = telemetry.then(|| lyapunov_decrease_from_log_ratios(mu2, self.log_ratio.view(), omega_col));

            if let Some(mut r) = record {
                r.omega_row = Some(omega_row);
                r.omega_col = Some(omega_col);
                r.decrease_row = decrease_row;
                r.decrease_col = decrease_col;
                r.kl_after_row = kl_after_row;
                trace.push(r);
            }
            iteration += 1;
        }
    }
}
