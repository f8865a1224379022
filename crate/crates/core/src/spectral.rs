//! Local convergence rates.
//!
//! Near the solution, Sinkhorn-Knopp contracts the dual error by the second
//! largest eigenvalue `1 - eta` of
//! `M1 = diag(1/mu1) gamma* diag(1/mu2) gamma*^T` per iteration. The
//! overrelaxed iteration with parameter `theta` contracts by `f(theta, eta)`,
//! minimal at `theta* = 2 / (1 + sqrt(eta))`.
//!
//! `M1` is similar to the symmetric positive semidefinite matrix `B B^T` with
//! `B = diag(mu1)^-1/2 gamma* diag(mu2)^-1/2`, whose top eigenvector is
//! `sqrt(mu1)` with eigenvalue 1. The gap is obtained by power iteration on
//! `B B^T` restricted to the orthogonal complement of that vector.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{OtError, Result};
use crate::problem::{TransportPlan, TransportProblem};
use crate::solver::{reference_solve, solve, Method, SolveConfig, Termination};

/// Largest marginal error tolerated in a reference plan fed to [`build_m1`].
pub const REFERENCE_MARGINAL_LIMIT: f64 = 1e-10;
/// Residual of the reference solve behind [`analyze`].
pub const REFERENCE_RESIDUAL: f64 = 1e-12;
pub const EIGEN_MAX_ITER: usize = 10_000;
pub const EIGEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub eta: f64,
    pub sk_rate: f64,
    pub theta_opt: f64,
    pub or_rate: f64,
}

impl SpectralReport {
    pub fn from_eta(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        let theta_opt = optimal_theta(eta)?;
        Ok(Self { eta, sk_rate: 1.0 - eta, theta_opt, or_rate: sor_rate(theta_opt, eta)? })
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(OtError::InvalidConfig(format!("spectral gap must lie in (0, 1], got {eta}")))
    }
}

fn check_reference(plan: &TransportPlan, problem: &TransportProblem) -> Result<()> {
    if plan.dim() != (problem.n1(), problem.n2()) {
        return Err(OtError::DimensionMismatch {
            expected: format!("{}x{} plan", problem.n1(), problem.n2()),
            got: format!("{}x{}", plan.dim().0, plan.dim().1),
        });
    }
    let rows = plan.entries().sum_axis(Axis(1));
    let cols = plan.entries().sum_axis(Axis(0));
    let error = (&rows - &problem.mu1())
        .iter()
        .chain((&cols - &problem.mu2()).iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if error > REFERENCE_MARGINAL_LIMIT || error.is_nan() {
        return Err(OtError::InfeasibleReference { error, limit: REFERENCE_MARGINAL_LIMIT });
    }
    Ok(())
}

/// `M1 = diag(1/mu1) gamma* diag(1/mu2) gamma*^T`.
pub fn build_m1(reference_plan: &TransportPlan, problem: &TransportProblem) -> Result<Array2<f64>> {
    check_reference(reference_plan, problem)?;
    let g = reference_plan.entries();
    let scaled = &g / &problem.mu2().insert_axis(Axis(0));
    let mut m1 = scaled.dot(&g.t());
    m1 /= &problem.mu1().insert_axis(Axis(1));
    Ok(m1)
}

/// `B = diag(mu1)^-1/2 gamma* diag(mu2)^-1/2`.
pub fn symmetric_factor(reference_plan: &TransportPlan, problem: &TransportProblem) -> Result<Array2<f64>> {
    check_reference(reference_plan, problem)?;
    let r1 = problem.mu1().mapv(|m| 1.0 / m.sqrt());
    let r2 = problem.mu2().mapv(|m| 1.0 / m.sqrt());
    Ok(&reference_plan.entries() * &r1.insert_axis(Axis(1)) * &r2.insert_axis(Axis(0)))
}

/// Second largest eigenvalue of a symmetric PSD matrix whose top eigenvector is `top`.
pub fn second_eigenvalue(sym: &Array2<f64>, top: ArrayView1<'_, f64>) -> Result<f64> {
    let n = sym.nrows();
    if n <= 1 {
        return Ok(0.0);
    }
    let u = &top / top.dot(&top).sqrt();
    let deflate = |v: &mut Array1<f64>| {
        let c = u.dot(v);
        v.scaled_add(-c, &u);
    };

    // deterministic, generic start vector
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + ((i * 7919 + 13) % 101) as f64 / 101.0);
    deflate(&mut v);
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    v /= norm;

    let mut rho = f64::NAN;
    for _ in 0..EIGEN_MAX_ITER {
        let mut w = sym.dot(&v);
        deflate(&mut w);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Ok(0.0);
        }
        v = w / norm;
        if (next - rho).abs() <= EIGEN_TOL {
            return Ok(next.max(0.0));
        }
        rho = next;
    }
    Err(OtError::EigenNotConverged { iterations: EIGEN_MAX_ITER })
}

/// `eta = 1 - lambda_2(M1)`, given the stationary weights `mu1` of `M1`.
///
/// `M1` is symmetrized by the similarity `D^1/2 M1 D^-1/2` with `D = diag(mu1)`.
pub fn spectral_gap_weighted(m1: &Array2<f64>, mu1: ArrayView1<'_, f64>) -> Result<f64> {
    if m1.nrows() != m1.ncols() || m1.nrows() != mu1.len() {
        return Err(OtError::DimensionMismatch {
            expected: format!("square matrix of size {}", mu1.len()),
            got: format!("{}x{}", m1.nrows(), m1.ncols()),
        });
    }
    let row_error = m1.sum_axis(Axis(1)).iter().fold(0.0f64, |acc, s| acc.max((s - 1.0).abs()));
    if !(row_error <= 1e-8) {
        return Err(OtError::InvalidConfig(format!("M1 is not row-stochastic (error {row_error:e})")));
    }
    let sq = mu1.mapv(f64::sqrt);
    let mut sym = m1 * &sq.view().insert_axis(Axis(1)) / &sq.view().insert_axis(Axis(0));
    let t = sym.t().to_owned();
    sym = (&sym + &t) / 2.0;
    let lambda2 = second_eigenvalue(&sym, sq.view())?;
    Ok(1.0 - lambda2)
}

/// `eta = 1 - lambda_2(M1)` for a row-stochastic `M1` built by [`build_m1`].
///
/// The stationary weights are recovered from reversibility,
/// `pi_i M1[i][0] = pi_0 M1[0][i]`; this needs a positive first row and column.
pub fn spectral_gap(m1: &Array2<f64>) -> Result<f64> {
    let n = m1.nrows();
    if n == 0 || m1.ncols() != n {
        return Err(OtError::DimensionMismatch { expected: "non-empty square matrix".into(), got: format!("{:?}", m1.dim()) });
    }
    let mut pi = Array1::from_shape_fn(n, |i| if i == 0 { 1.0 } else { m1[[0, i]] / m1[[i, 0]] });
    if pi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(OtError::InvalidConfig("M1 has vanishing entries in its first row or column".into()));
    }
    pi /= pi.sum();
    spectral_gap_weighted(m1, pi.view())
}

/// Spectral gap computed directly from the symmetric factor of `reference_plan`.
pub fn spectral_gap_of_plan(reference_plan: &TransportPlan, problem: &TransportProblem) -> Result<f64> {
    let b = symmetric_factor(reference_plan, problem)?;
    let sym = b.dot(&b.t());
    let top = problem.mu1().mapv(f64::sqrt);
    Ok(1.0 - second_eigenvalue(&sym, top.view())?)
}

/// `theta* = 2 / (1 + sqrt(eta))`.
pub fn optimal_theta(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(2.0 / (1.0 + eta.sqrt()))
}

/// Local linear rate `f(theta, eta)` of the overrelaxed iteration.
pub fn sor_rate(theta: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if !(theta > 0.0 && theta < 2.0) {
        return Err(OtError::InvalidConfig(format!("theta must lie in (0, 2), got {theta}")));
    }
    let star = 2.0 / (1.0 + eta.sqrt());
    if theta > star {
        return Ok(theta - 1.0);
    }
    let q = 1.0 - eta;
    // theta^2 q - 4 (theta - 1), factored so that it vanishes exactly at theta*
    let inner = (star - theta) * (2.0 * (1.0 + eta.sqrt()) - theta * q);
    let disc = (q * theta * theta * inner).max(0.0);
    Ok(0.5 * theta * theta * q - (theta - 1.0) + 0.5 * disc.sqrt())
}

/// Window selection for [`empirical_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Fraction of the pre-floor trace used for the fit.
    pub window_fraction: f64,
    /// Errors at or below this are excluded (round-off regime).
    pub floor: f64,
    pub min_points: usize,
}

impl Default for RateFit {
    fn default() -> Self {
        Self { window_fraction: 0.3, floor: 1e-10, min_points: 20 }
    }
}

/// Per-iteration contraction factor fitted on the tail of an error trace.
///
/// Least-squares slope of `ln e_l` against `l` over the last
/// `window_fraction` of the iterations preceding the first error at or below
/// `floor`, exponentiated.
pub fn empirical_rate(errors: &[f64], fit: &RateFit) -> Result<f64> {
    let end = errors.iter().position(|e| *e <= fit.floor).unwrap_or(errors.len());
    let usable = &errors[..end];
    let tail_len = ((usable.len() as f64) * fit.window_fraction).ceil() as usize;
    if tail_len < fit.min_points {
        return Err(OtError::TraceTooShort { points: tail_len, required: fit.min_points });
    }
    let start = usable.len() - tail_len;
    let tail = &usable[start..];
    if tail.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(OtError::NonFinite("error trace".into()));
    }
    let n = tail.len() as f64;
    let xm = (tail.len() - 1) as f64 / 2.0;
    let ym = tail.iter().map(|e| e.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, e) in tail.iter().enumerate() {
        let dx = k as f64 - xm;
        sxy += dx * (e.ln() - ym);
        sxx += dx * dx;
    }
    Ok((sxy / sxx).exp())
}

/// Runs `method` with distance-to-reference telemetry until the dual error
/// reaches `fit.floor` (or `max_iter`), and fits its local rate.
pub fn measure_rate(
    problem: &TransportProblem,
    method: Method,
    reference_alpha: &Array1<f64>,
    fit: &RateFit,
    max_iter: usize,
) -> Result<f64> {
    let errors = alpha_error_trace(problem, method, reference_alpha, fit.floor, max_iter)?;
    empirical_rate(&errors, fit)
}

/// Iterations without a new minimum after which an error trace is considered stalled.
pub const STALL_WINDOW: usize = 200;

/// `|alpha^l - alpha*|_inf` along a run stopped once it reaches `floor`.
///
/// When the reference is too coarse for `floor` to be reachable the errors
/// level off; the run then stops after [`STALL_WINDOW`] iterations without
/// progress and the trace is cut where it first comes within a factor 10 of
/// its minimum, so that only the contracting part is returned.
pub fn alpha_error_trace(
    problem: &TransportProblem,
    method: Method,
    reference_alpha: &Array1<f64>,
    floor: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let config = SolveConfig {
        record_dual_objective: false,
        dual_precision_target: Some(floor),
        reference_alpha: Some(reference_alpha.clone()),
        stall_window: Some(STALL_WINDOW),
        ..SolveConfig::new(method).with_max_iter(max_iter).with_telemetry()
    };
    let report = solve(problem, &config)?;
    let errors: Vec<f64> = report.trace.iter().filter_map(|r| r.alpha_error).collect();
    Ok(contracting_part(&errors, report.termination).to_vec())
}

/// The trace up to its noise level when the run stalled, the whole trace otherwise.
pub fn contracting_part(errors: &[f64], termination: Termination) -> &[f64] {
    if termination != Termination::Stalled {
        return errors;
    }
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = errors.iter().position(|e| *e <= 10.0 * min).unwrap_or(errors.len());
    &errors[..cut]
}

/// Gap and predicted rates from a tight reference solve of `problem`.
pub fn analyze(problem: &TransportProblem) -> Result<SpectralReport> {
    let reference = reference_solve(problem, REFERENCE_RESIDUAL)?;
    let plan = reference.plan(problem)?;
    SpectralReport::from_eta(spectral_gap_of_plan(&plan, problem)?.clamp(f64::MIN_POSITIVE, 1.0))
}
