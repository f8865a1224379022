//! Bregman projections onto the marginal constraint sets and their
//! overrelaxed versions.
//!
//! In log-scaling coordinates the overrelaxed projection is
//! `log P^w(gamma) = (1 - w) log gamma + w log P(gamma)`; on a scaling state
//! this adds `w * ln(mu / A gamma)` to the scaling of the projected axis.
//!
//! The decrease of `F(gamma) = KL(gamma*, gamma)` under `P^w` only depends
//! on the marginal ratios `r = (A gamma) / mu`:
//! `F(gamma) - F(P^w gamma) = <mu, phi_w(r)>` with
//! `phi_w(x) = x (1 - x^-w) - w ln x`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{OtError, Result};
use crate::problem::{
    check_state_dims, kl_divergence, log_col_marginals, log_row_marginals, ScalingState, TransportPlan,
    TransportProblem,
};

/// Which marginal constraint a projection targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionAxis {
    /// Row sums equal `mu1`.
    Rows,
    /// Column sums equal `mu2`.
    Cols,
}

impl ProjectionAxis {
    pub fn target<'a>(&self, problem: &'a TransportProblem) -> ArrayView1<'a, f64> {
        match self {
            ProjectionAxis::Rows => problem.mu1(),
            ProjectionAxis::Cols => problem.mu2(),
        }
    }
}

/// `ln((A_k gamma) / mu^k)` for the plan implied by `state`.
pub fn log_marginal_ratio(state: &ScalingState, problem: &TransportProblem, axis: ProjectionAxis) -> Result<Array1<f64>> {
    check_state_dims(problem, state)?;
    let ratio = match axis {
        ProjectionAxis::Rows => log_row_marginals(problem, state) - problem.log_mu1(),
        ProjectionAxis::Cols => log_col_marginals(problem, state) - problem.log_mu2(),
    };
    check_ratio(axis, ratio.view())?;
    Ok(ratio)
}

/// `(A_k gamma) / mu^k` for the plan implied by `state`.
pub fn marginal_ratio(state: &ScalingState, problem: &TransportProblem, axis: ProjectionAxis) -> Result<Array1<f64>> {
    Ok(log_marginal_ratio(state, problem, axis)?.mapv(f64::exp))
}

pub(crate) fn check_ratio(axis: ProjectionAxis, log_ratio: ArrayView1<'_, f64>) -> Result<()> {
    match log_ratio.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(OtError::CollapsedMarginal { axis, index }),
        None => Ok(()),
    }
}

/// Full Bregman projection: rescale the chosen axis so its marginal matches exactly.
pub fn bregman_project(state: &ScalingState, problem: &TransportProblem, axis: ProjectionAxis) -> Result<ScalingState> {
    overrelaxed_project(state, problem, axis, 1.0)
}

/// `omega`-overrelaxed projection of the plan implied by `state`.
pub fn overrelaxed_project(
    state: &ScalingState,
    problem: &TransportProblem,
    axis: ProjectionAxis,
    omega: f64,
) -> Result<ScalingState> {
    if !omega.is_finite() {
        return Err(OtError::NonFinite(format!("relaxation parameter {omega}")));
    }
    let log_ratio = log_marginal_ratio(state, problem, axis)?;
    let mut next = state.clone();
    apply_log_step(&mut next, axis, log_ratio.view(), omega);
    Ok(next)
}

/// `log_scale <- log_scale - omega * log_ratio` on the chosen axis.
pub(crate) fn apply_log_step(state: &mut ScalingState, axis: ProjectionAxis, log_ratio: ArrayView1<'_, f64>, omega: f64) {
    let scale = match axis {
        ProjectionAxis::Rows => &mut state.log_a,
        ProjectionAxis::Cols => &mut state.log_b,
    };
    scale.zip_mut_with(&log_ratio, |s, r| *s -= omega * r);
}

/// `h(t) = e^t - 1 - t`, accurate for small `|t|`.
fn expm1_minus_identity(t: f64) -> f64 {
    if t.abs() < 0.5 {
        let mut term = t * t / 2.0;
        let mut sum = term;
        let mut k = 2.0;
        while term.abs() > 1e-17 * sum.abs() {
            k += 1.0;
            term *= t / k;
            sum += term;
        }
        sum
    } else {
        t.exp_m1() - t
    }
}

/// `phi_w(x) = x (1 - x^-w) - w ln x`.
///
/// Evaluated as `h(ln x) - h((1 - w) ln x)` with `h(t) = e^t - 1 - t`, which is
/// algebraically identical and keeps full relative accuracy near `x = 1`,
/// where `phi_w(1 + z) ~ z^2 (w - w^2/2)`.
pub fn phi(omega: f64, x: f64) -> f64 {
    let l = (x - 1.0).ln_1p();
    expm1_minus_identity(l) - expm1_minus_identity((1.0 - omega) * l)
}

/// `d phi_w(x) / d w = (x^(1-w) - 1) ln x`.
pub fn phi_domega(omega: f64, x: f64) -> f64 {
    let l = (x - 1.0).ln_1p();
    ((1.0 - omega) * l).exp_m1() * l
}

/// `<mu, phi_w(r)>` for precomputed log ratios `ln r`.
pub fn lyapunov_decrease_from_log_ratios(mu: ArrayView1<'_, f64>, log_ratio: ArrayView1<'_, f64>, omega: f64) -> f64 {
    mu.iter()
        .zip(log_ratio)
        .map(|(m, l)| m * (expm1_minus_identity(*l) - expm1_minus_identity((1.0 - omega) * l)))
        .sum()
}

/// Decrease of `KL(gamma*, .)` caused by `overrelaxed_project(state, .., omega)`.
///
/// Computable without knowing `gamma*`; linear cost in the axis dimension
/// once the marginal is known.
pub fn lyapunov_decrease(state: &ScalingState, problem: &TransportProblem, axis: ProjectionAxis, omega: f64) -> Result<f64> {
    let log_ratio = log_marginal_ratio(state, problem, axis)?;
    Ok(lyapunov_decrease_from_log_ratios(axis.target(problem), log_ratio.view(), omega))
}

/// `F(plan) = KL(reference_plan, plan)`.
///
/// Only available when a reference solution is known; used to audit solver runs.
pub fn lyapunov_reference(plan: &TransportPlan, reference_plan: &TransportPlan) -> f64 {
    kl_divergence(reference_plan.entries(), plan.entries())
}

fn plan_log_ratio(plan: &TransportPlan, problem: &TransportProblem, axis: ProjectionAxis) -> Result<Array1<f64>> {
    if plan.dim() != (problem.n1(), problem.n2()) {
        return Err(OtError::DimensionMismatch {
            expected: format!("{}x{} plan", problem.n1(), problem.n2()),
            got: format!("{}x{}", plan.dim().0, plan.dim().1),
        });
    }
    let sums = match axis {
        ProjectionAxis::Rows => plan.entries().sum_axis(Axis(1)),
        ProjectionAxis::Cols => plan.entries().sum_axis(Axis(0)),
    };
    let log_ratio = sums.mapv(f64::ln) - axis.target(problem).mapv(f64::ln);
    check_ratio(axis, log_ratio.view())?;
    Ok(log_ratio)
}

/// Overrelaxed projection of an arbitrary positive plan (not necessarily
/// diagonally similar to the Gibbs kernel).
pub fn project_plan(plan: &TransportPlan, problem: &TransportProblem, axis: ProjectionAxis, omega: f64) -> Result<TransportPlan> {
    let log_ratio = plan_log_ratio(plan, problem, axis)?;
    let mut entries: Array2<f64> = plan.entries().to_owned();
    match axis {
        ProjectionAxis::Rows => {
            for (mut row, l) in entries.outer_iter_mut().zip(&log_ratio) {
                let s = (-omega * l).exp();
                row.mapv_inplace(|v| v * s);
            }
        }
        ProjectionAxis::Cols => {
            let s = log_ratio.mapv(|l| (-omega * l).exp());
            for mut row in entries.outer_iter_mut() {
                row *= &s;
            }
        }
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(OtError::DivergedState);
    }
    Ok(TransportPlan::from_nonnegative(entries))
}

/// [`lyapunov_decrease`] for an arbitrary positive plan.
pub fn lyapunov_decrease_plan(plan: &TransportPlan, problem: &TransportProblem, axis: ProjectionAxis, omega: f64) -> Result<f64> {
    let log_ratio = plan_log_ratio(plan, problem, axis)?;
    Ok(lyapunov_decrease_from_log_ratios(axis.target(problem), log_ratio.view(), omega))
}
