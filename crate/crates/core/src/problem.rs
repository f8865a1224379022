//! Problem representation and the stabilized arithmetic shared by every solver.
//!
//! Plans are never formed inside the iterations. A scaling state stores the
//! logarithms of the diagonal scalings `(a, b)`, and every row or column
//! reduction of the implied plan `diag(a) K diag(b)` (with `K = exp(-c/eps)`)
//! is evaluated as a max-shifted log-sum-exp over `log a + (-c/eps) + log b`.
//! This keeps the iteration meaningful long after `K` itself underflows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{OtError, Result};

/// Relative tolerance on the mass balance `sum(mu1) == sum(mu2)`.
pub const MASS_BALANCE_RTOL: f64 = 1e-12;

/// An entropic optimal transport instance: cost, marginals and regularization.
///
/// Immutable once built. The negated, scaled cost `-c/eps` is cached in both
/// row-major orientations so row and column reductions stream contiguously.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    cost: Array2<f64>,
    mu1: Array1<f64>,
    mu2: Array1<f64>,
    epsilon: f64,
    log_kernel: Array2<f64>,
    log_kernel_t: Array2<f64>,
    log_mu1: Array1<f64>,
    log_mu2: Array1<f64>,
}

impl TransportProblem {
    pub fn new(cost: Array2<f64>, mu1: Array1<f64>, mu2: Array1<f64>, epsilon: f64) -> Result<Self> {
        let (n1, n2) = cost.dim();
        if n1 == 0 || n2 == 0 {
            return Err(OtError::InvalidProblem("cost matrix is empty".into()));
        }
        if mu1.len() != n1 {
            return Err(OtError::DimensionMismatch {
                expected: format!("mu1 of length {n1} (cost rows)"),
                got: format!("length {}", mu1.len()),
            });
        }
        if mu2.len() != n2 {
            return Err(OtError::DimensionMismatch {
                expected: format!("mu2 of length {n2} (cost columns)"),
                got: format!("length {}", mu2.len()),
            });
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(OtError::InvalidProblem(format!(
                "epsilon must be finite and strictly positive, got {epsilon}"
            )));
        }
        if let Some(((i, j), c)) = cost.indexed_iter().find(|(_, c)| !c.is_finite()) {
            return Err(OtError::InvalidProblem(format!("cost[{i}][{j}] = {c} is not finite")));
        }
        for (name, mu) in [("mu1", &mu1), ("mu2", &mu2)] {
            if let Some((i, m)) = mu.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m > 0.0)) {
                return Err(OtError::InvalidProblem(format!(
                    "{name}[{i}] = {m} must be finite and strictly positive"
                )));
            }
        }
        let (s1, s2) = (mu1.sum(), mu2.sum());
        if (s1 - s2).abs() > MASS_BALANCE_RTOL * s1.max(s2) {
            return Err(OtError::InvalidProblem(format!(
                "marginal masses differ: sum(mu1) = {s1}, sum(mu2) = {s2}"
            )));
        }

        let log_kernel = cost.mapv(|c| -c / epsilon);
        let log_kernel_t = log_kernel.t().as_standard_layout().into_owned();
        let log_mu1 = mu1.mapv(f64::ln);
        let log_mu2 = mu2.mapv(f64::ln);
        Ok(Self { cost, mu1, mu2, epsilon, log_kernel, log_kernel_t, log_mu1, log_mu2 })
    }

    /// Same cost and marginals, different regularization.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.cost.clone(), self.mu1.clone(), self.mu2.clone(), epsilon)
    }

    pub fn cost(&self) -> ArrayView2<'_, f64> {
        self.cost.view()
    }

    pub fn mu1(&self) -> ArrayView1<'_, f64> {
        self.mu1.view()
    }

    pub fn mu2(&self) -> ArrayView1<'_, f64> {
        self.mu2.view()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n1(&self) -> usize {
        self.mu1.len()
    }

    pub fn n2(&self) -> usize {
        self.mu2.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mu1.sum()
    }

    pub fn max_cost(&self) -> f64 {
        self.cost.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `-c/eps`, rows indexed by the first marginal.
    pub fn log_kernel(&self) -> ArrayView2<'_, f64> {
        self.log_kernel.view()
    }

    /// `-c^T/eps`, rows indexed by the second marginal.
    pub fn log_kernel_t(&self) -> ArrayView2<'_, f64> {
        self.log_kernel_t.view()
    }

    pub(crate) fn log_mu1(&self) -> ArrayView1<'_, f64> {
        self.log_mu1.view()
    }

    pub(crate) fn log_mu2(&self) -> ArrayView1<'_, f64> {
        self.log_mu2.view()
    }
}

/// A nonnegative transport plan.
///
/// Plans built from user data must be strictly positive. Plans reconstructed
/// from a scaling state may contain entries that underflowed to zero at very
/// small regularization; every consumer treats them with `0 log 0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    entries: Array2<f64>,
}

impl TransportPlan {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = entries.indexed_iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(OtError::InvalidPlan(format!(
                "entry ({i}, {j}) = {v} must be finite and strictly positive"
            )));
        }
        Ok(Self { entries })
    }

    pub(crate) fn from_nonnegative(entries: Array2<f64>) -> Self {
        debug_assert!(entries.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self { entries }
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.sum()
    }
}

/// Logarithms of the diagonal scalings `(a, b)`.
///
/// Equivalently the dual potentials `alpha = eps * log_a`, `beta = eps * log_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingState {
    pub log_a: Array1<f64>,
    pub log_b: Array1<f64>,
}

impl ScalingState {
    pub fn new(log_a: Array1<f64>, log_b: Array1<f64>) -> Self {
        Self { log_a, log_b }
    }

    /// `a = 1, b = 1`: the implied plan is the Gibbs kernel.
    pub fn identity(problem: &TransportProblem) -> Self {
        Self { log_a: Array1::zeros(problem.n1()), log_b: Array1::zeros(problem.n2()) }
    }

    pub fn from_potentials(alpha: &Array1<f64>, beta: &Array1<f64>, epsilon: f64) -> Self {
        Self { log_a: alpha / epsilon, log_b: beta / epsilon }
    }

    pub fn alpha(&self, epsilon: f64) -> Array1<f64> {
        &self.log_a * epsilon
    }

    pub fn beta(&self, epsilon: f64) -> Array1<f64> {
        &self.log_b * epsilon
    }

    pub fn is_finite(&self) -> bool {
        self.log_a.iter().chain(self.log_b.iter()).all(|v| v.is_finite())
    }

    /// Representative with `log_a[0] = 0`; the implied plan is unchanged.
    pub fn gauge_fixed(&self) -> Self {
        let k = self.log_a[0];
        Self { log_a: self.log_a.mapv(|v| v - k), log_b: self.log_b.mapv(|v| v + k) }
    }

    /// Gauge-fixed first potential, `eps * (log_a - log_a[0])`.
    pub fn gauge_fixed_alpha(&self, epsilon: f64) -> Array1<f64> {
        let k = self.log_a[0];
        self.log_a.mapv(|v| epsilon * (v - k))
    }
}

/// `ln(sum(exp(xs)))` with a max shift. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Below this, `exp` yields subnormals or zero.
const LSE_CUTOFF: f64 = -708.0;

/// For each row `i` of `log_kernel`, `ln sum_j exp(log_kernel[i, j] + shift[j])`.
pub(crate) fn row_log_sum_exp(log_kernel: ArrayView2<'_, f64>, shift: ArrayView1<'_, f64>, out: &mut Array1<f64>) {
    let shift = shift.as_slice().expect("contiguous shift");
    let mut buf = vec![0.0; shift.len()];
    for (row, o) in log_kernel.outer_iter().zip(out.iter_mut()) {
        let row = row.to_slice().expect("standard layout kernel");
        let mut m = f64::NEG_INFINITY;
        for ((b, k), s) in buf.iter_mut().zip(row).zip(shift) {
            *b = k + s;
            m = m.max(*b);
        }
        let mut acc = 0.0;
        for b in &buf {
            // the max term contributes 1, so underflowing terms cannot matter
            let d = b - m;
            if d > LSE_CUTOFF {
                acc += d.exp();
            }
        }
        *o = m + acc.ln();
    }
}

/// `ln (A1 gamma)` for the plan implied by `state`.
pub fn log_row_marginals(problem: &TransportProblem, state: &ScalingState) -> Array1<f64> {
    let mut out = Array1::zeros(problem.n1());
    row_log_sum_exp(problem.log_kernel(), state.log_b.view(), &mut out);
    out += &state.log_a;
    out
}

/// `ln (A2 gamma)` for the plan implied by `state`.
pub fn log_col_marginals(problem: &TransportProblem, state: &ScalingState) -> Array1<f64> {
    let mut out = Array1::zeros(problem.n2());
    row_log_sum_exp(problem.log_kernel_t(), state.log_a.view(), &mut out);
    out += &state.log_b;
    out
}

/// `exp(-c/eps)` in the plain domain.
///
/// Fails when an entry underflows to exactly zero; callers that need small
/// regularization should work with [`log_gibbs_kernel`] or scaling states.
pub fn gibbs_kernel(problem: &TransportProblem) -> Result<TransportPlan> {
    let k = problem.log_kernel.mapv(f64::exp);
    if let Some(((row, col), _)) = k.indexed_iter().find(|(_, v)| **v == 0.0) {
        return Err(OtError::KernelUnderflow { row, col });
    }
    Ok(TransportPlan { entries: k })
}

pub fn log_gibbs_kernel(problem: &TransportProblem) -> Array2<f64> {
    problem.log_kernel.clone()
}

/// Row sums `A1 gamma`.
pub fn marginal_rows(plan: &TransportPlan) -> Array1<f64> {
    plan.entries.sum_axis(Axis(1))
}

/// Column sums `A2 gamma`.
pub fn marginal_cols(plan: &TransportPlan) -> Array1<f64> {
    plan.entries.sum_axis(Axis(0))
}

/// Generalized KL divergence `sum p (ln(p/q) - 1) + q`, with `0 ln 0 = 0`.
///
/// Infinite when `q` vanishes where `p` does not.
pub fn kl_divergence(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> f64 {
    Zip::from(p).and(q).fold(0.0, |acc, &p, &q| {
        let term = if p == 0.0 {
            q
        } else if q == 0.0 {
            f64::INFINITY
        } else {
            p * ((p / q).ln() - 1.0) + q
        };
        acc + term
    })
}

/// `<c, gamma> + eps * KL(gamma, 1)`.
pub fn primal_objective(problem: &TransportProblem, plan: &TransportPlan) -> f64 {
    let eps = problem.epsilon;
    Zip::from(&problem.cost).and(&plan.entries).fold(0.0, |acc, &c, &g| {
        let entropy = if g == 0.0 { 1.0 } else { g * (g.ln() - 1.0) + 1.0 };
        acc + c * g + eps * entropy
    })
}

/// `E(alpha, beta) = <alpha, mu1> + <beta, mu2> - eps * sum exp((alpha_i + beta_j - c_ij)/eps)`.
///
/// The exponential sum is the total mass of the implied plan, accumulated in
/// the log domain.
pub fn dual_objective(problem: &TransportProblem, state: &ScalingState) -> f64 {
    let eps = problem.epsilon;
    let log_rows = log_row_marginals(problem, state);
    let log_mass = log_sum_exp(log_rows.as_slice().expect("contiguous"));
    eps * (state.log_a.dot(&problem.mu1) + state.log_b.dot(&problem.mu2)) - eps * log_mass.exp()
}

/// `gamma_ij = exp(log_a_i - c_ij/eps + log_b_j)`, never forming `exp(-c/eps)`.
pub fn plan_from_state(problem: &TransportProblem, state: &ScalingState) -> Result<TransportPlan> {
    check_state_dims(problem, state)?;
    let mut entries = problem.log_kernel.clone();
    Zip::indexed(&mut entries).for_each(|(i, j), v| {
        *v = (state.log_a[i] + *v + state.log_b[j]).exp();
    });
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(OtError::DivergedState);
    }
    Ok(TransportPlan::from_nonnegative(entries))
}

/// Plain-domain view `diag(a) K diag(b)`; may underflow where the log-domain view does not.
pub fn plan_from_state_plain(problem: &TransportProblem, state: &ScalingState) -> Result<TransportPlan> {
    check_state_dims(problem, state)?;
    let a = state.log_a.mapv(f64::exp);
    let b = state.log_b.mapv(f64::exp);
    let mut entries = problem.log_kernel.mapv(f64::exp);
    Zip::indexed(&mut entries).for_each(|(i, j), v| *v = a[i] * *v * b[j]);
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(OtError::DivergedState);
    }
    Ok(TransportPlan::from_nonnegative(entries))
}

pub(crate) fn check_state_dims(problem: &TransportProblem, state: &ScalingState) -> Result<()> {
    if state.log_a.len() != problem.n1() || state.log_b.len() != problem.n2() {
        return Err(OtError::DimensionMismatch {
            expected: format!("scalings of lengths ({}, {})", problem.n1(), problem.n2()),
            got: format!("({}, {})", state.log_a.len(), state.log_b.len()),
        });
    }
    Ok(())
}
