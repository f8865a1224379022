//! Safeguarded choice of the overrelaxation parameter.
//!
//! `theta_star(m)` is the largest `w` in `[1, 2]` with `phi_w(m) >= 0`, where
//! `m` is the smallest marginal ratio of the axis about to be projected.
//! Every term of the Lyapunov decrease is then nonnegative, so the clamped
//! value `min(max(1, theta_star - delta), theta0)` yields a strict decrease
//! whenever the plan violates the constraint.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{OtError, Result};
use crate::problem::{ScalingState, TransportProblem};
use crate::projections::{log_marginal_ratio, phi, phi_domega, ProjectionAxis};

pub const DEFAULT_THETA0: f64 = 1.8;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_NEWTON_TOL: f64 = 1e-9;
pub const DEFAULT_NEWTON_MAX_ITER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationConfig {
    /// Parameter used once the iterates are close to the solution, in `[1, 2)`.
    pub theta0: f64,
    /// Security distance subtracted from `theta_star`, in `(0, 1)`.
    pub delta: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self {
            theta0: DEFAULT_THETA0,
            delta: DEFAULT_DELTA,
            newton_tol: DEFAULT_NEWTON_TOL,
            newton_max_iter: DEFAULT_NEWTON_MAX_ITER,
        }
    }
}

impl RelaxationConfig {
    pub fn new(theta0: f64, delta: f64) -> Result<Self> {
        let config = Self { theta0, delta, ..Self::default() };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta0 >= 1.0 && self.theta0 < 2.0) {
            return Err(OtError::InvalidConfig(format!("theta0 must lie in [1, 2), got {}", self.theta0)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(OtError::InvalidConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.newton_tol > 0.0 && self.newton_tol.is_finite()) {
            return Err(OtError::InvalidConfig(format!("newton_tol must be positive, got {}", self.newton_tol)));
        }
        if self.newton_max_iter == 0 {
            return Err(OtError::InvalidConfig("newton_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `theta_star` with default root-finder settings.
pub fn theta_star(min_ratio: f64) -> Result<f64> {
    theta_star_with(min_ratio, &RelaxationConfig::default())
}

/// `sup { w in [1, 2] : phi_w(min_ratio) >= 0 }`.
///
/// For `min_ratio < 1` the map `w -> phi_w(min_ratio)` is concave and strictly
/// decreasing on `[1, 2]`, positive at 1 and negative at 2, so the sup is its
/// unique root. Newton's method starts at `theta0` and falls back to bisection
/// whenever an iterate leaves the current bracket.
pub fn theta_star_with(min_ratio: f64, config: &RelaxationConfig) -> Result<f64> {
    if !min_ratio.is_finite() || min_ratio <= 0.0 {
        return Err(OtError::NonFinite(format!("minimum marginal ratio {min_ratio}")));
    }
    if min_ratio >= 1.0 {
        return Ok(2.0);
    }
    let f = |w: f64| phi(w, min_ratio);
    // rounding can flatten phi when min_ratio is within a few ulps of 1
    if f(2.0) >= 0.0 {
        return Ok(2.0);
    }
    if f(1.0) <= 0.0 {
        return Ok(1.0);
    }

    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    let mut w = if config.theta0 > 1.0 && config.theta0 < 2.0 { config.theta0 } else { 1.5 };
    for _ in 0..config.newton_max_iter {
        let fw = f(w);
        if fw == 0.0 {
            return Ok(w);
        }
        if fw > 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let slope = phi_domega(w, min_ratio);
        let mut next = w - fw / slope;
        if !(next > lo && next < hi) || slope == 0.0 {
            next = 0.5 * (lo + hi);
        }
        if (next - w).abs() <= config.newton_tol || hi - lo <= config.newton_tol {
            return Ok(next);
        }
        w = next;
    }
    // out of iterations: the lower bracket end is always on the safe side
    Ok(lo)
}

/// `min(max(1, theta_star - delta), theta0)`.
pub fn theta_safe(min_ratio: f64, config: &RelaxationConfig) -> Result<f64> {
    let star = theta_star_with(min_ratio, config)?;
    Ok((star - config.delta).max(1.0).min(config.theta0))
}

/// Safe parameter from precomputed `ln((A_k gamma) / mu^k)`.
pub fn theta_from_log_ratios(log_ratio: ArrayView1<'_, f64>, config: &RelaxationConfig) -> Result<f64> {
    let min_log = log_ratio.iter().copied().fold(f64::INFINITY, f64::min);
    theta_safe(min_log.exp(), config)
}

/// Safe overrelaxation parameter for projecting the plan implied by `state` along `axis`.
pub fn theta_for_state(
    state: &ScalingState,
    problem: &TransportProblem,
    axis: ProjectionAxis,
    config: &RelaxationConfig,
) -> Result<f64> {
    let log_ratio = log_marginal_ratio(state, problem, axis)?;
    theta_from_log_ratios(log_ratio.view(), config)
}
