#![allow(dead_code)]

use ndarray::{Array1, Array2};
use oro_core::{ScalingState, TransportPlan, TransportProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_marginal(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(n, || rng.gen_range(0.5..1.5));
    let total = v.sum();
    v / total
}

/// Uniform `[0, 1]` cost, random positive marginals, `epsilon = eps_factor * max cost`.
pub fn random_problem(rng: &mut ChaCha8Rng, n1: usize, n2: usize, eps_factor: f64) -> TransportProblem {
    let cost = Array2::from_shape_simple_fn((n1, n2), || rng.gen::<f64>());
    let mu1 = random_marginal(rng, n1);
    let mu2 = random_marginal(rng, n2);
    let max_cost = cost.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    TransportProblem::new(cost, mu1, mu2, eps_factor * max_cost).unwrap()
}

/// Positive plan with entries spread over a few orders of magnitude.
pub fn random_plan(rng: &mut ChaCha8Rng, n1: usize, n2: usize) -> TransportPlan {
    TransportPlan::new(Array2::from_shape_simple_fn((n1, n2), || rng.gen_range(-3.0f64..1.0).exp() / (n1 * n2) as f64)).unwrap()
}

pub fn random_state(rng: &mut ChaCha8Rng, n1: usize, n2: usize, spread: f64) -> ScalingState {
    ScalingState::new(
        Array1::from_shape_simple_fn(n1, || rng.gen_range(-spread..spread)),
        Array1::from_shape_simple_fn(n2, || rng.gen_range(-spread..spread)),
    )
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// `|x_i - y_j|` between points drawn from two clusters `[0, 0.3]` and
/// `[0.7, 1]`, random positive marginals, `epsilon = eps_factor * max cost`.
///
/// The mass imbalance between clusters forces a thin flow across the gap, a
/// bottleneck that makes Sinkhorn iterations contract slowly enough for their
/// asymptotic rates to be observed over many iterations.
pub fn two_cluster_problem(rng: &mut ChaCha8Rng, n1: usize, n2: usize, eps_factor: f64) -> TransportProblem {
    let mut points = |n: usize| {
        Array1::from_shape_fn(n, |i| if i < n / 2 { rng.gen_range(0.0f64..0.3) } else { rng.gen_range(0.7f64..1.0) })
    };
    let x = points(n1);
    let y = points(n2);
    let cost = Array2::from_shape_fn((n1, n2), |(i, j)| (x[i] - y[j]).abs());
    let mu1 = random_marginal(rng, n1);
    let mu2 = random_marginal(rng, n2);
    let max_cost = cost.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    TransportProblem::new(cost, mu1, mu2, eps_factor * max_cost).unwrap()
}
