mod common;

use approx::assert_relative_eq;
use oro_core::problem::{dual_objective, marginal_cols, marginal_rows, primal_objective};
use oro_core::{solve, Method, RelaxationConfig, SolveConfig, Termination};

fn methods() -> [Method; 4] {
    [
        Method::Sinkhorn,
        Method::FixedOmega(1.5),
        Method::Adaptive(RelaxationConfig::default()),
        Method::Adaptive(RelaxationConfig::new(1.95, 0.01).unwrap()),
    ]
}

#[test]
fn methods_agree_on_the_solution() {
    let mut rng = common::rng(800);
    let problem = common::random_problem(&mut rng, 25, 18, 0.05);
    let tol = 1e-10;
    let plans: Vec<_> = methods()
        .into_iter()
        .map(|m| {
            let report = solve(&problem, &SolveConfig::new(m).with_tol(tol)).unwrap();
            assert!(report.converged, "{m:?}");
            report.plan(&problem).unwrap().into_entries()
        })
        .collect();
    for plan in &plans[1..] {
        let diff = common::max_abs_diff(plan.iter().copied(), plans[0].iter().copied());
        assert!(diff <= 100.0 * tol, "{diff:e}");
    }
}

#[test]
fn strong_duality_at_convergence() {
    for seed in 0..5 {
        let mut rng = common::rng(810 + seed);
        let (n1, n2) = (12, 9);
        let problem = common::random_problem(&mut rng, n1, n2, 0.1);
        let report = solve(&problem, &SolveConfig::new(Method::Adaptive(RelaxationConfig::default())).with_tol(1e-12)).unwrap();
        let plan = report.plan(&problem).unwrap();
        let primal = primal_objective(&problem, &plan);
        let dual = dual_objective(&problem, &report.final_state);
        // KL(gamma, 1) carries the constant n1 * n2
        assert_relative_eq!(primal, dual + problem.epsilon() * (n1 * n2) as f64, epsilon = 1e-9);
    }
}

#[test]
fn dual_objective_increases_along_sinkhorn() {
    let mut rng = common::rng(820);
    let problem = common::random_problem(&mut rng, 15, 15, 0.05);
    let config = SolveConfig { record_dual_objective: true, ..SolveConfig::new(Method::Sinkhorn).with_telemetry() };
    let report = solve(&problem, &config).unwrap();
    let values: Vec<f64> = report.trace.iter().filter_map(|r| r.dual_objective).collect();
    assert!(values.len() > 2);
    for w in values.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn kernel_applications_match_between_methods() {
    let mut rng = common::rng(830);
    let problem = common::random_problem(&mut rng, 20, 20, 0.1);
    for m in methods() {
        let report = solve(&problem, &SolveConfig::new(m)).unwrap();
        // one kernel product per half step, plus the initial marginals
        assert_eq!(report.kernel_applications, 2 * report.iterations as u64 + 2, "{m:?}");
    }
}

#[test]
fn iteration_cap_is_reported() {
    let mut rng = common::rng(840);
    let problem = common::random_problem(&mut rng, 20, 20, 0.01);
    let report = solve(&problem, &SolveConfig::new(Method::Sinkhorn).with_max_iter(3)).unwrap();
    assert!(!report.converged);
    assert_eq!(report.termination, Termination::MaxIterations);
    assert_eq!(report.iterations, 3);
}

#[test]
fn small_epsilon_stays_finite() {
    let mut rng = common::rng(850);
    let problem = common::random_problem(&mut rng, 30, 30, 1e-3);
    let report = solve(&problem, &SolveConfig::new(Method::Adaptive(RelaxationConfig::default()))).unwrap();
    assert!(report.converged);
    let plan = report.plan(&problem).unwrap();
    assert!(plan.entries().iter().all(|v| v.is_finite() && *v >= 0.0));
    let row = common::max_abs_diff(marginal_rows(&plan), problem.mu1().iter().copied());
    let col = common::max_abs_diff(marginal_cols(&plan), problem.mu2().iter().copied());
    assert!(row <= 1e-9 && col <= 1e-9);
}
