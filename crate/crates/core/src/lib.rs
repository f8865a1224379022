//! Entropic optimal transport with Sinkhorn-Knopp iterations and their
//! safeguarded overrelaxed variant.
//!
//! - [`problem`]: problem data, Gibbs kernel, marginals, objectives and the
//!   log-domain reductions used by every solver.
//! - [`projections`]: (overrelaxed) Bregman projections and the computable
//!   Lyapunov decrease.
//! - [`adaptive`]: the safe overrelaxation parameter.
//! - [`solver`]: Sinkhorn, fixed-parameter and adaptive drivers with telemetry.
//! - [`spectral`]: local convergence rates from the spectral gap.
//! - [`bench`]: reproducible acceleration experiments.

pub mod adaptive;
pub mod bench;
pub mod error;
pub mod problem;
pub mod projections;
pub mod solver;
pub mod spectral;

pub use adaptive::{theta_for_state, theta_safe, theta_star, RelaxationConfig};
pub use error::{OtError, Result};
pub use problem::{
    dual_objective, gibbs_kernel, marginal_cols, marginal_rows, plan_from_state, primal_objective, ScalingState,
    TransportPlan, TransportProblem,
};
pub use projections::{bregman_project, lyapunov_decrease, overrelaxed_project, phi, ProjectionAxis};
pub use spectral::SpectralReport;
pub use solver::{solve, Method, SolveConfig, SolveReport, Termination};

