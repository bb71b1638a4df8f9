//! Solver toolkit for closed-loop optimal control of control-affine systems.
//!
//! The pipeline: define a problem (dynamics `f`, `g`, cost integrand `m`, `R`,
//! box domain, parameters), pick a monomial basis and a Gauss-Legendre grid,
//! run Galerkin policy iteration on the steady-state Hamilton-Jacobi equation
//! to get value-function weights, then differentiate the converged projection
//! with respect to the parameters to build neighboring-extremal (NEOC)
//! control-law adjustments without re-solving. Linear-quadratic problems get a
//! Riccati fast path, and large perturbations get a homotopy driver that walks
//! the parameter change in small NEOC steps.

pub mod basis;
pub mod expr;
pub mod hjb;
pub mod linalg;
pub mod lqr;
pub mod problem;
pub mod sensitivity;
pub mod sim;

pub use basis::{BasisSet, QuadratureGrid};
pub use expr::Expr;
pub use hjb::{galerkin_step, policy_iteration, ControlLaw, HjbSolution, PolicyOptions};
pub use lqr::{LqrProblem, RiccatiSolution};
pub use problem::{
    builtin, derived_fields, load_problem, DerivedProblem, ParamPerturbation, ProblemSpec,
};
pub use sensitivity::{
    estimate_curvature, homotopy_neoc, min_steps, neoc_adjustment, neoc_law, value_sensitivity,
    weight_sensitivity, HomotopyResult, SensitivityResult,
};
pub use sim::{compare_laws, integrate, ComparisonReport, SimOptions, Trajectory};
