//! Shared fixtures: builtin problems paired with the basis and quadrature
//! configurations the reference values in the tests were produced with.

// Each integration test binary uses its own subset of these helpers.
#![allow(dead_code)]

use std::sync::Arc;

use neoc_core::basis::{even_monomials, gauss_grid, monomial_basis, BasisSet, QuadratureGrid};
use neoc_core::expr::parse;
use neoc_core::hjb::{GateMode, PolicyOptions, DEFAULT_TOL_RES};
use neoc_core::{builtin, policy_iteration, ControlLaw, HjbSolution, ProblemSpec};

pub struct Setup {
    pub spec: Arc<ProblemSpec>,
    pub basis: Arc<BasisSet>,
    pub grid: QuadratureGrid,
    pub opts: PolicyOptions,
}

impl Setup {
    pub fn law(&self, exprs: &[&str]) -> ControlLaw {
        let parsed = exprs
            .iter()
            .map(|s| parse(s).expect("fixture law parses"))
            .collect();
        ControlLaw::from_exprs(parsed, self.spec.state_dim).expect("fixture law is well formed")
    }

    pub fn solve(&self, u0: &ControlLaw) -> HjbSolution {
        self.solve_at(u0, &self.spec.alpha_nominal.clone())
    }

    pub fn solve_at(&self, u0: &ControlLaw, alpha: &[f64]) -> HjbSolution {
        policy_iteration(&self.spec, alpha, &self.basis, &self.grid, u0, &self.opts)
            .expect("fixture solve succeeds")
    }

    /// Tighter-tolerance re-solve, used as the reference side of finite
    /// difference checks.
    pub fn solve_tight(&self, u0: &ControlLaw, alpha: &[f64]) -> HjbSolution {
        let opts = PolicyOptions {
            max_iter: 200,
            tol_w: 1e-13,
            ..self.opts
        };
        policy_iteration(&self.spec, alpha, &self.basis, &self.grid, u0, &opts)
            .expect("reference solve succeeds")
    }
}

pub fn make(name: &str, max_even_degree: u32, quad_order: usize, gate: GateMode) -> Setup {
    let spec = Arc::new(builtin(name).expect("builtin exists"));
    let indices = even_monomials(spec.state_dim, max_even_degree);
    let basis = Arc::new(monomial_basis(spec.state_dim, &indices).expect("basis is valid"));
    let grid = gauss_grid(&spec.lo, &spec.hi, quad_order).expect("grid is valid");
    let opts = PolicyOptions {
        max_iter: 100,
        tol_w: 1e-10,
        tol_res: DEFAULT_TOL_RES,
        gate,
    };
    Setup { spec, basis, grid, opts }
}

pub fn scalar() -> Setup {
    make("scalar_siso", 10, 12, GateMode::Enforce)
}

/// The bilinear input map vanishes quadratically at the origin, so no
/// continuous law contracts trajectories exponentially and the heuristic
/// admissibility gate always trips; it is switched off for this fixture.
pub fn bilinear_reference() -> Setup {
    make("bilinear", 10, 12, GateMode::Off)
}

pub fn bilinear_rich() -> Setup {
    make("bilinear", 16, 18, GateMode::Off)
}

pub fn pendulum() -> Setup {
    make("pendulum", 4, 6, GateMode::Enforce)
}

/// Gate off: the Riccati start recovers a unit pole angle only with cart
/// excursions beyond the probe ball, which the gate would reject.
pub fn cartpole() -> Setup {
    make("cartpole_lqr", 2, 4, GateMode::Off)
}

/// 201 equally spaced points spanning [-1, 1].
pub fn grid_1d() -> Vec<f64> {
    (0..201).map(|i| -1.0 + i as f64 / 100.0).collect()
}

pub fn sup_on_grid_1d(mut f: impl FnMut(f64) -> f64) -> f64 {
    grid_1d().into_iter().map(|x| f(x).abs()).fold(0.0, f64::max)
}

/// Composite Simpson over uniform samples, trapezoid on a trailing odd
/// interval; mirrors the cost quadrature used by the simulator.
pub fn simpson(values: &[f64], dt: f64) -> f64 {
    let k = values.len() - 1;
    if k == 0 {
        return 0.0;
    }
    let even_end = if k % 2 == 0 { k } else { k - 1 };
    let mut acc = 0.0;
    if even_end > 0 {
        let mut odd = 0.0;
        let mut even = 0.0;
        for (i, v) in values[..=even_end].iter().enumerate().skip(1) {
            if i == even_end {
                break;
            }
            if i % 2 == 1 {
                odd += v;
            } else {
                even += v;
            }
        }
        acc += dt / 3.0 * (values[0] + 4.0 * odd + 2.0 * even + values[even_end]);
    }
    if even_end < k {
        acc += dt * 0.5 * (values[k - 1] + values[k]);
    }
    acc
}
