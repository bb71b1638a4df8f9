//! Galerkin policy iteration for the Hamilton-Jacobi-Bellman equation.
//!
//! Starting from a stabilizing control law, each sweep projects the linear
//! policy-evaluation PDE onto a finite basis, solves the resulting N x N
//! system for value weights, and improves the policy from the weight
//! gradient. The value iterates decrease monotonically when the initial law
//! is admissible; the solver records violations of that property instead of
//! trusting it.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisCache, BasisSet, QuadratureGrid};
use crate::expr::{CompiledExpr, Expr, ExprError};
use crate::linalg;
use crate::problem::{DerivedProblem, EvalBuf, ProblemSpec};
use crate::sim;

/// Iteration cap matching the reference experiments.
pub const DEFAULT_MAX_ITER: usize = 100;
/// Weight-change stopping tolerance (infinity norm).
pub const DEFAULT_TOL_W: f64 = 1e-10;
/// Projected-residual acceptance bound relative to the load vector.
pub const DEFAULT_TOL_RES: f64 = 1e-9;
/// Condition-number ceiling for the Galerkin matrix.
pub(crate) const COND_LIMIT: f64 = 1e12;
/// Weight-norm ceiling beyond which the iteration is declared divergent.
const DIVERGENCE_LIMIT: f64 = 1e9;
/// Relative slack under which a value increase is recorded but tolerated.
const MONO_RECORD_SLACK: f64 = 1e-9;
/// Relative increase treated as unambiguous growth by the abort counter.
/// Quadrature noise near the conditioning ceiling can jitter iterates by
/// ~1e-6 relative without the iteration going anywhere; only growth well
/// clear of that floor counts toward the abort.
const MONO_ABORT_SLACK: f64 = 1e-3;
/// Consecutive growing iterations tolerated before aborting.
const MONO_ABORT_RUN: usize = 3;
/// Relative tolerance for the value-nonnegativity post-check.
const PHI_SIGN_SLACK: f64 = 1e-9;
/// Acceptance tolerance for |u(0)| at law construction.
const ORIGIN_TOL: f64 = 1e-9;
/// Horizon for the admissibility probe simulations.
const GATE_HORIZON: f64 = 20.0;
/// Required terminal contraction for an admissibility probe.
const GATE_CONTRACTION: f64 = 1e-3;
/// Probes must stay within the domain box scaled by this factor.
const GATE_CONTAINMENT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(
        "Galerkin matrix is ill-conditioned (cond ~ {cond:.3e}); reduce the basis degrees, \
         raise the quadrature order, or shrink the domain"
    )]
    IllConditioned { cond: f64 },
    #[error(
        "policy evaluation produced non-positive value (min value {min:.3e} at a quadrature \
         node); the evaluated control law is likely not admissible"
    )]
    NonPositiveValue { min: f64 },
    #[error("policy iteration diverged at iteration {iteration} (weight norm {norm:.3e})")]
    Diverged { iteration: usize, norm: f64 },
    #[error(
        "value iterates grew for {consecutive} consecutive iterations (relative increase \
         {worst:.3e} at iteration {iteration})"
    )]
    NotMonotone {
        iteration: usize,
        consecutive: usize,
        worst: f64,
    },
    #[error(
        "projected residual {residual:.3e} exceeds the acceptance bound {bound:.3e}; the \
         Galerkin solve lost accuracy"
    )]
    ResidualCheck { residual: f64, bound: f64 },
    #[error("control law does not vanish at the origin (|u(0)| = {norm:.3e})")]
    OriginNotZero { norm: f64 },
    #[error("initial control law failed the admissibility probe: {detail}")]
    Inadmissible { detail: String },
    #[error("point lies outside the problem domain; use the unchecked variant to extrapolate")]
    OutsideDomain,
    #[error("linear solve failed")]
    Numerical,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Reusable buffers for control-law evaluation. One instance per thread of
/// work; methods resize on demand.
#[derive(Debug, Default, Clone)]
pub struct LawScratch {
    grad: Vec<f64>,
    gphi: Vec<f64>,
    gphi2: Vec<f64>,
    gx: Vec<f64>,
    tp: Vec<f64>,
    tp2: Vec<f64>,
    buf: EvalBuf,
}

/// Feedback law u(x) = -1/2 R^{-1} g(x,a)^T J_Psi(x)^T w induced by value
/// weights on a basis.
#[derive(Debug, Clone)]
pub struct GalerkinLaw {
    pub(crate) weights: DVector<f64>,
    pub(crate) alpha: Vec<f64>,
    pub(crate) basis: Arc<BasisSet>,
    pub(crate) problem: Arc<ProblemSpec>,
    pub(crate) rinv: DMatrix<f64>,
}

/// Static linear feedback u = -K x.
#[derive(Debug, Clone)]
pub struct GainLaw {
    pub(crate) k: DMatrix<f64>,
}

/// Control law given directly as expressions in the state variables.
#[derive(Debug, Clone)]
pub struct ExprLaw {
    pub(crate) state_dim: usize,
    pub(crate) exprs: Vec<Expr>,
    pub(crate) code: Vec<CompiledExpr>,
}

/// A base law plus first-order corrections for parameter deviations. Each
/// correction contributes
/// du = -1/2 R^{-1} (g^T J_Psi^T (J_w da) + sum_l da_l (dg/da_l)^T J_Psi^T w)
/// evaluated at the correction's own expansion point.
#[derive(Debug, Clone)]
pub struct AdjustedLaw {
    pub(crate) base: Box<ControlLaw>,
    pub(crate) deltas: Vec<DeltaAdjustment>,
}

/// One first-order control correction. Built by the sensitivity machinery;
/// the fields freeze everything the correction needs so the law stays
/// self-contained.
#[derive(Debug, Clone)]
pub struct DeltaAdjustment {
    pub(crate) problem: Arc<ProblemSpec>,
    pub(crate) basis: Arc<BasisSet>,
    pub(crate) derived: Arc<DerivedProblem>,
    pub(crate) alpha: Vec<f64>,
    pub(crate) delta_alpha: Vec<f64>,
    pub(crate) base_weights: DVector<f64>,
    pub(crate) weight_step: DVector<f64>,
    pub(crate) rinv: DMatrix<f64>,
}

/// A state-feedback control law. Every variant satisfies u(0) = 0; the
/// constructors verify it and refuse laws that do not vanish at the origin.
#[derive(Debug, Clone)]
pub enum ControlLaw {
    Galerkin(GalerkinLaw),
    LinearGain(GainLaw),
    Exprs(ExprLaw),
    Adjusted(AdjustedLaw),
}

impl fmt::Display for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Galerkin(g) => {
                write!(f, "galerkin law ({} basis functions)", g.weights.len())
            }
            ControlLaw::LinearGain(g) => {
                write!(f, "linear gain ({}x{})", g.k.nrows(), g.k.ncols())
            }
            ControlLaw::Exprs(e) => write!(f, "expression law ({} components)", e.exprs.len()),
            ControlLaw::Adjusted(a) => {
                write!(f, "{} with {} correction(s)", a.base, a.deltas.len())
            }
        }
    }
}

/// Inverse of the control penalty, via Cholesky. The problem constructor
/// guarantees R is symmetric positive definite.
pub(crate) fn control_penalty_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>, HjbError> {
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(HjbError::Numerical)
}

impl ControlLaw {
    /// Feedback law induced by value weights. Fails if u(0) does not vanish,
    /// which can only happen when the basis contains degree-one terms with
    /// nonzero weight.
    pub fn galerkin(
        problem: Arc<ProblemSpec>,
        basis: Arc<BasisSet>,
        alpha: Vec<f64>,
        weights: DVector<f64>,
    ) -> Result<ControlLaw, HjbError> {
        if basis.dim != problem.state_dim {
            return Err(HjbError::Invalid(format!(
                "basis dimension {} does not match state dimension {}",
                basis.dim, problem.state_dim
            )));
        }
        if weights.len() != basis.len() {
            return Err(HjbError::Invalid(format!(
                "{} weights for {} basis functions",
                weights.len(),
                basis.len()
            )));
        }
        if alpha.len() != problem.param_dim {
            return Err(HjbError::Invalid(format!(
                "{} parameter values for {} parameters",
                alpha.len(),
                problem.param_dim
            )));
        }
        let rinv = control_penalty_inverse(&problem.r)?;
        let law = ControlLaw::Galerkin(GalerkinLaw {
            weights,
            alpha,
            basis,
            problem,
            rinv,
        });
        law.check_origin()?;
        Ok(law)
    }

    /// Linear feedback u = -K x with K of shape p x n.
    pub fn linear_gain(k: DMatrix<f64>) -> Result<ControlLaw, HjbError> {
        if k.nrows() == 0 || k.ncols() == 0 {
            return Err(HjbError::Invalid("empty gain matrix".into()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(HjbError::Invalid("gain matrix has non-finite entries".into()));
        }
        Ok(ControlLaw::LinearGain(GainLaw { k }))
    }

    /// Control law from one expression per input channel, in the state
    /// variables x1..xn only.
    pub fn from_exprs(exprs: Vec<Expr>, state_dim: usize) -> Result<ControlLaw, HjbError> {
        if exprs.is_empty() || state_dim == 0 {
            return Err(HjbError::Invalid("empty expression law".into()));
        }
        let vars: Vec<String> = (0..state_dim).map(|i| format!("x{}", i + 1)).collect();
        let code = exprs
            .iter()
            .map(|e| CompiledExpr::compile(e, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        let law = ControlLaw::Exprs(ExprLaw {
            state_dim,
            exprs,
            code,
        });
        law.check_origin()?;
        Ok(law)
    }

    /// Base law plus first-order corrections. Only the sensitivity machinery
    /// builds the correction payloads.
    pub(crate) fn adjusted(
        base: ControlLaw,
        deltas: Vec<DeltaAdjustment>,
    ) -> Result<ControlLaw, HjbError> {
        let law = ControlLaw::Adjusted(AdjustedLaw {
            base: Box::new(base),
            deltas,
        });
        law.check_origin()?;
        Ok(law)
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ControlLaw::Galerkin(g) => g.problem.state_dim,
            ControlLaw::LinearGain(g) => g.k.ncols(),
            ControlLaw::Exprs(e) => e.state_dim,
            ControlLaw::Adjusted(a) => a.base.state_dim(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ControlLaw::Galerkin(g) => g.problem.control_dim,
            ControlLaw::LinearGain(g) => g.k.nrows(),
            ControlLaw::Exprs(e) => e.exprs.len(),
            ControlLaw::Adjusted(a) => a.base.control_dim(),
        }
    }

    /// Evaluates the law into `out` (length `control_dim`). Non-finite state
    /// values propagate; the caller guards.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64], s: &mut LawScratch) {
        debug_assert_eq!(x.len(), self.state_dim());
        debug_assert_eq!(out.len(), self.control_dim());
        match self {
            ControlLaw::Galerkin(g) => g.eval_into(x, out, s),
            ControlLaw::LinearGain(g) => {
                for (a, row) in g.k.row_iter().enumerate() {
                    let mut acc = 0.0;
                    for (i, &xi) in x.iter().enumerate() {
                        acc += row[i] * xi;
                    }
                    out[a] = -acc;
                }
            }
            ControlLaw::Exprs(e) => {
                for (o, c) in out.iter_mut().zip(&e.code) {
                    *o = c.eval_scratch(x, &mut s.buf.stack);
                }
            }
            ControlLaw::Adjusted(a) => {
                a.base.eval_into(x, out, s);
                for d in &a.deltas {
                    d.add_into(x, out, s);
                }
            }
        }
    }

    /// Allocating convenience wrapper over [`eval_into`](Self::eval_into).
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut s = LawScratch::default();
        let mut out = vec![0.0; self.control_dim()];
        self.eval_into(x, &mut out, &mut s);
        out
    }

    fn check_origin(&self) -> Result<(), HjbError> {
        let zero = vec![0.0; self.state_dim()];
        let u = self.eval(&zero);
        let norm = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() || norm > ORIGIN_TOL {
            return Err(HjbError::OriginNotZero { norm });
        }
        Ok(())
    }
}

impl GalerkinLaw {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    // The summation orders here (basis index ascending, then state axis,
    // then input channel) are mirrored exactly by the solver's node-table
    // path so that a law evaluated at a quadrature node reproduces the
    // iteration's internal control values bit for bit.
    fn eval_into(&self, x: &[f64], out: &mut [f64], s: &mut LawScratch) {
        let n = self.problem.state_dim;
        let p = self.problem.control_dim;
        let nf = self.basis.len();
        s.grad.resize(nf * n, 0.0);
        self.basis.eval_grad(x, &mut s.grad);
        s.gphi.resize(n, 0.0);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..nf {
                acc += self.weights[j] * s.grad[j * n + i];
            }
            s.gphi[i] = acc;
        }
        s.gx.resize(n * p, 0.0);
        self.problem
            .eval_g_into(x, &self.alpha, &mut s.buf, &mut s.gx);
        s.tp.resize(p, 0.0);
        for c in 0..p {
            let mut acc = 0.0;
            for d in 0..n {
                acc += s.gx[d * p + c] * s.gphi[d];
            }
            s.tp[c] = acc;
        }
        for a in 0..p {
            let mut acc = 0.0;
            for c in 0..p {
                acc += self.rinv[(a, c)] * s.tp[c];
            }
            out[a] = -0.5 * acc;
        }
    }
}

impl DeltaAdjustment {
    /// Adds the first-order control correction at `x` into `acc`.
    pub(crate) fn add_into(&self, x: &[f64], acc: &mut [f64], s: &mut LawScratch) {
        let n = self.problem.state_dim;
        let p = self.problem.control_dim;
        let nf = self.basis.len();
        s.grad.resize(nf * n, 0.0);
        self.basis.eval_grad(x, &mut s.grad);
        s.gphi.resize(n, 0.0);
        s.gphi2.resize(n, 0.0);
        for i in 0..n {
            let mut step = 0.0;
            let mut base = 0.0;
            for j in 0..nf {
                step += self.weight_step[j] * s.grad[j * n + i];
                base += self.base_weights[j] * s.grad[j * n + i];
            }
            s.gphi[i] = step;
            s.gphi2[i] = base;
        }
        s.gx.resize(n * p, 0.0);
        self.problem
            .eval_g_into(x, &self.alpha, &mut s.buf, &mut s.gx);
        s.tp.resize(p, 0.0);
        for c in 0..p {
            let mut t = 0.0;
            for d in 0..n {
                t += s.gx[d * p + c] * s.gphi[d];
            }
            s.tp[c] = t;
        }
        s.tp2.resize(p, 0.0);
        s.tp2.iter_mut().for_each(|v| *v = 0.0);
        self.problem.pack(x, &self.alpha, &mut s.buf);
        for (l, &da) in self.delta_alpha.iter().enumerate() {
            if da == 0.0 {
                continue;
            }
            let code = &self.derived.code.dg[l];
            for d in 0..n {
                for c in 0..p {
                    let dg = code[d * p + c].eval_scratch(&s.buf.vals, &mut s.buf.stack);
                    s.tp2[c] += da * dg * s.gphi2[d];
                }
            }
        }
        for a in 0..p {
            let mut u = 0.0;
            for c in 0..p {
                u += self.rinv[(a, c)] * (s.tp[c] + s.tp2[c]);
            }
            acc[a] += -0.5 * u;
        }
    }
}

/// When the initial-law admissibility probe runs and what a failure does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Probe failures abort the solve. Default.
    #[default]
    Enforce,
    /// Probe failures are recorded in the solution diagnostics. For laws
    /// that stabilize sub-exponentially the fixed probe horizon is too
    /// strict, and this mode keeps the solver usable on them.
    Warn,
    /// No probes.
    Off,
}

#[derive(Debug, Clone)]
pub struct PolicyOptions {
    pub max_iter: usize,
    /// Stop when the weight change drops to this infinity norm.
    pub tol_w: f64,
    /// Projected-residual acceptance bound, relative to the load vector.
    pub tol_res: f64,
    pub gate: GateMode,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol_w: DEFAULT_TOL_W,
            tol_res: DEFAULT_TOL_RES,
            gate: GateMode::Enforce,
        }
    }
}

/// Record of the value-monotonicity checks across iterations. Pairs are
/// compared node by node starting from the second solved iterate; the first
/// iterate evaluates the caller's initial law and its value carries no
/// ordering guarantee relative to the next one.
#[derive(Debug, Clone, Default)]
pub struct MonotonicityReport {
    /// Number of consecutive iterate pairs compared.
    pub pairs_checked: usize,
    /// Pairs where some node's value grew beyond the recording slack.
    pub violations: usize,
    /// Largest relative per-node increase seen, zero if values only fell.
    pub worst_relative_increase: f64,
}

/// Converged (or capped) output of [`policy_iteration`].
#[derive(Debug, Clone)]
pub struct HjbSolution {
    /// Value weights of the final iterate.
    pub weights: DVector<f64>,
    /// Parameter vector the solve ran at.
    pub alpha: Vec<f64>,
    pub basis: Arc<BasisSet>,
    pub problem: Arc<ProblemSpec>,
    /// Number of Galerkin solves performed.
    pub iterations: usize,
    /// Infinity norm of the weight change per iteration, first entry
    /// measured against the zero vector.
    pub weight_change_norms: Vec<f64>,
    /// Post-refinement projected residual per iteration.
    pub residual_norms: Vec<f64>,
    /// Whether the weight change reached `tol_w` before the iteration cap.
    pub converged: bool,
    pub monotonicity: MonotonicityReport,
    /// Admissibility probe failures observed under [`GateMode::Warn`].
    pub gate_warnings: Vec<String>,
}

impl HjbSolution {
    /// The feedback law induced by the solution weights.
    pub fn law(&self) -> Result<ControlLaw, HjbError> {
        ControlLaw::galerkin(
            Arc::clone(&self.problem),
            Arc::clone(&self.basis),
            self.alpha.clone(),
            self.weights.clone(),
        )
    }

    /// Approximate value w^T Psi(x). Refuses points outside the domain.
    pub fn eval_value(&self, x: &[f64]) -> Result<f64, HjbError> {
        self.check_point(x)?;
        Ok(self.eval_value_unchecked(x))
    }

    /// Value without the domain check; the basis extrapolates polynomially.
    pub fn eval_value_unchecked(&self, x: &[f64]) -> f64 {
        let mut vals = vec![0.0; self.basis.len()];
        self.basis.eval_psi(x, &mut vals);
        let mut acc = 0.0;
        for (j, v) in vals.iter().enumerate() {
            acc += self.weights[j] * v;
        }
        acc
    }

    /// Approximate optimal control at `x`. Refuses points outside the domain.
    pub fn eval_control(&self, x: &[f64]) -> Result<Vec<f64>, HjbError> {
        self.check_point(x)?;
        self.eval_control_unchecked(x)
    }

    /// Control without the domain check.
    pub fn eval_control_unchecked(&self, x: &[f64]) -> Result<Vec<f64>, HjbError> {
        Ok(self.law()?.eval(x))
    }

    /// Pointwise Hamilton-Jacobi defect of the solution,
    /// grad^T f + m - 1/4 grad^T g R^{-1} g^T grad with grad = J_Psi^T w.
    /// Zero for the exact value function; for a projected solution it
    /// measures local model error. No domain check.
    pub fn hjb_residual(&self, x: &[f64]) -> Result<f64, HjbError> {
        let n = self.problem.state_dim;
        let p = self.problem.control_dim;
        let nf = self.basis.len();
        if x.len() != n {
            return Err(HjbError::Invalid(format!(
                "point has {} coordinates, state dimension is {}",
                x.len(),
                n
            )));
        }
        let mut grad = vec![0.0; nf * n];
        self.basis.eval_grad(x, &mut grad);
        let mut gphi = vec![0.0; n];
        for (i, gp) in gphi.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..nf {
                acc += self.weights[j] * grad[j * n + i];
            }
            *gp = acc;
        }
        let f = self.problem.eval_f(x, &self.alpha);
        let g = self.problem.eval_g(x, &self.alpha);
        let m = self.problem.eval_m(x, &self.alpha);
        let mut drift = 0.0;
        for d in 0..n {
            drift += gphi[d] * f[d];
        }
        let mut gt = DVector::zeros(p);
        for c in 0..p {
            let mut acc = 0.0;
            for d in 0..n {
                acc += g[(d, c)] * gphi[d];
            }
            gt[c] = acc;
        }
        let rinv = control_penalty_inverse(&self.problem.r)?;
        let quad = (&rinv * &gt).dot(&gt);
        Ok(drift + m - 0.25 * quad)
    }

    fn check_point(&self, x: &[f64]) -> Result<(), HjbError> {
        if x.len() != self.problem.state_dim {
            return Err(HjbError::Invalid(format!(
                "point has {} coordinates, state dimension is {}",
                x.len(),
                self.problem.state_dim
            )));
        }
        if !self.problem.in_scaled_domain(x, 1.0) {
            return Err(HjbError::OutsideDomain);
        }
        Ok(())
    }
}

/// Dynamics and cost tabulated at the quadrature nodes; these do not change
/// across policy iterations.
pub(crate) struct NodeTables {
    /// Drift, n x K.
    pub(crate) f: DMatrix<f64>,
    /// Input map per node, each n x p.
    pub(crate) g: Vec<DMatrix<f64>>,
    /// State cost per node.
    pub(crate) m: DVector<f64>,
}

pub(crate) fn node_tables(
    p: &ProblemSpec,
    alpha: &[f64],
    grid: &QuadratureGrid,
) -> Result<NodeTables, HjbError> {
    let n = p.state_dim;
    let pc = p.control_dim;
    let kn = grid.len();
    let mut buf = EvalBuf::default();
    let mut f = DMatrix::zeros(n, kn);
    let mut g = Vec::with_capacity(kn);
    let mut m = DVector::zeros(kn);
    let mut frow = vec![0.0; n];
    let mut grow = vec![0.0; n * pc];
    for k in 0..kn {
        let x = grid.node(k);
        p.eval_f_into(x, alpha, &mut buf, &mut frow);
        p.eval_g_into(x, alpha, &mut buf, &mut grow);
        let mk = p.eval_m_buf(x, alpha, &mut buf);
        if frow.iter().chain(grow.iter()).any(|v| !v.is_finite()) || !mk.is_finite() {
            return Err(HjbError::Invalid(format!(
                "dynamics produced a non-finite value at quadrature node {k}"
            )));
        }
        for d in 0..n {
            f[(d, k)] = frow[d];
        }
        g.push(DMatrix::from_row_slice(n, pc, &grow));
        m[k] = mk;
    }
    Ok(NodeTables { f, g, m })
}

/// Projection of the closed-loop advection operator: the matrix with entries
/// A[(j, i)] = <grad psi_i^T (f + g u), psi_j> for the control values given
/// at the quadrature nodes.
pub(crate) fn advection_matrix(
    cache: &BasisCache,
    tables: &NodeTables,
    u_nodes: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = tables.f.nrows();
    let pc = u_nodes.nrows();
    let kn = tables.f.ncols();
    let nf = cache.psi.nrows();

    // Closed-loop velocity v = f + g u per node.
    let mut v = DMatrix::zeros(n, kn);
    for k in 0..kn {
        let gk = &tables.g[k];
        for d in 0..n {
            let mut acc = tables.f[(d, k)];
            for cc in 0..pc {
                acc += gk[(d, cc)] * u_nodes[(cc, k)];
            }
            v[(d, k)] = acc;
        }
    }

    // t[(i, k)] = grad psi_i(x_k) . v_k, so A = Psi_w t^T.
    let mut t = DMatrix::zeros(nf, kn);
    for d in 0..n {
        let gd = &cache.grad[d];
        for k in 0..kn {
            let vd = v[(d, k)];
            for i in 0..nf {
                t[(i, k)] += gd[(i, k)] * vd;
            }
        }
    }
    &cache.psi_w * t.transpose()
}

/// One projected policy-evaluation solve from control values tabulated at
/// the quadrature nodes. Returns the weights, the post-refinement residual,
/// and the value at every node.
fn assemble_solve(
    cache: &BasisCache,
    tables: &NodeTables,
    u_nodes: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol_res: f64,
) -> Result<(DVector<f64>, f64, DVector<f64>), HjbError> {
    let pc = u_nodes.nrows();
    let kn = tables.f.ncols();
    let nf = cache.psi.nrows();

    // c = -(u^T R u + m) per node.
    let mut c = DVector::zeros(kn);
    for k in 0..kn {
        let mut quad = 0.0;
        for a in 0..pc {
            for b in 0..pc {
                quad += u_nodes[(a, k)] * r[(a, b)] * u_nodes[(b, k)];
            }
        }
        c[k] = -(quad + tables.m[k]);
    }

    let a = advection_matrix(cache, tables, u_nodes);
    let b = &cache.psi_w * &c;

    let cond = linalg::cond_2(&a);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(HjbError::IllConditioned { cond });
    }
    let lu = a.clone().lu();
    let mut w = lu.solve(&b).ok_or(HjbError::Numerical)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(HjbError::Numerical);
    }
    linalg::refine_lu(&lu, &a, &b, &mut w);

    let residual = (&a * &w - &b).amax();
    let bound = tol_res * b.amax();
    if residual > bound {
        return Err(HjbError::ResidualCheck { residual, bound });
    }

    // Value non-negativity post-check at the nodes.
    let mut phi = DVector::zeros(kn);
    let mut min_phi = f64::INFINITY;
    let mut max_abs = 0.0f64;
    for k in 0..kn {
        let mut acc = 0.0;
        for j in 0..nf {
            acc += w[j] * cache.psi[(j, k)];
        }
        phi[k] = acc;
        min_phi = min_phi.min(acc);
        max_abs = max_abs.max(acc.abs());
    }
    if min_phi < -PHI_SIGN_SLACK * (1.0 + max_abs) {
        return Err(HjbError::NonPositiveValue { min: min_phi });
    }

    Ok((w, residual, phi))
}

/// Control values of the improved policy at every node, mirroring
/// `GalerkinLaw::eval_into` arithmetic exactly.
pub(crate) fn improve_policy(
    cache: &BasisCache,
    tables: &NodeTables,
    rinv: &DMatrix<f64>,
    w: &DVector<f64>,
    u_nodes: &mut DMatrix<f64>,
) {
    let n = tables.f.nrows();
    let pc = u_nodes.nrows();
    let kn = tables.f.ncols();
    let nf = cache.psi.nrows();
    let mut gphi = vec![0.0; n];
    let mut tp = vec![0.0; pc];
    for k in 0..kn {
        for (i, gp) in gphi.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..nf {
                acc += w[j] * cache.grad[i][(j, k)];
            }
            *gp = acc;
        }
        let gk = &tables.g[k];
        for c in 0..pc {
            let mut acc = 0.0;
            for d in 0..n {
                acc += gk[(d, c)] * gphi[d];
            }
            tp[c] = acc;
        }
        for a in 0..pc {
            let mut acc = 0.0;
            for c in 0..pc {
                acc += rinv[(a, c)] * tp[c];
            }
            u_nodes[(a, k)] = -0.5 * acc;
        }
    }
}

fn check_solver_inputs(
    p: &ProblemSpec,
    alpha: &[f64],
    basis: &BasisSet,
    grid: &QuadratureGrid,
    law: &ControlLaw,
) -> Result<(), HjbError> {
    if basis.dim != p.state_dim || grid.dim != p.state_dim {
        return Err(HjbError::Invalid(format!(
            "basis dimension {} / grid dimension {} do not match state dimension {}",
            basis.dim, grid.dim, p.state_dim
        )));
    }
    if alpha.len() != p.param_dim {
        return Err(HjbError::Invalid(format!(
            "{} parameter values for {} parameters",
            alpha.len(),
            p.param_dim
        )));
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(HjbError::Invalid("non-finite parameter value".into()));
    }
    if law.state_dim() != p.state_dim || law.control_dim() != p.control_dim {
        return Err(HjbError::Invalid(format!(
            "control law maps {} states to {} inputs, problem needs {} to {}",
            law.state_dim(),
            law.control_dim(),
            p.state_dim,
            p.control_dim
        )));
    }
    Ok(())
}

fn law_at_nodes(
    law: &ControlLaw,
    grid: &QuadratureGrid,
    pc: usize,
) -> Result<DMatrix<f64>, HjbError> {
    let kn = grid.len();
    let mut u_nodes = DMatrix::zeros(pc, kn);
    let mut s = LawScratch::default();
    let mut out = vec![0.0; pc];
    for k in 0..kn {
        law.eval_into(grid.node(k), &mut out, &mut s);
        for (c, &uc) in out.iter().enumerate() {
            if !uc.is_finite() {
                return Err(HjbError::Invalid(format!(
                    "control law produced a non-finite value at quadrature node {k}"
                )));
            }
            u_nodes[(c, k)] = uc;
        }
    }
    Ok(u_nodes)
}

/// One Galerkin policy-evaluation step: projects the linear PDE for the
/// value of `u_i` onto the basis and solves A w = b with
/// A[j][i] = <grad psi_i^T (f + g u), psi_j> and b[j] = -<u^T R u + m, psi_j>.
/// The solve is refined once and rejected if the projected residual exceeds
/// the default acceptance bound or the value goes negative at a node.
pub fn galerkin_step(
    p: &ProblemSpec,
    alpha: &[f64],
    basis: &BasisSet,
    grid: &QuadratureGrid,
    u_i: &ControlLaw,
) -> Result<DVector<f64>, HjbError> {
    check_solver_inputs(p, alpha, basis, grid, u_i)?;
    let cache = BasisCache::new(basis, grid);
    let tables = node_tables(p, alpha, grid)?;
    let u_nodes = law_at_nodes(u_i, grid, p.control_dim)?;
    let (w, _, _) = assemble_solve(&cache, &tables, &u_nodes, &p.r, DEFAULT_TOL_RES)?;
    Ok(w)
}

/// Simulates the initial law from the face centers of the domain box and
/// reports every probe that fails to contract or wanders off. Empty means
/// all probes passed.
fn admissibility_probe(p: &Arc<ProblemSpec>, alpha: &[f64], law: &ControlLaw) -> Vec<String> {
    let n = p.state_dim;
    let mut failures = Vec::new();
    let opts_base = sim::SimOptions {
        dt: 1e-3,
        t_max: GATE_HORIZON,
        decay_tol: 0.0,
    };
    for axis in 0..n {
        for sign in [1.0, -1.0] {
            let mut x0 = vec![0.0; n];
            for (i, v) in x0.iter_mut().enumerate() {
                *v = 0.5 * (p.lo[i] + p.hi[i]);
            }
            x0[axis] += sign * 0.5 * (p.hi[axis] - p.lo[axis]);
            let norm0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm0 == 0.0 {
                continue;
            }
            let target = GATE_CONTRACTION * norm0;
            let opts = sim::SimOptions {
                decay_tol: target,
                ..opts_base
            };
            let label = format!(
                "[{}]",
                x0.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            match sim::integrate(p, alpha, law, &x0, &opts) {
                Err(e) => failures.push(format!("probe {label}: {e}")),
                Ok(traj) => {
                    let xf = traj.state(traj.len() - 1);
                    let normf = xf.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if traj.reason == sim::StopReason::Escaped {
                        failures.push(format!("probe {label}: trajectory escaped the domain"));
                    } else if normf > target {
                        failures.push(format!(
                            "probe {label}: |x(T)| = {normf:.3e} did not contract below \
                             {target:.3e} within T = {GATE_HORIZON}"
                        ));
                    } else if (0..traj.len())
                        .any(|k| !p.in_scaled_domain(traj.state(k), GATE_CONTAINMENT))
                    {
                        failures.push(format!(
                            "probe {label}: trajectory left the domain scaled by {GATE_CONTAINMENT}"
                        ));
                    }
                }
            }
        }
    }
    failures
}

/// Galerkin policy iteration. Alternates policy evaluation (projected PDE
/// solve) with policy improvement u = -1/2 R^{-1} g^T J_Psi^T w until the
/// weight change drops below `tol_w` or `max_iter` is reached; hitting the
/// cap is reported through the `converged` flag, not as an error. Value
/// monotonicity across iterates is checked at every node: increases beyond
/// a small relative slack are recorded in the solution diagnostics, and the
/// solve aborts if unambiguous growth persists over several consecutive
/// iterations.
pub fn policy_iteration(
    problem: &Arc<ProblemSpec>,
    alpha: &[f64],
    basis: &Arc<BasisSet>,
    grid: &QuadratureGrid,
    u0: &ControlLaw,
    opts: &PolicyOptions,
) -> Result<HjbSolution, HjbError> {
    check_solver_inputs(problem, alpha, basis, grid, u0)?;
    if opts.max_iter == 0 {
        return Err(HjbError::Invalid("max_iter must be at least 1".into()));
    }
    if !(opts.tol_w > 0.0) || !(opts.tol_res > 0.0) {
        return Err(HjbError::Invalid("tolerances must be positive".into()));
    }

    let mut gate_warnings = Vec::new();
    if opts.gate != GateMode::Off {
        let failures = admissibility_probe(problem, alpha, u0);
        if !failures.is_empty() {
            match opts.gate {
                GateMode::Enforce => {
                    return Err(HjbError::Inadmissible {
                        detail: failures.join("; "),
                    });
                }
                GateMode::Warn => gate_warnings = failures,
                GateMode::Off => unreachable!(),
            }
        }
    }

    let cache = BasisCache::new(basis, grid);
    let tables = node_tables(problem, alpha, grid)?;
    let rinv = control_penalty_inverse(&problem.r)?;
    let mut u_nodes = law_at_nodes(u0, grid, problem.control_dim)?;

    let mut w_prev = DVector::zeros(basis.len());
    let mut phi_prev: Option<DVector<f64>> = None;
    let mut weight_change_norms = Vec::new();
    let mut residual_norms = Vec::new();
    let mut mono = MonotonicityReport::default();
    let mut growth_run = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        let (w, residual, phi) = assemble_solve(&cache, &tables, &u_nodes, &problem.r, opts.tol_res)?;
        iterations = it;
        residual_norms.push(residual);
        let dw = (&w - &w_prev).amax();
        weight_change_norms.push(dw);

        let wnorm = w.amax();
        if wnorm > DIVERGENCE_LIMIT {
            return Err(HjbError::Diverged {
                iteration: it,
                norm: wnorm,
            });
        }

        // The first solved iterate evaluates the caller's law; ordering
        // guarantees start from the pair after it.
        if let Some(prev) = &phi_prev {
            if it >= 3 {
                let mut worst = f64::NEG_INFINITY;
                for k in 0..phi.len() {
                    let rel = (phi[k] - prev[k]) / (1.0 + prev[k].abs());
                    worst = worst.max(rel);
                }
                mono.pairs_checked += 1;
                if worst > MONO_RECORD_SLACK {
                    mono.violations += 1;
                    mono.worst_relative_increase = mono.worst_relative_increase.max(worst);
                }
                if worst > MONO_ABORT_SLACK {
                    growth_run += 1;
                    if growth_run > MONO_ABORT_RUN {
                        return Err(HjbError::NotMonotone {
                            iteration: it,
                            consecutive: growth_run,
                            worst,
                        });
                    }
                } else {
                    growth_run = 0;
                }
            }
        }
        phi_prev = Some(phi);
        w_prev = w;

        if dw <= opts.tol_w {
            converged = true;
            break;
        }
        improve_policy(&cache, &tables, &rinv, &w_prev, &mut u_nodes);
    }

    Ok(HjbSolution {
        weights: w_prev,
        alpha: alpha.to_vec(),
        basis: Arc::clone(basis),
        problem: Arc::clone(problem),
        iterations,
        weight_change_norms,
        residual_norms,
        converged,
        monotonicity: mono,
        gate_warnings,
    })
}
