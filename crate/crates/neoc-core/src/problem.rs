//! Problem definitions for the solver pipeline: control-affine dynamics
//! `x' = f(x, alpha) + g(x, alpha) u`, running cost `m(x, alpha) + u' R u`,
//! a box domain, and a nominal parameter vector. Includes a catalog of
//! builtin example problems, a line-oriented config-file loader, and the
//! parameter-derivative bundle consumed by the sensitivity machinery.
//!
//! State symbols are fixed as `x1..xn`; parameter symbols are declared per
//! problem. Everything is validated at construction: R must be symmetric
//! positive definite, the origin must be an equilibrium of `f` across a
//! parameter box, and `m` must vanish at the origin and be positive on a
//! sample grid (a heuristic gate, not a proof; the grid uses an even
//! per-axis point count for multi-dimensional domains so that costs which
//! ignore some state axes, like the cart-pole's, are not probed exactly on
//! their zero set).

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::basis::state_var;
use crate::expr::{parse, CompiledExpr, Expr, ExprError, UnaryOp};

/// Builtin problem names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 4] = ["cartpole_lqr", "scalar_siso", "bilinear", "pendulum"];

#[derive(Debug, Error)]
pub enum ProblemError {
    /// Config-file syntax or dimension problem at a specific line.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A required section or key never appeared.
    #[error("missing {0} in problem file")]
    Missing(String),
    /// A structural or semantic invariant failed.
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("unknown builtin {0:?}; valid names: cartpole_lqr, scalar_siso, bilinear, pendulum")]
    UnknownBuiltin(String),
    /// A derivative was requested through `abs` or `sgn` of the active
    /// variable, where no classical derivative exists.
    #[error("non-differentiable subexpression `{subexpr}` while forming {context}")]
    Nonsmooth { subexpr: String, context: String },
}

/// Explicit linear-quadratic data attached to a problem file via an `[lqr]`
/// section: A, B, Q entries as expressions in the parameters only. When
/// absent, LQR solvers fall back to the symbolic linearization of `f` and
/// the Hessian of `m` at the origin.
#[derive(Debug, Clone)]
pub struct LqrSection {
    /// Row-major n*n entries of A(alpha).
    pub a: Vec<Expr>,
    /// Row-major n*p entries of B(alpha).
    pub b: Vec<Expr>,
    /// Row-major n*n entries of Q(alpha).
    pub q: Vec<Expr>,
}

/// Compiled forms of f, g, m against the slot order `x1..xn, alpha names`.
/// Kept alongside the symbolic trees so quadrature sweeps and RK4 stages
/// avoid per-node name lookups.
#[derive(Debug, Clone)]
pub(crate) struct CompiledDynamics {
    pub f: Vec<CompiledExpr>,
    pub g: Vec<CompiledExpr>,
    pub m: CompiledExpr,
}

/// Scratch buffers for compiled evaluation; reuse across calls in hot loops.
#[derive(Debug, Default, Clone)]
pub struct EvalBuf {
    pub(crate) vals: Vec<f64>,
    pub(crate) stack: Vec<f64>,
}

/// A parameterized optimal control problem on a box domain.
///
/// Immutable after construction; clone freely or share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub param_dim: usize,
    /// Drift, length n, in symbols `x1..xn` and the parameter names.
    pub f: Vec<Expr>,
    /// Input map, row-major n*p.
    pub g: Vec<Expr>,
    /// State running cost; `m + u' R u` is the full integrand.
    pub m: Expr,
    /// Control weight, p*p symmetric positive definite.
    pub r: DMatrix<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub alpha_nominal: Vec<f64>,
    pub alpha_names: Vec<String>,
    /// Explicit `[lqr]` data when the source file provided it.
    pub lqr: Option<LqrSection>,
    pub(crate) code: CompiledDynamics,
}

impl ProblemSpec {
    /// Builds and fully validates a problem. Expression slots refer to
    /// states as `x1..xn` and to parameters by the names given here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        param_dim: usize,
        f: Vec<Expr>,
        g: Vec<Expr>,
        m: Expr,
        r: DMatrix<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        alpha_nominal: Vec<f64>,
        alpha_names: Vec<String>,
        lqr: Option<LqrSection>,
    ) -> Result<ProblemSpec, ProblemError> {
        let (n, p, q) = (state_dim, control_dim, param_dim);
        if n == 0 || p == 0 || q == 0 {
            return Err(ProblemError::Invalid(
                "state, control, and param dimensions must all be at least 1".into(),
            ));
        }
        check_len("f", f.len(), n)?;
        check_len("g", g.len(), n * p)?;
        check_len("lo", lo.len(), n)?;
        check_len("hi", hi.len(), n)?;
        check_len("alpha_nominal", alpha_nominal.len(), q)?;
        check_len("alpha_names", alpha_names.len(), q)?;
        for i in 0..n {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(ProblemError::Invalid(format!(
                    "domain axis {} is not a bounded interval with lo < hi",
                    i + 1
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for name in &alpha_names {
            if name.is_empty()
                || !name.chars().next().unwrap().is_ascii_alphabetic()
                || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            {
                return Err(ProblemError::Invalid(format!(
                    "parameter name {name:?} is not a valid identifier"
                )));
            }
            if (1..=n).any(|i| *name == state_var(i - 1)) {
                return Err(ProblemError::Invalid(format!(
                    "parameter name {name:?} collides with a state symbol"
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(ProblemError::Invalid(format!(
                    "duplicate parameter name {name:?}"
                )));
            }
        }
        if r.nrows() != p || r.ncols() != p {
            return Err(ProblemError::Invalid(format!(
                "R must be {p}x{p}, got {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        if r != r.transpose() {
            return Err(ProblemError::Invalid("R not symmetric".into()));
        }
        if Cholesky::new(r.clone()).is_none() {
            return Err(ProblemError::Invalid("R not positive definite".into()));
        }

        let vars: Vec<String> = (0..n)
            .map(state_var)
            .chain(alpha_names.iter().cloned())
            .collect();
        let compile = |e: &Expr, what: &str| {
            CompiledExpr::compile(e, &vars).map_err(|err| match err {
                ExprError::Unbound { name } => ProblemError::Invalid(format!(
                    "unbound symbol `{name}` in {what} (allowed: x1..x{n} and declared parameters)"
                )),
                other => ProblemError::Invalid(format!("{what}: {other}")),
            })
        };
        let mut cf = Vec::with_capacity(n);
        for (i, e) in f.iter().enumerate() {
            cf.push(compile(e, &format!("f{}", i + 1))?);
        }
        let mut cg = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                cg.push(compile(&g[i * p + j], &format!("g{}{}", i + 1, j + 1))?);
            }
        }
        let cm = compile(&m, "m")?;

        if let Some(sec) = &lqr {
            check_len("[lqr] A", sec.a.len(), n * n)?;
            check_len("[lqr] B", sec.b.len(), n * p)?;
            check_len("[lqr] Q", sec.q.len(), n * n)?;
            for (mat, name) in [(&sec.a, "A"), (&sec.b, "B"), (&sec.q, "Q")] {
                for e in mat.iter() {
                    for v in e.free_vars() {
                        if !alpha_names.contains(&v) {
                            return Err(ProblemError::Invalid(format!(
                                "[lqr] {name} entries may reference parameters only, found `{v}`"
                            )));
                        }
                    }
                }
            }
        }

        let spec = ProblemSpec {
            state_dim: n,
            control_dim: p,
            param_dim: q,
            f,
            g,
            m,
            r,
            lo,
            hi,
            alpha_nominal,
            alpha_names,
            lqr,
            code: CompiledDynamics { f: cf, g: cg, m: cm },
        };
        spec.check_equilibrium()?;
        spec.check_cost_positivity()?;
        Ok(spec)
    }

    /// Slot order used by every compiled expression tied to this problem.
    pub fn var_names(&self) -> Vec<String> {
        (0..self.state_dim)
            .map(state_var)
            .chain(self.alpha_names.iter().cloned())
            .collect()
    }

    /// Default per-component parameter box: nominal plus or minus half of
    /// `max(1, |nominal|)`. Used when no explicit bounds are supplied.
    pub fn default_alpha_box(&self) -> Vec<(f64, f64)> {
        self.alpha_nominal
            .iter()
            .map(|&a| {
                let half = 0.5 * a.abs().max(1.0);
                (a - half, a + half)
            })
            .collect()
    }

    /// Euclidean norm of the farthest domain corner from the origin.
    pub fn domain_radius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether `x` lies in the domain scaled about its midpoint by `scale`.
    pub fn in_scaled_domain(&self, x: &[f64], scale: f64) -> bool {
        x.iter().enumerate().all(|(i, &xi)| {
            let mid = 0.5 * (self.lo[i] + self.hi[i]);
            let half = 0.5 * (self.hi[i] - self.lo[i]) * scale;
            (xi - mid).abs() <= half
        })
    }

    pub(crate) fn pack(&self, x: &[f64], alpha: &[f64], buf: &mut EvalBuf) {
        debug_assert_eq!(x.len(), self.state_dim);
        debug_assert_eq!(alpha.len(), self.param_dim);
        buf.vals.clear();
        buf.vals.extend_from_slice(x);
        buf.vals.extend_from_slice(alpha);
    }

    /// Drift vector written into `out`; non-finite values pass through for
    /// the caller's guards.
    pub(crate) fn eval_f_into(&self, x: &[f64], alpha: &[f64], buf: &mut EvalBuf, out: &mut [f64]) {
        self.pack(x, alpha, buf);
        for (o, c) in out.iter_mut().zip(&self.code.f) {
            *o = c.eval_scratch(&buf.vals, &mut buf.stack);
        }
    }

    /// Input map, row-major n*p, written into `out`.
    pub(crate) fn eval_g_into(&self, x: &[f64], alpha: &[f64], buf: &mut EvalBuf, out: &mut [f64]) {
        self.pack(x, alpha, buf);
        for (o, c) in out.iter_mut().zip(&self.code.g) {
            *o = c.eval_scratch(&buf.vals, &mut buf.stack);
        }
    }

    pub(crate) fn eval_m_buf(&self, x: &[f64], alpha: &[f64], buf: &mut EvalBuf) -> f64 {
        self.pack(x, alpha, buf);
        self.code.m.eval_scratch(&buf.vals, &mut buf.stack)
    }

    /// Allocating convenience wrapper over [`eval_f_into`].
    pub fn eval_f(&self, x: &[f64], alpha: &[f64]) -> Vec<f64> {
        let mut buf = EvalBuf::default();
        let mut out = vec![0.0; self.state_dim];
        self.eval_f_into(x, alpha, &mut buf, &mut out);
        out
    }

    /// Allocating convenience wrapper; returns g as an n*p matrix.
    pub fn eval_g(&self, x: &[f64], alpha: &[f64]) -> DMatrix<f64> {
        let mut buf = EvalBuf::default();
        let mut out = vec![0.0; self.state_dim * self.control_dim];
        self.eval_g_into(x, alpha, &mut buf, &mut out);
        DMatrix::from_row_slice(self.state_dim, self.control_dim, &out)
    }

    pub fn eval_m(&self, x: &[f64], alpha: &[f64]) -> f64 {
        let mut buf = EvalBuf::default();
        self.eval_m_buf(x, alpha, &mut buf)
    }

    /// f(0, alpha) must vanish at the nominal parameters and at eight
    /// seeded draws from the default parameter box.
    fn check_equilibrium(&self) -> Result<(), ProblemError> {
        let zero = vec![0.0; self.state_dim];
        let mut buf = EvalBuf::default();
        let mut out = vec![0.0; self.state_dim];
        let check = |alpha: &[f64], buf: &mut EvalBuf, out: &mut [f64]| {
            self.eval_f_into(&zero, alpha, buf, out);
            for (i, &v) in out.iter().enumerate() {
                if !(v.abs() <= 1e-9) {
                    return Err(ProblemError::Invalid(format!(
                        "f(0,alpha) != 0: f{}(0, {alpha:?}) = {v}",
                        i + 1
                    )));
                }
            }
            Ok(())
        };
        check(&self.alpha_nominal, &mut buf, &mut out)?;
        let boxes = self.default_alpha_box();
        // Fixed seed keeps validation deterministic across runs.
        let mut rng = ChaCha12Rng::seed_from_u64(0x4e45_4f43);
        for _ in 0..8 {
            let alpha: Vec<f64> = boxes.iter().map(|&(l, h)| rng.random_range(l..h)).collect();
            check(&alpha, &mut buf, &mut out)?;
        }
        Ok(())
    }

    /// m(0, nominal) must be zero and m positive elsewhere on a sample
    /// grid: 513 points for one state, otherwise the largest even per-axis
    /// count whose tensor grid stays within 4096 points.
    fn check_cost_positivity(&self) -> Result<(), ProblemError> {
        let n = self.state_dim;
        let mut buf = EvalBuf::default();
        let origin = vec![0.0; n];
        let at_origin = self.eval_m_buf(&origin, &self.alpha_nominal, &mut buf);
        if !(at_origin.abs() <= 1e-12) {
            return Err(ProblemError::Invalid(format!(
                "m(0,alpha) != 0: m at origin is {at_origin}"
            )));
        }
        let per_axis = if n == 1 {
            513
        } else {
            let mut k = 2usize;
            while (k + 2).pow(n as u32) <= 4096 {
                k += 2;
            }
            k
        };
        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        loop {
            for i in 0..n {
                let t = idx[i] as f64 / (per_axis - 1) as f64;
                x[i] = self.lo[i] + t * (self.hi[i] - self.lo[i]);
            }
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            if norm2.sqrt() > 1e-12 {
                let v = self.eval_m_buf(&x, &self.alpha_nominal, &mut buf);
                if !(v.is_finite() && v > 0.0) {
                    return Err(ProblemError::Invalid(format!(
                        "m not positive on the domain sample grid: m({x:?}) = {v}"
                    )));
                }
            }
            // Odometer over the tensor grid, last axis fastest.
            let mut axis = n;
            loop {
                if axis == 0 {
                    return Ok(());
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < per_axis {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), ProblemError> {
    if got == want {
        Ok(())
    } else {
        Err(ProblemError::Invalid(format!(
            "{what} has {got} entries, expected {want}"
        )))
    }
}

/// A parameter change `alpha_hat = alpha_nominal + delta_alpha`, optionally
/// with the box over which curvature estimates should scan.
#[derive(Debug, Clone)]
pub struct ParamPerturbation {
    pub delta_alpha: Vec<f64>,
    /// Per-component closed bounds on the absolute parameter values.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl ParamPerturbation {
    pub fn new(delta_alpha: Vec<f64>) -> ParamPerturbation {
        ParamPerturbation { delta_alpha, bounds: None }
    }

    pub fn with_bounds(delta_alpha: Vec<f64>, bounds: Vec<(f64, f64)>) -> ParamPerturbation {
        ParamPerturbation { delta_alpha, bounds: Some(bounds) }
    }

    pub fn validate(&self, param_dim: usize) -> Result<(), ProblemError> {
        check_len("delta_alpha", self.delta_alpha.len(), param_dim)?;
        if self.delta_alpha.iter().any(|d| !d.is_finite()) {
            return Err(ProblemError::Invalid("delta_alpha must be finite".into()));
        }
        if let Some(b) = &self.bounds {
            check_len("perturbation bounds", b.len(), param_dim)?;
            for &(l, h) in b {
                if !(l.is_finite() && h.is_finite() && l < h) {
                    return Err(ProblemError::Invalid(
                        "perturbation bounds must be finite with lo < hi".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Symbolic parameter and state derivatives of a problem, produced once per
/// solve and shared by the sensitivity and LQR paths.
#[derive(Debug, Clone)]
pub struct DerivedProblem {
    /// Row-major n*q Jacobian of f in the parameters.
    pub df_dalpha: Vec<Expr>,
    /// For each parameter, the row-major n*p derivative of g.
    pub dg_dalpha: Vec<Vec<Expr>>,
    /// Gradient of m in the parameters, length q.
    pub dm_dalpha: Vec<Expr>,
    /// Jacobian of f in the states at the origin, row-major n*n, in the
    /// parameter symbols only.
    pub dfdx0: Vec<Expr>,
    /// Hessian of m at the origin, row-major n*n, parameter symbols only.
    pub hess_m0: Vec<Expr>,
    pub(crate) code: DerivedCode,
}

/// Compiled parameter derivatives against the problem's slot order.
#[derive(Debug, Clone)]
pub(crate) struct DerivedCode {
    pub df: Vec<CompiledExpr>,
    pub dg: Vec<Vec<CompiledExpr>>,
    pub dm: Vec<CompiledExpr>,
}

/// First `abs` or `sgn` node whose argument involves `var`, if any. Such a
/// node has no classical derivative in `var`.
fn nonsmooth_in(e: &Expr, var: &str) -> Option<String> {
    match e {
        Expr::Const(_) | Expr::Var(_) => None,
        Expr::Unary(op, a) => {
            if matches!(op, UnaryOp::Abs | UnaryOp::Sgn) && a.free_vars().contains(var) {
                return Some(e.to_string());
            }
            nonsmooth_in(a, var)
        }
        Expr::Binary(_, a, b) => nonsmooth_in(a, var).or_else(|| nonsmooth_in(b, var)),
    }
}

fn smooth_diff(e: &Expr, var: &str, context: &str) -> Result<Expr, ProblemError> {
    if let Some(subexpr) = nonsmooth_in(e, var) {
        return Err(ProblemError::Nonsmooth { subexpr, context: context.to_string() });
    }
    Ok(e.diff(var).expr)
}

/// Differentiates the problem data symbolically: the parameter Jacobians of
/// f, g, m, plus the state linearization of f and the Hessian of m at the
/// origin (both reduced to parameter-only expressions).
pub fn derived_fields(spec: &ProblemSpec) -> Result<DerivedProblem, ProblemError> {
    let (n, p, q) = (spec.state_dim, spec.control_dim, spec.param_dim);
    let vars = spec.var_names();
    let compile = |e: &Expr| {
        // Inputs already compiled against the same slots, so this cannot
        // hit unbound names.
        CompiledExpr::compile(e, &vars).expect("derivative uses the problem's own symbols")
    };

    let mut df_dalpha = Vec::with_capacity(n * q);
    let mut df_code = Vec::with_capacity(n * q);
    for i in 0..n {
        for name in &spec.alpha_names {
            let d = smooth_diff(&spec.f[i], name, &format!("df{}/d{name}", i + 1))?;
            df_code.push(compile(&d));
            df_dalpha.push(d);
        }
    }

    let mut dg_dalpha = Vec::with_capacity(q);
    let mut dg_code = Vec::with_capacity(q);
    for name in &spec.alpha_names {
        let mut block = Vec::with_capacity(n * p);
        let mut block_code = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                let d = smooth_diff(
                    &spec.g[i * p + j],
                    name,
                    &format!("dg{}{}/d{name}", i + 1, j + 1),
                )?;
                block_code.push(compile(&d));
                block.push(d);
            }
        }
        dg_dalpha.push(block);
        dg_code.push(block_code);
    }

    let mut dm_dalpha = Vec::with_capacity(q);
    let mut dm_code = Vec::with_capacity(q);
    for name in &spec.alpha_names {
        let d = smooth_diff(&spec.m, name, &format!("dm/d{name}"))?;
        dm_code.push(compile(&d));
        dm_dalpha.push(d);
    }

    let at_origin = |e: &Expr| {
        let mut out = e.clone();
        for i in 0..n {
            out = out.substitute(&state_var(i), &Expr::Const(0.0));
        }
        out.simplify()
    };

    let mut dfdx0 = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let xj = state_var(j);
            let d = smooth_diff(&spec.f[i], &xj, &format!("df{}/d{xj}", i + 1))?;
            dfdx0.push(at_origin(&d));
        }
    }

    let mut hess_m0 = Vec::with_capacity(n * n);
    for i in 0..n {
        let xi = state_var(i);
        let di = smooth_diff(&spec.m, &xi, &format!("dm/d{xi}"))?;
        for j in 0..n {
            let xj = state_var(j);
            let dij = smooth_diff(&di, &xj, &format!("d2m/d{xi}d{xj}"))?;
            hess_m0.push(at_origin(&dij));
        }
    }

    Ok(DerivedProblem {
        df_dalpha,
        dg_dalpha,
        dm_dalpha,
        dfdx0,
        hess_m0,
        code: DerivedCode { df: df_code, dg: dg_code, dm: dm_code },
    })
}

/// Names accepted by [`builtin`].
pub fn builtin_names() -> &'static [&'static str] {
    &["scalar_siso", "bilinear", "pendulum", "cartpole_lqr"]
}

/// Looks up one of the builtin example problems.
pub fn builtin(name: &str) -> Result<ProblemSpec, ProblemError> {
    match name {
        "scalar_siso" => from_strs(
            1,
            1,
            1,
            &["-a1*x1"],
            &["1"],
            "(1+a1)*x1^2 + x1^4",
            DMatrix::from_element(1, 1, 1.0),
            &[-1.0],
            &[1.0],
            &["a1"],
            &[1.0],
        ),
        "bilinear" => from_strs(
            1,
            1,
            1,
            &["0"],
            &["a1*x1^2"],
            "a1*x1^2 + a1^2*x1^4",
            DMatrix::from_element(1, 1, 1.0),
            &[-1.0],
            &[1.0],
            &["a1"],
            &[1.0],
        ),
        "pendulum" => from_strs(
            2,
            1,
            2,
            &["x2", "sin(x1) - (m/l)*x2"],
            &["0", "1/m"],
            "l^2*(x1^2 + x2^2)",
            DMatrix::from_element(1, 1, 1.0),
            &[-1.0, -1.0],
            &[1.0, 1.0],
            &["m", "l"],
            &[1.0, 1.0],
        ),
        // Cart-pole linearized about the upright equilibrium with
        // M = 0.5, pole mass 0.2, length 0.3, inertia 0.006, gravity 9.8;
        // the friction coefficient b is the free parameter. The rational
        // coefficients below are (I+m l^2)/den, m^2 g l^2 / den, m l / den,
        // and m g l (M+m)/den with den = I(M+m) + M m l^2 = 0.0132.
        "cartpole_lqr" => from_strs(
            4,
            1,
            1,
            &[
                "x2",
                "-(20/11)*b*x2 + (147/55)*x3",
                "x4",
                "-(50/11)*b*x2 + (343/11)*x3",
            ],
            &["0", "20/11", "0", "50/11"],
            "x1^2 + x3^2",
            DMatrix::from_element(1, 1, 1.0),
            &[-1.0, -1.0, -1.0, -1.0],
            &[1.0, 1.0, 1.0, 1.0],
            &["b"],
            &[0.1],
        ),
        other => Err(ProblemError::UnknownBuiltin(other.to_string())),
    }
}

#[allow(clippy::too_many_arguments)]
fn from_strs(
    n: usize,
    p: usize,
    q: usize,
    f: &[&str],
    g: &[&str],
    m: &str,
    r: DMatrix<f64>,
    lo: &[f64],
    hi: &[f64],
    names: &[&str],
    nominal: &[f64],
) -> Result<ProblemSpec, ProblemError> {
    let parse_one = |s: &str| {
        parse(s).map_err(|e| ProblemError::Invalid(format!("builtin expression {s:?}: {e}")))
    };
    let mut fv = Vec::with_capacity(n);
    for s in f {
        fv.push(parse_one(s)?);
    }
    let mut gv = Vec::with_capacity(n * p);
    for s in g {
        gv.push(parse_one(s)?);
    }
    ProblemSpec::new(
        n,
        p,
        q,
        fv,
        gv,
        parse_one(m)?,
        r,
        lo.to_vec(),
        hi.to_vec(),
        nominal.to_vec(),
        names.iter().map(|s| s.to_string()).collect(),
        None,
    )
}

const SECTIONS: [&str; 6] = ["dims", "dynamics", "cost", "domain", "params", "lqr"];

struct RawEntry {
    section: usize,
    key: String,
    value: String,
    line: usize,
}

/// Parses and validates a problem from the line-oriented config format:
/// `[section]` headers, `key = value` pairs, `#` comments. Sections `dims`,
/// `dynamics`, `cost`, `domain`, and `params` are required; `lqr` is
/// optional and its absent matrix entries default to zero. Matrix keys use
/// one digit per index (`g11`, `A23`), which caps file-loaded problems at
/// nine states; the builtin catalog has no such limit.
pub fn load_problem(text: &str) -> Result<ProblemSpec, ProblemError> {
    let mut entries: Vec<RawEntry> = Vec::new();
    let mut section: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let t = stripped.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(name) = t.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ProblemError::Parse {
                line,
                msg: format!("malformed section header `{t}`"),
            })?;
            section = Some(SECTIONS.iter().position(|s| *s == name).ok_or_else(|| {
                ProblemError::Parse { line, msg: format!("unknown section [{name}]") }
            })?);
            continue;
        }
        let (key, value) = t.split_once('=').ok_or_else(|| ProblemError::Parse {
            line,
            msg: format!("expected `key = value`, got `{t}`"),
        })?;
        let section = section.ok_or_else(|| ProblemError::Parse {
            line,
            msg: "key appears before any [section] header".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if entries.iter().any(|e| e.section == section && e.key == key) {
            return Err(ProblemError::Parse {
                line,
                msg: format!("duplicate key `{key}` in [{}]", SECTIONS[section]),
            });
        }
        entries.push(RawEntry { section, key, value, line });
    }

    let find = |section: usize, key: &str| {
        entries
            .iter()
            .find(|e| e.section == section && e.key == key)
    };
    let require = |section: usize, key: &str| {
        find(section, key).ok_or_else(|| {
            ProblemError::Missing(format!("key `{key}` in [{}]", SECTIONS[section]))
        })
    };
    for s in 0..5 {
        if !entries.iter().any(|e| e.section == s) {
            return Err(ProblemError::Missing(format!("section [{}]", SECTIONS[s])));
        }
    }

    let dim_of = |key: &str| -> Result<usize, ProblemError> {
        let e = require(0, key)?;
        let v: usize = e.value.parse().map_err(|_| ProblemError::Parse {
            line: e.line,
            msg: format!("{key} must be a positive integer, got `{}`", e.value),
        })?;
        if v == 0 {
            return Err(ProblemError::Parse {
                line: e.line,
                msg: format!("{key} must be at least 1"),
            });
        }
        Ok(v)
    };
    let n = dim_of("state")?;
    let p = dim_of("control")?;
    let q = dim_of("params")?;

    let parse_expr = |e: &RawEntry| {
        parse(&e.value).map_err(|err| ProblemError::Parse {
            line: e.line,
            msg: format!("{}: {err}", e.key),
        })
    };
    let parse_reals = |e: &RawEntry, want: usize| -> Result<Vec<f64>, ProblemError> {
        let vals: Result<Vec<f64>, _> = e
            .value
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| t.to_string()))
            .collect();
        let vals = vals.map_err(|tok| ProblemError::Parse {
            line: e.line,
            msg: format!("{}: `{tok}` is not a number", e.key),
        })?;
        if vals.len() != want {
            return Err(ProblemError::Parse {
                line: e.line,
                msg: format!("{} needs {want} entries, got {}", e.key, vals.len()),
            });
        }
        Ok(vals)
    };

    // Matrix keys are a letter followed by one digit per index.
    let matrix_key = |key: &str, letter: char, rows: usize, cols: usize| -> Option<(usize, usize)> {
        let rest = key.strip_prefix(letter)?;
        let bytes = rest.as_bytes();
        if bytes.len() != 2 || !bytes.iter().all(u8::is_ascii_digit) {
            return None;
        }
        let (i, j) = ((bytes[0] - b'0') as usize, (bytes[1] - b'0') as usize);
        if !(1..=rows).contains(&i) || !(1..=cols).contains(&j) {
            return None;
        }
        Some((i - 1, j - 1))
    };

    let mut f: Vec<Option<Expr>> = vec![None; n];
    let mut g: Vec<Option<Expr>> = vec![None; n * p];
    let mut lqr_a: Vec<Option<Expr>> = vec![None; n * n];
    let mut lqr_b: Vec<Option<Expr>> = vec![None; n * p];
    let mut lqr_q: Vec<Option<Expr>> = vec![None; n * n];
    let mut saw_lqr = false;
    let mut m: Option<Expr> = None;
    let mut r: Option<DMatrix<f64>> = None;
    let mut lo = None;
    let mut hi = None;
    let mut names: Option<Vec<String>> = None;
    let mut nominal = None;

    for e in &entries {
        let unknown = || ProblemError::Parse {
            line: e.line,
            msg: format!("unknown key `{}` in [{}]", e.key, SECTIONS[e.section]),
        };
        match e.section {
            0 => match e.key.as_str() {
                "state" | "control" | "params" => {}
                _ => return Err(unknown()),
            },
            1 => {
                if let Some(rest) = e.key.strip_prefix('f') {
                    if let Ok(i) = rest.parse::<usize>() {
                        if (1..=n).contains(&i) {
                            f[i - 1] = Some(parse_expr(e)?);
                            continue;
                        }
                    }
                }
                if let Some((i, j)) = matrix_key(&e.key, 'g', n, p) {
                    g[i * p + j] = Some(parse_expr(e)?);
                    continue;
                }
                return Err(unknown());
            }
            2 => match e.key.as_str() {
                "m" => m = Some(parse_expr(e)?),
                "R" => {
                    let rows: Vec<&str> = e.value.split(';').collect();
                    if rows.len() != p {
                        return Err(ProblemError::Parse {
                            line: e.line,
                            msg: format!("R needs {p} rows, got {}", rows.len()),
                        });
                    }
                    let mut vals = Vec::with_capacity(p * p);
                    for row in rows {
                        let cols: Result<Vec<f64>, _> = row
                            .split_whitespace()
                            .map(|t| t.parse::<f64>().map_err(|_| t.to_string()))
                            .collect();
                        let cols = cols.map_err(|tok| ProblemError::Parse {
                            line: e.line,
                            msg: format!("R: `{tok}` is not a number"),
                        })?;
                        if cols.len() != p {
                            return Err(ProblemError::Parse {
                                line: e.line,
                                msg: format!("R rows need {p} entries, got {}", cols.len()),
                            });
                        }
                        vals.extend(cols);
                    }
                    r = Some(DMatrix::from_row_slice(p, p, &vals));
                }
                _ => return Err(unknown()),
            },
            3 => match e.key.as_str() {
                "lo" => lo = Some(parse_reals(e, n)?),
                "hi" => hi = Some(parse_reals(e, n)?),
                _ => return Err(unknown()),
            },
            4 => match e.key.as_str() {
                "names" => {
                    let v: Vec<String> =
                        e.value.split_whitespace().map(str::to_string).collect();
                    if v.len() != q {
                        return Err(ProblemError::Parse {
                            line: e.line,
                            msg: format!("names needs {q} entries, got {}", v.len()),
                        });
                    }
                    names = Some(v);
                }
                "nominal" => nominal = Some(parse_reals(e, q)?),
                _ => return Err(unknown()),
            },
            _ => {
                saw_lqr = true;
                if let Some((i, j)) = matrix_key(&e.key, 'A', n, n) {
                    lqr_a[i * n + j] = Some(parse_expr(e)?);
                } else if let Some((i, j)) = matrix_key(&e.key, 'B', n, p) {
                    lqr_b[i * p + j] = Some(parse_expr(e)?);
                } else if let Some((i, j)) = matrix_key(&e.key, 'Q', n, n) {
                    lqr_q[i * n + j] = Some(parse_expr(e)?);
                } else {
                    return Err(unknown());
                }
            }
        }
    }

    let f: Vec<Expr> = f
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| ProblemError::Missing(format!("key `f{}`", i + 1))))
        .collect::<Result<_, _>>()?;
    let g: Vec<Expr> = g
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            e.ok_or_else(|| {
                ProblemError::Missing(format!("key `g{}{}`", k / p + 1, k % p + 1))
            })
        })
        .collect::<Result<_, _>>()?;

    let lqr = if saw_lqr {
        let fill = |v: Vec<Option<Expr>>| -> Vec<Expr> {
            v.into_iter().map(|e| e.unwrap_or(Expr::Const(0.0))).collect()
        };
        Some(LqrSection { a: fill(lqr_a), b: fill(lqr_b), q: fill(lqr_q) })
    } else {
        None
    };

    ProblemSpec::new(
        n,
        p,
        q,
        f,
        g,
        m.ok_or_else(|| ProblemError::Missing("key `m` in [cost]".into()))?,
        r.ok_or_else(|| ProblemError::Missing("key `R` in [cost]".into()))?,
        lo.ok_or_else(|| ProblemError::Missing("key `lo` in [domain]".into()))?,
        hi.ok_or_else(|| ProblemError::Missing("key `hi` in [domain]".into()))?,
        nominal.ok_or_else(|| ProblemError::Missing("key `nominal` in [params]".into()))?,
        names.ok_or_else(|| ProblemError::Missing("key `names` in [params]".into()))?,
        lqr,
    )
}
