//! Linear-quadratic fast path: Kleinman iteration for the continuous-time
//! algebraic Riccati equation, a dense symmetric Lyapunov solver, Riccati
//! parameter sensitivities, and the first-order gain adjustment for a
//! parameter change. Matrices A, B, Q are expression-valued in the problem
//! parameters so the same data serves nominal and perturbed solves.
//!
//! Sign convention throughout: the feedback is `u = -K x` with
//! `K = R^{-1} B' P`.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::linalg::{is_hurwitz, min_eig_sym, rank, sqrt_psd};
use crate::problem::{derived_fields, ProblemError, ProblemSpec};

const MAX_KLEINMAN_ITER: usize = 100;
/// Riccati residual target, relative to the Frobenius norm of Q.
const CARE_TOL: f64 = 1e-9;
/// Lyapunov residual target, relative to the Frobenius norm of F.
const LYAP_TOL: f64 = 1e-10;
/// Rank tolerance for the controllability and observability checks,
/// relative to the largest singular value.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("invalid linear-quadratic data: {0}")]
    Invalid(String),
    #[error("matrix has an eigenvalue with nonnegative real part; Lyapunov solution not unique")]
    NotHurwitz,
    #[error("no stabilizing initial gain found")]
    NotStabilizable,
    #[error("Riccati iteration stalled after {iterations} iterations (residual {residual:.3e})")]
    Stalled { iterations: usize, residual: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("linear-quadratic expression: {0}")]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Problem(#[from] Box<ProblemError>),
}

/// A linear plant `x' = A(alpha) x + B(alpha) u` with quadratic cost
/// `x' Q(alpha) x + u' R u`. Entries of A, B, Q are expressions in the
/// parameter symbols only.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub state_dim: usize,
    pub control_dim: usize,
    pub param_dim: usize,
    /// Row-major n*n entries of A.
    pub a: Vec<Expr>,
    /// Row-major n*p entries of B.
    pub b: Vec<Expr>,
    /// Row-major n*n entries of Q.
    pub q: Vec<Expr>,
    pub r: DMatrix<f64>,
    pub alpha_nominal: Vec<f64>,
    pub alpha_names: Vec<String>,
}

/// Converged Riccati data at one parameter value.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Symmetric positive semidefinite value matrix.
    pub p: DMatrix<f64>,
    /// Feedback gain `R^{-1} B' P`; apply as `u = -K x`.
    pub k: DMatrix<f64>,
    /// Closed-loop matrix `A - B K`, Hurwitz on success.
    pub e: DMatrix<f64>,
    pub iterations: usize,
}

/// Ranks of the controllability and observability matrices at one
/// parameter value. Report-only; nothing here aborts a solve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssumptionReport {
    pub state_dim: usize,
    pub controllability_rank: usize,
    pub observability_rank: usize,
    pub controllable: bool,
    pub observable: bool,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.controllable && self.observable
    }
}

impl LqrProblem {
    /// Validates dimensions, that entries reference parameters only, that
    /// Q at the nominal parameters is symmetric positive semidefinite, and
    /// that R is symmetric positive definite.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        a: Vec<Expr>,
        b: Vec<Expr>,
        q: Vec<Expr>,
        r: DMatrix<f64>,
        alpha_nominal: Vec<f64>,
        alpha_names: Vec<String>,
    ) -> Result<LqrProblem, LqrError> {
        let (n, p) = (state_dim, control_dim);
        if n == 0 || p == 0 || alpha_nominal.is_empty() {
            return Err(LqrError::Invalid("dimensions must be at least 1".into()));
        }
        if alpha_names.len() != alpha_nominal.len() {
            return Err(LqrError::Invalid(
                "parameter names and nominal values differ in length".into(),
            ));
        }
        for (mat, len, what) in [(&a, n * n, "A"), (&b, n * p, "B"), (&q, n * n, "Q")] {
            if mat.len() != len {
                return Err(LqrError::Invalid(format!(
                    "{what} has {} entries, expected {len}",
                    mat.len()
                )));
            }
            for e in mat.iter() {
                for v in e.free_vars() {
                    if !alpha_names.contains(&v) {
                        return Err(LqrError::Invalid(format!(
                            "{what} entries may reference parameters only, found `{v}`"
                        )));
                    }
                }
            }
        }
        if r.nrows() != p || r.ncols() != p || r != r.transpose() {
            return Err(LqrError::Invalid("R must be symmetric p x p".into()));
        }
        if Cholesky::new(r.clone()).is_none() {
            return Err(LqrError::Invalid("R not positive definite".into()));
        }
        let lp = LqrProblem {
            state_dim,
            control_dim,
            param_dim: alpha_nominal.len(),
            a,
            b,
            q,
            r,
            alpha_nominal,
            alpha_names,
        };
        let q0 = lp.eval_q(&lp.alpha_nominal)?;
        let scale = q0.norm().max(1.0);
        if (&q0 - q0.transpose()).norm() > 1e-12 * scale {
            return Err(LqrError::Invalid("Q not symmetric at nominal parameters".into()));
        }
        if min_eig_sym(&q0) < -1e-10 * scale {
            return Err(LqrError::Invalid(
                "Q not positive semidefinite at nominal parameters".into(),
            ));
        }
        Ok(lp)
    }

    /// Extracts the linear-quadratic data from a problem: the explicit
    /// `[lqr]` section when present, otherwise the symbolic linearization
    /// (A from the state Jacobian of f at the origin, B from g at the
    /// origin, Q as half the Hessian of m at the origin).
    pub fn from_spec(spec: &ProblemSpec) -> Result<LqrProblem, LqrError> {
        let (n, p) = (spec.state_dim, spec.control_dim);
        let (a, b, q) = if let Some(sec) = &spec.lqr {
            (sec.a.clone(), sec.b.clone(), sec.q.clone())
        } else {
            let d = derived_fields(spec).map_err(Box::new)?;
            let mut b = Vec::with_capacity(n * p);
            for e in &spec.g {
                let mut at0 = e.clone();
                for i in 0..n {
                    at0 = at0.substitute(&crate::basis::state_var(i), &Expr::Const(0.0));
                }
                b.push(at0.simplify());
            }
            let q = d
                .hess_m0
                .iter()
                .map(|e| crate::expr::mul(Expr::Const(0.5), e.clone()).simplify())
                .collect();
            (d.dfdx0, b, q)
        };
        LqrProblem::new(
            n,
            p,
            a,
            b,
            q,
            spec.r.clone(),
            spec.alpha_nominal.clone(),
            spec.alpha_names.clone(),
        )
    }

    fn eval_matrix(&self, entries: &[Expr], rows: usize, cols: usize, alpha: &[f64])
        -> Result<DMatrix<f64>, LqrError>
    {
        if alpha.len() != self.param_dim {
            return Err(LqrError::Invalid(format!(
                "alpha has {} entries, expected {}",
                alpha.len(),
                self.param_dim
            )));
        }
        let lookup = |name: &str| {
            self.alpha_names
                .iter()
                .position(|v| v == name)
                .map(|i| alpha[i])
        };
        let mut out = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = entries[i * cols + j].eval_with(&lookup)?;
            }
        }
        Ok(out)
    }

    pub fn eval_a(&self, alpha: &[f64]) -> Result<DMatrix<f64>, LqrError> {
        self.eval_matrix(&self.a, self.state_dim, self.state_dim, alpha)
    }

    pub fn eval_b(&self, alpha: &[f64]) -> Result<DMatrix<f64>, LqrError> {
        self.eval_matrix(&self.b, self.state_dim, self.control_dim, alpha)
    }

    pub fn eval_q(&self, alpha: &[f64]) -> Result<DMatrix<f64>, LqrError> {
        self.eval_matrix(&self.q, self.state_dim, self.state_dim, alpha)
    }

    /// Per-entry derivative of one of the A, B, Q matrices in parameter
    /// `l`, evaluated at `alpha`.
    fn eval_matrix_derivative(
        &self,
        entries: &[Expr],
        rows: usize,
        cols: usize,
        l: usize,
        alpha: &[f64],
    ) -> Result<DMatrix<f64>, LqrError> {
        let name = &self.alpha_names[l];
        let d: Vec<Expr> = entries.iter().map(|e| e.diff(name).expr).collect();
        self.eval_matrix(&d, rows, cols, alpha)
    }
}

/// Ranks of `[B, AB, ..., A^{n-1}B]` and of the observability matrix of
/// `(A, Q^{1/2})`, with singular values below `1e-10` of the largest
/// treated as zero.
pub fn check_assumptions(lp: &LqrProblem, alpha: &[f64]) -> Result<AssumptionReport, LqrError> {
    let n = lp.state_dim;
    let a = lp.eval_a(alpha)?;
    let b = lp.eval_b(alpha)?;
    let q = lp.eval_q(alpha)?;

    let mut ctrb = DMatrix::zeros(n, n * lp.control_dim);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * lp.control_dim), (n, lp.control_dim))
            .copy_from(&block);
        block = &a * &block;
    }
    let controllability_rank = rank(&ctrb, RANK_TOL);

    let c = sqrt_psd(&q);
    let mut obsv = DMatrix::zeros(n * n, n);
    let mut row_block = c;
    for k in 0..n {
        obsv.view_mut((k * n, 0), (n, n)).copy_from(&row_block);
        row_block = &row_block * &a;
    }
    let observability_rank = rank(&obsv, RANK_TOL);

    Ok(AssumptionReport {
        state_dim: n,
        controllability_rank,
        observability_rank,
        controllable: controllability_rank == n,
        observable: observability_rank == n,
    })
}

/// Solves `E' X + X E + F = 0` for symmetric X by direct elimination on the
/// n(n+1)/2 distinct entries, with one refinement pass. Requires E Hurwitz;
/// the result satisfies the residual bound `1e-10 * ||F||_F`.
pub fn lyap_solve(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DMatrix<f64>, LqrError> {
    let n = e.nrows();
    if e.ncols() != n || f.nrows() != n || f.ncols() != n {
        return Err(LqrError::Invalid("Lyapunov matrices must be square and same size".into()));
    }
    if !is_hurwitz(e) {
        return Err(LqrError::NotHurwitz);
    }
    let fs = 0.5 * (f + f.transpose());

    let m = n * (n + 1) / 2;
    let pair_index = |i: usize, j: usize| {
        // Unknowns ordered (0,0), (0,1), ..., (0,n-1), (1,1), ...
        debug_assert!(i <= j);
        i * n - i * (i + 1) / 2 + j
    };
    let mut sys = DMatrix::zeros(m, m);
    for i in 0..n {
        for j in i..n {
            let row = pair_index(i, j);
            for a in 0..n {
                for bb in a..n {
                    let col = pair_index(a, bb);
                    let mut coeff = 0.0;
                    // (E'X)_{ij} = sum_k E_{ki} X_{kj}
                    if j == bb {
                        coeff += e[(a, i)];
                    }
                    if j == a && a != bb {
                        coeff += e[(bb, i)];
                    }
                    // (XE)_{ij} = sum_k X_{ik} E_{kj}
                    if i == a {
                        coeff += e[(bb, j)];
                    }
                    if i == bb && a != bb {
                        coeff += e[(a, j)];
                    }
                    sys[(row, col)] = coeff;
                }
            }
        }
    }
    let solve_vech = |rhs_mat: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let mut rhs = DVector::zeros(m);
        for i in 0..n {
            for j in i..n {
                rhs[pair_index(i, j)] = -rhs_mat[(i, j)];
            }
        }
        let sol = sys.clone().lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut x = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = sol[pair_index(i, j)];
                x[(i, j)] = v;
                x[(j, i)] = v;
            }
        }
        Some(x)
    };

    let mut x = solve_vech(&fs)
        .ok_or_else(|| LqrError::Numerical("singular Lyapunov system".into()))?;
    let residual = |x: &DMatrix<f64>| e.transpose() * x + x * e + &fs;
    let tol = LYAP_TOL * fs.norm();
    let mut res = residual(&x);
    if res.norm() > tol {
        // One refinement pass: the correction solves the same equation
        // with the residual as inhomogeneity.
        if let Some(dx) = solve_vech(&res) {
            x += dx;
            res = residual(&x);
        }
    }
    if res.norm() > tol {
        return Err(LqrError::Numerical(format!(
            "Lyapunov residual {:.3e} above tolerance {:.3e}",
            res.norm(),
            tol
        )));
    }
    Ok(x)
}

/// Stabilizing initial gain via a finite-horizon anti-stable Gramian:
/// `W = int_0^1 exp(-A t) B B' exp(-A' t) dt`, `K0 = R^{-1} B' W^{-1}`.
fn gramian_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rinv: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LqrError> {
    let steps = 200;
    let h = 1.0 / steps as f64;
    let mut phi = b.clone();
    let mut w = DMatrix::zeros(a.nrows(), a.nrows());
    let deriv = |m: &DMatrix<f64>| -(a * m);
    let mut prev = &phi * phi.transpose();
    for _ in 0..steps {
        let k1 = deriv(&phi);
        let k2 = deriv(&(&phi + 0.5 * h * &k1));
        let k3 = deriv(&(&phi + 0.5 * h * &k2));
        let k4 = deriv(&(&phi + h * &k3));
        phi += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let cur = &phi * phi.transpose();
        w += 0.5 * h * (&prev + &cur);
        prev = cur;
    }
    let winv = w
        .lu()
        .try_inverse()
        .ok_or(LqrError::NotStabilizable)?;
    Ok(rinv * b.transpose() * winv)
}

/// Kleinman iteration for the algebraic Riccati equation
/// `A'P + PA - P B R^{-1} B' P + Q = 0` at the given parameters.
///
/// Starts from `k0` when provided (it must stabilize A - B K0), from zero
/// when A is already Hurwitz, and from a Gramian-based stabilizing gain
/// otherwise. Each step solves one Lyapunov equation; the iterates decrease
/// monotonically in the semidefinite order, enforced to a 1e-9 eigenvalue
/// slack whenever the step itself is above the roundoff floor. Converges
/// when the Riccati residual drops below `1e-9 * ||Q||_F`.
pub fn care_solve(
    lp: &LqrProblem,
    alpha: &[f64],
    k0: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution, LqrError> {
    let (n, p) = (lp.state_dim, lp.control_dim);
    let a = lp.eval_a(alpha)?;
    let b = lp.eval_b(alpha)?;
    let q = lp.eval_q(alpha)?;
    let rinv = Cholesky::new(lp.r.clone())
        .expect("R validated positive definite")
        .inverse();

    let mut k = match k0 {
        Some(k0) => {
            if k0.nrows() != p || k0.ncols() != n {
                return Err(LqrError::Invalid(format!(
                    "initial gain must be {p}x{n}, got {}x{}",
                    k0.nrows(),
                    k0.ncols()
                )));
            }
            if !is_hurwitz(&(&a - &b * k0)) {
                return Err(LqrError::Invalid("provided initial gain is not stabilizing".into()));
            }
            k0.clone()
        }
        None if is_hurwitz(&a) => DMatrix::zeros(p, n),
        None => {
            let k = gramian_gain(&a, &b, &rinv)?;
            if !is_hurwitz(&(&a - &b * &k)) {
                return Err(LqrError::NotStabilizable);
            }
            k
        }
    };

    let tol = CARE_TOL * q.norm();
    let mut prev_p: Option<DMatrix<f64>> = None;
    let mut last_residual = f64::INFINITY;
    for iter in 1..=MAX_KLEINMAN_ITER {
        let e = &a - &b * &k;
        let cost = &q + k.transpose() * &lp.r * &k;
        let p_mat = lyap_solve(&e, &cost)?;
        let p_mat = 0.5 * (&p_mat + p_mat.transpose());
        if let Some(prev) = &prev_p {
            let drop = prev - &p_mat;
            // Only police steps above the roundoff floor; once the iterates
            // stagnate at machine precision the order test is meaningless.
            let meaningful = drop.norm() > 1e-8 * (1.0 + prev.norm());
            if meaningful && min_eig_sym(&drop) < -1e-9 * (1.0 + prev.norm()) {
                return Err(LqrError::Numerical(
                    "Riccati iterates lost monotone decrease".into(),
                ));
            }
        }
        k = &rinv * b.transpose() * &p_mat;
        let residual =
            a.transpose() * &p_mat + &p_mat * &a - &p_mat * &b * &rinv * b.transpose() * &p_mat
                + &q;
        last_residual = residual.norm();
        if last_residual <= tol {
            let e = &a - &b * &k;
            return Ok(RiccatiSolution { p: p_mat, k, e, iterations: iter });
        }
        prev_p = Some(p_mat);
    }
    Err(LqrError::Stalled { iterations: MAX_KLEINMAN_ITER, residual: last_residual })
}

/// Sensitivity of the Riccati solution in parameter `l`: solves
/// `E' X + X E + F_l = 0` with
/// `F_l = A_l' P + P A_l - P B_l R^{-1} B' P - P B R^{-1} B_l' P + Q_l`,
/// where the `_l` matrices are entrywise parameter derivatives at `alpha`.
pub fn riccati_sensitivity(
    lp: &LqrProblem,
    sol: &RiccatiSolution,
    alpha: &[f64],
    l: usize,
) -> Result<DMatrix<f64>, LqrError> {
    if l >= lp.param_dim {
        return Err(LqrError::Invalid(format!(
            "parameter index {l} out of range for {} parameters",
            lp.param_dim
        )));
    }
    let n = lp.state_dim;
    let da = lp.eval_matrix_derivative(&lp.a, n, n, l, alpha)?;
    let db = lp.eval_matrix_derivative(&lp.b, n, lp.control_dim, l, alpha)?;
    let dq = lp.eval_matrix_derivative(&lp.q, n, n, l, alpha)?;
    let b = lp.eval_b(alpha)?;
    let rinv = Cholesky::new(lp.r.clone())
        .expect("R validated positive definite")
        .inverse();
    let p = &sol.p;
    let f = da.transpose() * p + p * &da
        - p * &db * &rinv * b.transpose() * p
        - p * &b * &rinv * db.transpose() * p
        + dq;
    lyap_solve(&sol.e, &f)
}

/// First-order corrected gain for the parameter step `delta_alpha`:
/// `K_ne = K + R^{-1} sum_l (B_l' P + B' P_l) delta_alpha_l`, with all
/// derivatives taken at the nominal parameters. Apply as `u = -K_ne x`.
pub fn neoc_gain(
    lp: &LqrProblem,
    sol: &RiccatiSolution,
    sensitivities: &[DMatrix<f64>],
    delta_alpha: &[f64],
) -> Result<DMatrix<f64>, LqrError> {
    if sensitivities.len() != lp.param_dim || delta_alpha.len() != lp.param_dim {
        return Err(LqrError::Invalid(format!(
            "need one sensitivity and one delta per parameter ({})",
            lp.param_dim
        )));
    }
    let n = lp.state_dim;
    let b = lp.eval_b(&lp.alpha_nominal)?;
    let rinv = Cholesky::new(lp.r.clone())
        .expect("R validated positive definite")
        .inverse();
    let mut k = sol.k.clone();
    for (l, (dp, &d)) in sensitivities.iter().zip(delta_alpha).enumerate() {
        if dp.nrows() != n || dp.ncols() != n {
            return Err(LqrError::Invalid(format!(
                "sensitivity {l} must be {n}x{n}"
            )));
        }
        if d == 0.0 {
            continue;
        }
        let db = lp.eval_matrix_derivative(&lp.b, n, lp.control_dim, l, &lp.alpha_nominal)?;
        k += &rinv * (db.transpose() * &sol.p + b.transpose() * dp) * d;
    }
    Ok(k)
}
