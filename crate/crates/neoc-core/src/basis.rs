//! Monomial basis functions, their gradients, and the L2 inner product over
//! the box domain, realized by tensor-product Gauss-Legendre quadrature.
//!
//! Every basis function vanishes at the origin (total degree >= 1), which
//! pins the value approximation to phi(0) = 0 and the derived control law to
//! u(0) = 0. Quadrature nodes and weights are deterministic for a given
//! (domain, order), and all downstream inner products reduce over nodes in a
//! fixed order, so repeated runs are bit-identical.

use crate::expr::{Expr, ExprError};
use crate::linalg;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("duplicate multi-index {0:?}")]
    DuplicateIndex(Vec<u32>),
    #[error("multi-index {0:?} has total degree 0; basis functions must vanish at the origin")]
    ZeroIndex(Vec<u32>),
    #[error("multi-index has {got} entries, expected state dimension {dim}")]
    IndexLength { got: usize, dim: usize },
    #[error("basis must contain at least one function")]
    Empty,
    #[error("quadrature order must be at least 2, got {0}")]
    OrderTooLow(usize),
    #[error("quadrature grid would need {0} nodes, above the 1e6 guard")]
    TooManyNodes(u128),
    #[error("domain must satisfy lo < hi with finite bounds on every axis")]
    BadDomain,
    #[error("invalid basis spec entry '{entry}': {msg}")]
    BadSpec { entry: String, msg: String },
    #[error("evaluation failed at quadrature node {node}: {source}")]
    EvalAtNode { node: usize, source: ExprError },
}

/// Monomial basis: function j is the product over axes i of x_i^deg[j][i].
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub dim: usize,
    pub exprs: Vec<Expr>,
    /// grads[j][i] = d psi_j / d x_i, folded.
    pub grads: Vec<Vec<Expr>>,
    pub multi_indices: Vec<Vec<u32>>,
    pub max_degree: u32,
}

/// Tensor-product Gauss-Legendre grid over a box. `nodes` is row-major
/// (node index, then axis); weights are strictly positive and sum to the
/// volume of the box.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub dim: usize,
    pub order: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn monomial_basis(n: usize, spec: &[Vec<u32>]) -> Result<BasisSet, BasisError> {
    if spec.is_empty() {
        return Err(BasisError::Empty);
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut exprs = Vec::with_capacity(spec.len());
    let mut grads = Vec::with_capacity(spec.len());
    let mut max_degree = 0u32;
    for idx in spec {
        if idx.len() != n {
            return Err(BasisError::IndexLength {
                got: idx.len(),
                dim: n,
            });
        }
        let total: u32 = idx.iter().sum();
        if total == 0 {
            return Err(BasisError::ZeroIndex(idx.clone()));
        }
        if !seen.insert(idx.clone()) {
            return Err(BasisError::DuplicateIndex(idx.clone()));
        }
        max_degree = max_degree.max(total);
        let e = monomial_expr(idx);
        let grad = (0..n)
            .map(|i| e.diff(&state_var(i)).expr)
            .collect::<Vec<_>>();
        exprs.push(e);
        grads.push(grad);
    }
    Ok(BasisSet {
        dim: n,
        exprs,
        grads,
        multi_indices: spec.to_vec(),
        max_degree,
    })
}

/// All monomial multi-indices of even total degree 2, 4, .., `max_degree`,
/// grouped by degree and in descending lexicographic order within each
/// group. The constant is excluded so every member vanishes at the origin.
pub fn even_monomials(n: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn distribute(n: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=remaining).rev() {
            prefix.push(k);
            distribute(n, remaining - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut d = 2;
    while d <= max_degree {
        distribute(n, d, &mut Vec::with_capacity(n), &mut out);
        d += 2;
    }
    out
}

pub(crate) fn state_var(i: usize) -> String {
    format!("x{}", i + 1)
}

fn monomial_expr(idx: &[u32]) -> Expr {
    let mut e: Option<Expr> = None;
    for (i, &d) in idx.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let var = Expr::var(&state_var(i));
        let factor = if d == 1 {
            var
        } else {
            Expr::Binary(
                crate::expr::BinOp::Pow,
                Box::new(var),
                Box::new(Expr::Const(d as f64)),
            )
        };
        e = Some(match e {
            None => factor,
            Some(prev) => Expr::Binary(crate::expr::BinOp::Mul, Box::new(prev), Box::new(factor)),
        });
    }
    e.expect("total degree >= 1 checked by caller")
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    /// Values of all basis functions at `x`, written into `out` (length N).
    /// Matches `Expr` evaluation of `exprs` bit for bit.
    pub fn eval_psi(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.len());
        for (j, idx) in self.multi_indices.iter().enumerate() {
            let mut acc: Option<f64> = None;
            for (i, &d) in idx.iter().enumerate() {
                if d == 0 {
                    continue;
                }
                let factor = if d == 1 { x[i] } else { x[i].powi(d as i32) };
                acc = Some(match acc {
                    None => factor,
                    Some(a) => a * factor,
                });
            }
            out[j] = acc.unwrap_or(0.0);
        }
    }

    /// Gradients of all basis functions at `x`, row-major into `out` with
    /// out[j * dim + i] = d psi_j / d x_i. Matches the `grads` Expr trees bit
    /// for bit (same factor order as symbolic differentiation produces).
    pub fn eval_grad(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len() * self.dim);
        for (j, idx) in self.multi_indices.iter().enumerate() {
            for i in 0..self.dim {
                let d = idx[i];
                if d == 0 {
                    out[j * self.dim + i] = 0.0;
                    continue;
                }
                let mut acc: Option<f64> = None;
                for (k, &dk) in idx.iter().enumerate() {
                    if dk == 0 {
                        continue;
                    }
                    let factor = if k == i {
                        match dk {
                            1 => continue, // derivative factor folds to 1
                            2 => 2.0 * x[k],
                            _ => dk as f64 * x[k].powi(dk as i32 - 1),
                        }
                    } else if dk == 1 {
                        x[k]
                    } else {
                        x[k].powi(dk as i32)
                    };
                    acc = Some(match acc {
                        None => factor,
                        Some(a) => a * factor,
                    });
                }
                out[j * self.dim + i] = acc.unwrap_or(1.0);
            }
        }
    }
}

pub fn gauss_grid(lo: &[f64], hi: &[f64], order: usize) -> Result<QuadratureGrid, BasisError> {
    if order < 2 {
        return Err(BasisError::OrderTooLow(order));
    }
    let dim = lo.len();
    if dim == 0
        || hi.len() != dim
        || lo
            .iter()
            .zip(hi)
            .any(|(a, b)| !a.is_finite() || !b.is_finite() || a >= b)
    {
        return Err(BasisError::BadDomain);
    }
    let total = (order as u128).pow(dim as u32);
    if total > 1_000_000 {
        return Err(BasisError::TooManyNodes(total));
    }
    let (t, w) = gauss_legendre_unit(order);
    // Per-axis affine map from [-1, 1].
    let mut axis_nodes = Vec::with_capacity(dim);
    let mut axis_weights = Vec::with_capacity(dim);
    for i in 0..dim {
        let c = 0.5 * (lo[i] + hi[i]);
        let s = 0.5 * (hi[i] - lo[i]);
        axis_nodes.push(t.iter().map(|v| c + s * v).collect::<Vec<_>>());
        axis_weights.push(w.iter().map(|v| s * v).collect::<Vec<_>>());
    }
    let total = total as usize;
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut counter = vec![0usize; dim];
    for _ in 0..total {
        let mut wt = 1.0;
        for i in 0..dim {
            nodes.push(axis_nodes[i][counter[i]]);
            wt *= axis_weights[i][counter[i]];
        }
        weights.push(wt);
        // Odometer, last axis fastest.
        for i in (0..dim).rev() {
            counter[i] += 1;
            if counter[i] < order {
                break;
            }
            counter[i] = 0;
        }
    }
    Ok(QuadratureGrid {
        dim,
        order,
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        nodes,
        weights,
    })
}

/// Gauss-Legendre nodes and weights on [-1, 1], ascending, exactly symmetric
/// about zero (the negative half mirrors the positive half bit for bit).
fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let half = n / 2;
    for i in 0..half {
        // Largest root first (Newton from the Chebyshev-like initial guess).
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = w;
        xs[i] = -x;
        ws[i] = w;
    }
    if n % 2 == 1 {
        let (_, dp) = legendre_with_deriv(n, 0.0);
        xs[half] = 0.0;
        ws[half] = 2.0 / (dp * dp);
    }
    (xs, ws)
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = if n == 0 {
        0.0
    } else {
        n as f64 * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, d)
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| b - a)
            .product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| v >= a && v <= b)
    }
}

/// Weighted dot product of two point functions over the grid.
pub fn inner_product<F, G>(a: F, b: G, grid: &QuadratureGrid) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let mut acc = 0.0;
    for k in 0..grid.len() {
        let x = grid.node(k);
        acc += grid.weights[k] * a(x) * b(x);
    }
    acc
}

/// Same as `inner_product` for fallible integrands; evaluation failures carry
/// the node index.
pub fn try_inner_product<F, G>(a: F, b: G, grid: &QuadratureGrid) -> Result<f64, BasisError>
where
    F: Fn(&[f64]) -> Result<f64, ExprError>,
    G: Fn(&[f64]) -> Result<f64, ExprError>,
{
    let mut acc = 0.0;
    for k in 0..grid.len() {
        let x = grid.node(k);
        let av = a(x).map_err(|source| BasisError::EvalAtNode { node: k, source })?;
        let bv = b(x).map_err(|source| BasisError::EvalAtNode { node: k, source })?;
        acc += grid.weights[k] * av * bv;
    }
    Ok(acc)
}

/// Basis values and gradients tabulated on a grid. All Galerkin inner
/// products downstream become weighted dot products against these tables.
#[derive(Debug, Clone)]
pub struct BasisCache {
    /// psi[(j, k)] = psi_j at node k; N x K.
    pub psi: DMatrix<f64>,
    /// psi_w[(j, k)] = psi_j at node k times the node weight; N x K.
    pub psi_w: DMatrix<f64>,
    /// grad[i][(j, k)] = d psi_j / d x_i at node k; dim matrices, each N x K.
    pub grad: Vec<DMatrix<f64>>,
}

impl BasisCache {
    pub fn new(basis: &BasisSet, grid: &QuadratureGrid) -> BasisCache {
        let n_fns = basis.len();
        let k_nodes = grid.len();
        let mut psi = DMatrix::zeros(n_fns, k_nodes);
        let mut psi_w = DMatrix::zeros(n_fns, k_nodes);
        let mut grad = vec![DMatrix::zeros(n_fns, k_nodes); basis.dim];
        let mut vals = vec![0.0; n_fns];
        let mut gvals = vec![0.0; n_fns * basis.dim];
        for k in 0..k_nodes {
            let x = grid.node(k);
            basis.eval_psi(x, &mut vals);
            basis.eval_grad(x, &mut gvals);
            for j in 0..n_fns {
                psi[(j, k)] = vals[j];
                psi_w[(j, k)] = vals[j] * grid.weights[k];
                for i in 0..basis.dim {
                    grad[i][(j, k)] = gvals[j * basis.dim + i];
                }
            }
        }
        BasisCache { psi, psi_w, grad }
    }

    /// Condition number of the Gram matrix of the basis on this grid. Large
    /// values mean near-linear-dependence at the configured resolution.
    pub fn gram_cond(&self) -> f64 {
        let gram = &self.psi_w * self.psi.transpose();
        linalg::cond_2(&gram)
    }
}

/// Parses the CLI/config basis spec: semicolon-separated multi-indices with
/// space-separated per-axis degrees, e.g. "2;4;6" (1-D) or "2 0;1 1;0 2".
pub fn parse_basis_spec(s: &str, dim: usize) -> Result<Vec<Vec<u32>>, BasisError> {
    if let Some(rest) = s.trim().strip_prefix("even:") {
        let d = rest.trim().parse::<u32>().map_err(|_| BasisError::BadSpec {
            entry: s.trim().to_string(),
            msg: format!("'{}' is not a nonnegative integer", rest.trim()),
        })?;
        if d < 2 || d % 2 != 0 {
            return Err(BasisError::BadSpec {
                entry: s.trim().to_string(),
                msg: "even:D needs an even maximum degree of at least 2".to_string(),
            });
        }
        return Ok(even_monomials(dim, d));
    }
    let mut out = Vec::new();
    for entry in s.split(';') {
        let entry = entry.trim();
        if entry.is_empty() {
            return Err(BasisError::BadSpec {
                entry: entry.to_string(),
                msg: "empty multi-index".to_string(),
            });
        }
        let degrees = entry
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| BasisError::BadSpec {
                    entry: entry.to_string(),
                    msg: format!("'{tok}' is not a nonnegative integer"),
                })
            })
            .collect::<Result<Vec<u32>, _>>()?;
        if degrees.len() != dim {
            return Err(BasisError::BadSpec {
                entry: entry.to_string(),
                msg: format!("expected {dim} degrees, got {}", degrees.len()),
            });
        }
        out.push(degrees);
    }
    Ok(out)
}
