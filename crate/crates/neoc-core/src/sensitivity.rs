//! Parametric sensitivity of converged Galerkin solutions.
//!
//! The central object is the weight Jacobian dw/dalpha, obtained from one
//! linear solve against the closed-loop Galerkin matrix. It yields a
//! first-order adjustment of the control law for a parameter change without
//! re-running policy iteration, a bound-driven step count for splitting
//! large changes, and a homotopy that walks the parameter segment in small
//! adjusted steps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisCache, BasisSet, QuadratureGrid};
use crate::hjb::{
    advection_matrix, control_penalty_inverse, galerkin_step, improve_policy, node_tables,
    ControlLaw, DeltaAdjustment, HjbError, HjbSolution, LawScratch, NodeTables, PolicyOptions,
    COND_LIMIT,
};
use crate::linalg;
use crate::problem::{DerivedProblem, EvalBuf, ProblemSpec};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("{0}")]
    Invalid(String),
    /// The closed-loop Galerkin matrix cannot be solved against reliably.
    #[error(
        "sensitivity system is singular or nearly singular (cond ~ {cond:.3e}); \
         reduce the basis degrees, raise the quadrature order, or shrink the domain"
    )]
    Singular { cond: f64 },
    /// A curvature-sampling solve failed; names the parameter point.
    #[error("solve failed at alpha = {alpha:?}: {source}")]
    SolveAt {
        alpha: Vec<f64>,
        source: Box<HjbError>,
    },
    /// A homotopy step failed; names the step and the parameter point.
    #[error("homotopy step {step} of {total} failed at alpha = {alpha:?}: {source}")]
    Step {
        step: usize,
        total: usize,
        alpha: Vec<f64>,
        source: Box<SensitivityError>,
    },
    #[error(transparent)]
    Hjb(#[from] HjbError),
}

/// Weight Jacobian of a converged solution in the problem parameters,
/// together with the expansion point it was computed at.
#[derive(Debug, Clone)]
pub struct SensitivityResult {
    /// dw/dalpha, one column per parameter (N basis functions x q).
    pub j_w_alpha: DMatrix<f64>,
    /// 2-norm condition estimate of the closed-loop Galerkin matrix.
    pub condition: f64,
    /// Parameter point of the expansion.
    pub alpha: Vec<f64>,
    /// Value weights of the expansion.
    pub weights: DVector<f64>,
}

fn check_derived(p: &ProblemSpec, d: &DerivedProblem) -> Result<(), SensitivityError> {
    let (n, pc, q) = (p.state_dim, p.control_dim, p.param_dim);
    if d.dm_dalpha.len() != q
        || d.df_dalpha.len() != n * q
        || d.dg_dalpha.len() != q
        || d.dg_dalpha.iter().any(|b| b.len() != n * pc)
    {
        return Err(SensitivityError::Invalid(
            "derived problem does not match the problem dimensions".into(),
        ));
    }
    Ok(())
}

fn check_solution(s: &HjbSolution) -> Result<(), SensitivityError> {
    if s.weights.len() != s.basis.len() || s.alpha.len() != s.problem.param_dim {
        return Err(SensitivityError::Invalid(
            "solution weights or parameters do not match its problem".into(),
        ));
    }
    Ok(())
}

/// Jacobian of the converged weights in the parameters: solves
/// M J_l = c_l per parameter, where M is the Galerkin matrix of the
/// converged closed loop and c_l collects the parameter derivatives of the
/// dynamics and cost weighted by the value gradient.
pub fn weight_sensitivity(
    s: &HjbSolution,
    d: &DerivedProblem,
    grid: &QuadratureGrid,
) -> Result<SensitivityResult, SensitivityError> {
    check_solution(s)?;
    check_derived(&s.problem, d)?;
    if grid.dim != s.problem.state_dim {
        return Err(SensitivityError::Invalid(format!(
            "grid dimension {} does not match state dimension {}",
            grid.dim, s.problem.state_dim
        )));
    }
    let cache = BasisCache::new(&s.basis, grid);
    let tables = node_tables(&s.problem, &s.alpha, grid)?;
    let rinv = control_penalty_inverse(&s.problem.r)?;
    let (j, condition) =
        weight_jacobian(&s.problem, d, &cache, &tables, grid, &rinv, &s.alpha, &s.weights)?;
    Ok(SensitivityResult {
        j_w_alpha: j,
        condition,
        alpha: s.alpha.clone(),
        weights: s.weights.clone(),
    })
}

/// Shared core of [`weight_sensitivity`] and the homotopy: the Jacobian at
/// an arbitrary weight vector, not just a packaged solution.
#[allow(clippy::too_many_arguments)]
fn weight_jacobian(
    p: &ProblemSpec,
    d: &DerivedProblem,
    cache: &BasisCache,
    tables: &NodeTables,
    grid: &QuadratureGrid,
    rinv: &DMatrix<f64>,
    alpha: &[f64],
    w: &DVector<f64>,
) -> Result<(DMatrix<f64>, f64), SensitivityError> {
    let n = p.state_dim;
    let pc = p.control_dim;
    let q = p.param_dim;
    let kn = grid.len();
    let nf = cache.psi.nrows();

    // Control and value gradient of the current law at every node.
    let mut u_nodes = DMatrix::zeros(pc, kn);
    improve_policy(cache, tables, rinv, w, &mut u_nodes);
    let mut gphi = DMatrix::zeros(n, kn);
    for k in 0..kn {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..nf {
                acc += w[j] * cache.grad[i][(j, k)];
            }
            gphi[(i, k)] = acc;
        }
    }

    let m = advection_matrix(cache, tables, &u_nodes);
    let cond = linalg::cond_2(&m);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(SensitivityError::Singular { cond });
    }
    let lu = m.clone().lu();

    let mut buf = EvalBuf::default();
    let mut j_mat = DMatrix::zeros(nf, q);
    let mut load = DVector::zeros(kn);
    let mut dga = vec![0.0; pc];
    let mut gta = vec![0.0; pc];
    for l in 0..q {
        let dg_code = &d.code.dg[l];
        for k in 0..kn {
            let x = grid.node(k);
            p.pack(x, alpha, &mut buf);

            // (df/dalpha_l)^T grad phi and dm/dalpha_l.
            let mut drift = 0.0;
            for i in 0..n {
                let dfi = d.code.df[i * q + l].eval_scratch(&buf.vals, &mut buf.stack);
                drift += dfi * gphi[(i, k)];
            }
            let dm = d.code.dm[l].eval_scratch(&buf.vals, &mut buf.stack);

            // grad^T (dg/dalpha_l) R^{-1} g^T grad.
            let gk = &tables.g[k];
            for c in 0..pc {
                let mut a = 0.0;
                let mut b = 0.0;
                for dd in 0..n {
                    a += dg_code[dd * pc + c].eval_scratch(&buf.vals, &mut buf.stack)
                        * gphi[(dd, k)];
                    b += gk[(dd, c)] * gphi[(dd, k)];
                }
                dga[c] = a;
                gta[c] = b;
            }
            let mut mixed = 0.0;
            for a in 0..pc {
                for c in 0..pc {
                    mixed += dga[a] * rinv[(a, c)] * gta[c];
                }
            }

            load[k] = -drift - dm + 0.5 * mixed;
        }
        let c_l = &cache.psi_w * &load;
        let mut col = lu.solve(&c_l).ok_or(SensitivityError::Singular { cond })?;
        if col.iter().any(|v| !v.is_finite()) {
            return Err(SensitivityError::Singular { cond });
        }
        linalg::refine_lu(&lu, &m, &c_l, &mut col);
        j_mat.set_column(l, &col);
    }
    Ok((j_mat, cond))
}

fn check_pairing(s: &HjbSolution, sens: &SensitivityResult) -> Result<(), SensitivityError> {
    if sens.alpha != s.alpha || sens.weights != s.weights {
        return Err(SensitivityError::Invalid(
            "sensitivity was computed for a different solution".into(),
        ));
    }
    if sens.j_w_alpha.nrows() != s.basis.len() || sens.j_w_alpha.ncols() != s.problem.param_dim {
        return Err(SensitivityError::Invalid(
            "weight Jacobian shape does not match the solution".into(),
        ));
    }
    Ok(())
}

fn check_delta(p: &ProblemSpec, delta_alpha: &[f64]) -> Result<(), SensitivityError> {
    if delta_alpha.len() != p.param_dim {
        return Err(SensitivityError::Invalid(format!(
            "{} perturbation entries for {} parameters",
            delta_alpha.len(),
            p.param_dim
        )));
    }
    if delta_alpha.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::Invalid(
            "parameter perturbation has non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Correction payload shared by [`neoc_adjustment`], [`neoc_law`], and the
/// homotopy steps.
fn adjustment(
    s: &HjbSolution,
    sens: &SensitivityResult,
    d: &Arc<DerivedProblem>,
    delta_alpha: &[f64],
) -> Result<DeltaAdjustment, SensitivityError> {
    let weight_step = &sens.j_w_alpha * DVector::from_column_slice(delta_alpha);
    Ok(DeltaAdjustment {
        problem: Arc::clone(&s.problem),
        basis: Arc::clone(&s.basis),
        derived: Arc::clone(d),
        alpha: s.alpha.clone(),
        delta_alpha: delta_alpha.to_vec(),
        base_weights: s.weights.clone(),
        weight_step,
        rinv: control_penalty_inverse(&s.problem.r)?,
    })
}

/// First-order control correction at one point for a parameter change
/// `delta_alpha`, without touching the converged weights. The point must lie
/// inside the problem domain.
pub fn neoc_adjustment(
    s: &HjbSolution,
    sens: &SensitivityResult,
    d: &Arc<DerivedProblem>,
    x: &[f64],
    delta_alpha: &[f64],
) -> Result<Vec<f64>, SensitivityError> {
    check_solution(s)?;
    check_pairing(s, sens)?;
    check_derived(&s.problem, d)?;
    check_delta(&s.problem, delta_alpha)?;
    if x.len() != s.problem.state_dim {
        return Err(SensitivityError::Invalid(format!(
            "point has {} coordinates, state dimension is {}",
            x.len(),
            s.problem.state_dim
        )));
    }
    if !s.problem.in_scaled_domain(x, 1.0) {
        return Err(SensitivityError::Hjb(HjbError::OutsideDomain));
    }
    let delta = adjustment(s, sens, d, delta_alpha)?;
    let mut out = vec![0.0; s.problem.control_dim];
    let mut scratch = LawScratch::default();
    delta.add_into(x, &mut out, &mut scratch);
    Ok(out)
}

/// Adjusted feedback law u* + delta u for the parameter change
/// `delta_alpha`. The correction is affine in `delta_alpha`; a zero change
/// reproduces the base law exactly.
pub fn neoc_law(
    s: &HjbSolution,
    sens: &SensitivityResult,
    d: &Arc<DerivedProblem>,
    delta_alpha: &[f64],
) -> Result<ControlLaw, SensitivityError> {
    check_solution(s)?;
    check_pairing(s, sens)?;
    check_derived(&s.problem, d)?;
    check_delta(&s.problem, delta_alpha)?;
    let delta = adjustment(s, sens, d, delta_alpha)?;
    Ok(ControlLaw::adjusted(s.law()?, vec![delta])?)
}

/// First-order sensitivity of the approximate value at `x` in each
/// parameter: J_{w,alpha}^T Psi(x). No domain check; the basis extrapolates
/// polynomially outside the domain.
pub fn value_sensitivity(
    s: &HjbSolution,
    sens: &SensitivityResult,
    x: &[f64],
) -> Result<Vec<f64>, SensitivityError> {
    check_solution(s)?;
    check_pairing(s, sens)?;
    if x.len() != s.problem.state_dim {
        return Err(SensitivityError::Invalid(format!(
            "point has {} coordinates, state dimension is {}",
            x.len(),
            s.problem.state_dim
        )));
    }
    let nf = s.basis.len();
    let q = s.problem.param_dim;
    let mut vals = vec![0.0; nf];
    s.basis.eval_psi(x, &mut vals);
    let mut out = vec![0.0; q];
    for (l, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, v) in vals.iter().enumerate() {
            acc += sens.j_w_alpha[(j, l)] * v;
        }
        *o = acc;
    }
    Ok(out)
}

/// Number of homotopy steps needed to keep the per-step second-order error
/// below `epsilon`, given a curvature bound `m_bound` on the control law in
/// the parameters: ceil(m ||delta||^2 / (2 eps)), floored at one step.
pub fn min_steps(m_bound: f64, delta_alpha: &[f64], epsilon: f64) -> Result<usize, SensitivityError> {
    if !m_bound.is_finite() || m_bound <= 0.0 {
        return Err(SensitivityError::Invalid(format!(
            "curvature bound must be positive and finite, got {m_bound}"
        )));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(SensitivityError::Invalid(format!(
            "error budget must be positive and finite, got {epsilon}"
        )));
    }
    if delta_alpha.is_empty() || delta_alpha.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::Invalid(
            "parameter perturbation is empty or non-finite".into(),
        ));
    }
    let norm2: f64 = delta_alpha.iter().map(|v| v * v).sum();
    let raw = (m_bound * norm2 / (2.0 * epsilon)).ceil();
    if raw > usize::MAX as f64 {
        return Err(SensitivityError::Invalid(format!(
            "step count {raw:.3e} overflows"
        )));
    }
    Ok((raw as usize).max(1))
}

/// Empirical curvature bound for [`min_steps`]: the largest second
/// difference of the recalculated control law in each parameter, sampled at
/// `samples_per_axis` points per parameter axis (other parameters held at
/// their range midpoints) and maximized over the quadrature nodes and
/// control channels. Each sample runs a fresh policy iteration.
#[allow(clippy::too_many_arguments)]
pub fn estimate_curvature(
    problem: &Arc<ProblemSpec>,
    basis: &Arc<BasisSet>,
    grid: &QuadratureGrid,
    u0: &ControlLaw,
    opts: &PolicyOptions,
    alpha_range: &[(f64, f64)],
    samples_per_axis: usize,
) -> Result<f64, SensitivityError> {
    let q = problem.param_dim;
    if q == 0 {
        return Err(SensitivityError::Invalid("problem has no parameters".into()));
    }
    if alpha_range.len() != q {
        return Err(SensitivityError::Invalid(format!(
            "{} range entries for {} parameters",
            alpha_range.len(),
            q
        )));
    }
    if samples_per_axis < 2 {
        return Err(SensitivityError::Invalid(
            "need at least two samples per parameter axis".into(),
        ));
    }
    for (l, &(lo, hi)) in alpha_range.iter().enumerate() {
        if !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(SensitivityError::Invalid(format!(
                "invalid range [{lo}, {hi}] for parameter {}",
                problem.alpha_names[l]
            )));
        }
        if hi == lo {
            return Err(SensitivityError::Invalid(format!(
                "degenerate alpha_range: parameter {} collapses to a point",
                problem.alpha_names[l]
            )));
        }
    }

    let mid: Vec<f64> = alpha_range.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
    let solve = |alpha: &[f64]| -> Result<ControlLaw, SensitivityError> {
        let sol = crate::hjb::policy_iteration(problem, alpha, basis, grid, u0, opts)
            .map_err(|e| SensitivityError::SolveAt {
                alpha: alpha.to_vec(),
                source: Box::new(e),
            })?;
        Ok(sol.law()?)
    };

    let kn = grid.len();
    let pc = problem.control_dim;
    let mut scratch = LawScratch::default();
    let mut um = vec![0.0; pc];
    let mut u0v = vec![0.0; pc];
    let mut up = vec![0.0; pc];
    let mut worst = 0.0f64;
    for (l, &(lo, hi)) in alpha_range.iter().enumerate() {
        let width = hi - lo;
        // A narrow stencil keeps the second difference local; the samples
        // near the range ends shift inward so the stencil stays in range.
        let h = 0.01 * width;
        for s in 0..samples_per_axis {
            let frac = s as f64 / (samples_per_axis - 1) as f64;
            let center = (lo + frac * width).clamp(lo + h, hi - h);
            let mut alpha = mid.clone();
            alpha[l] = center - h;
            let law_m = solve(&alpha)?;
            alpha[l] = center;
            let law_0 = solve(&alpha)?;
            alpha[l] = center + h;
            let law_p = solve(&alpha)?;
            for k in 0..kn {
                let x = grid.node(k);
                law_m.eval_into(x, &mut um, &mut scratch);
                law_0.eval_into(x, &mut u0v, &mut scratch);
                law_p.eval_into(x, &mut up, &mut scratch);
                for c in 0..pc {
                    let second = (up[c] - 2.0 * u0v[c] + um[c]) / (h * h);
                    worst = worst.max(second.abs());
                }
            }
        }
    }
    Ok(worst)
}

/// One step of [`homotopy_neoc`].
#[derive(Debug, Clone)]
pub struct HomotopyStep {
    /// 1-based step number.
    pub step: usize,
    /// Parameter point the step expanded around.
    pub alpha: Vec<f64>,
    /// Condition estimate of the sensitivity system at this step.
    pub condition: f64,
    /// Infinity norm of the predicted weight update.
    pub weight_step_norm: f64,
    /// Infinity norm of the corrector change, when polishing.
    pub polish_change: Option<f64>,
}

/// Output of [`homotopy_neoc`].
#[derive(Debug, Clone)]
pub struct HomotopyResult {
    /// Adjusted law at the far end of the parameter segment: the chained
    /// first-order corrections, or the refit Galerkin law when polishing.
    pub law: ControlLaw,
    /// Weights at the far end (predicted, or polished).
    pub weights: DVector<f64>,
    /// Parameter point reached.
    pub alpha: Vec<f64>,
    pub steps: Vec<HomotopyStep>,
}

/// Walks the parameter segment from the solution's alpha to
/// alpha + delta_alpha in `n_steps` equal sub-steps. Each step recomputes
/// the weight Jacobian at the current point and applies a first-order
/// update; with `polish` every update is followed by one Galerkin
/// policy-evaluation step. A single unpolished step reproduces
/// [`neoc_law`] exactly.
pub fn homotopy_neoc(
    s: &HjbSolution,
    d: &Arc<DerivedProblem>,
    grid: &QuadratureGrid,
    delta_alpha: &[f64],
    n_steps: usize,
    polish: bool,
) -> Result<HomotopyResult, SensitivityError> {
    check_solution(s)?;
    check_derived(&s.problem, d)?;
    check_delta(&s.problem, delta_alpha)?;
    if n_steps == 0 {
        return Err(SensitivityError::Invalid(
            "homotopy requires at least one step".into(),
        ));
    }
    if grid.dim != s.problem.state_dim {
        return Err(SensitivityError::Invalid(format!(
            "grid dimension {} does not match state dimension {}",
            grid.dim, s.problem.state_dim
        )));
    }

    let p = &s.problem;
    let cache = BasisCache::new(&s.basis, grid);
    let rinv = control_penalty_inverse(&p.r)?;
    let frac = 1.0 / n_steps as f64;
    let sub: Vec<f64> = delta_alpha.iter().map(|v| v * frac).collect();
    let sub_vec = DVector::from_column_slice(&sub);

    let mut alpha = s.alpha.clone();
    let mut w = s.weights.clone();
    let mut deltas = Vec::with_capacity(n_steps);
    let mut steps = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let fail = |source: SensitivityError| SensitivityError::Step {
            step,
            total: n_steps,
            alpha: alpha.clone(),
            source: Box::new(source),
        };
        let tables = node_tables(p, &alpha, grid).map_err(|e| fail(e.into()))?;
        let (j, condition) =
            weight_jacobian(p, d, &cache, &tables, grid, &rinv, &alpha, &w).map_err(&fail)?;
        let weight_step = &j * &sub_vec;

        deltas.push(DeltaAdjustment {
            problem: Arc::clone(p),
            basis: Arc::clone(&s.basis),
            derived: Arc::clone(d),
            alpha: alpha.clone(),
            delta_alpha: sub.clone(),
            base_weights: w.clone(),
            weight_step: weight_step.clone(),
            rinv: rinv.clone(),
        });

        let predicted = &w + &weight_step;
        let alpha_next: Vec<f64> = alpha.iter().zip(&sub).map(|(a, d)| a + d).collect();
        let (w_next, polish_change) = if polish {
            let law = ControlLaw::galerkin(
                Arc::clone(p),
                Arc::clone(&s.basis),
                alpha_next.clone(),
                predicted.clone(),
            )
            .map_err(|e| fail(e.into()))?;
            let refit = galerkin_step(p, &alpha_next, &s.basis, grid, &law)
                .map_err(|e| fail(e.into()))?;
            let change = (&refit - &predicted).amax();
            (refit, Some(change))
        } else {
            (predicted, None)
        };

        steps.push(HomotopyStep {
            step,
            alpha: alpha.clone(),
            condition,
            weight_step_norm: weight_step.amax(),
            polish_change,
        });
        w = w_next;
        alpha = alpha_next;
    }

    let law = if polish {
        ControlLaw::galerkin(Arc::clone(p), Arc::clone(&s.basis), alpha.clone(), w.clone())?
    } else {
        ControlLaw::adjusted(s.law()?, deltas)?
    };
    Ok(HomotopyResult {
        law,
        weights: w,
        alpha,
        steps,
    })
}
