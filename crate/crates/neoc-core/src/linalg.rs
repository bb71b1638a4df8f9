//! Small dense linear-algebra helpers shared across modules. Everything here
//! is desk scale (n up to a few hundred), so SVD-based condition numbers and
//! LU solves are cheap enough to use freely.

use nalgebra::{DMatrix, DVector};

/// 2-norm condition number. Returns `f64::INFINITY` for singular matrices.
pub fn cond_2(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    let mut smax = 0.0f64;
    let mut smin = f64::INFINITY;
    for s in svd.singular_values.iter() {
        smax = smax.max(*s);
        smin = smin.min(*s);
    }
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Numerical rank: singular values above `tol_rel` times the largest.
pub fn rank(a: &DMatrix<f64>, tol_rel: f64) -> usize {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|s| **s > tol_rel * smax)
        .count()
}

/// LU solve with partial pivoting. `None` when the factorization breaks down.
pub fn solve_lu(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// One step of iterative refinement on an existing solution, reusing the
/// factorization. Tightens the residual to solver accuracy when the system is
/// merely ill-conditioned rather than singular.
pub fn refine_lu(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &mut DVector<f64>,
) {
    let r = b - a * &*x;
    if let Some(dx) = lu.solve(&r) {
        if dx.iter().all(|v| v.is_finite()) {
            *x += dx;
        }
    }
}

/// Largest real part over the eigenvalues of `a`.
pub fn max_eig_real(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    max_eig_real(a) < -1e-12
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues from roundoff are clamped to zero.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = nalgebra::SymmetricEigen::new(a.clone());
    let vals = sym.eigenvalues.map(|l| l.max(0.0).sqrt());
    &sym.eigenvectors * DMatrix::from_diagonal(&vals) * sym.eigenvectors.transpose()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(a: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
