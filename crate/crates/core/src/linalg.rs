//! Dense spectral helpers shared by the library modules.

use nalgebra::{DMatrix, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Singular values at or below this are treated as exact zeros.
pub const ZERO_SINGULAR: f64 = 1e-14;

const MAX_ITER: usize = 100_000;

/// Builds a matrix from row slices.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Rejects non-finite input and divides by the largest entry so the solver never
/// sees values near overflow.
fn normalized(a: &Mat) -> Result<(Mat, f64)> {
    if !all_finite(a) {
        return Err(Error::Numerical(format!(
            "non-finite entry in a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax();
    Ok(if scale > 0.0 { (a / scale, scale) } else { (a.clone(), 1.0) })
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` descending.
pub fn thin_svd(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let (m, n) = a.shape();
    let d = m.min(n);
    if d == 0 {
        return Ok((Mat::zeros(m, 0), Vec::new(), Mat::zeros(0, n)));
    }
    let (b, scale) = normalized(a)?;
    let svd = SVD::try_new(b, true, true, f64::EPSILON, MAX_ITER).ok_or_else(|| svd_failure(a))?;
    let u = svd.u.ok_or_else(|| svd_failure(a))?;
    let v_t = svd.v_t.ok_or_else(|| svd_failure(a))?;
    Ok((u, svd.singular_values.iter().map(|x| x * scale).collect(), v_t))
}

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    if a.nrows().min(a.ncols()) == 0 {
        return Ok(Vec::new());
    }
    let (b, scale) = normalized(a)?;
    let svd = SVD::try_new(b, false, false, f64::EPSILON, MAX_ITER).ok_or_else(|| svd_failure(a))?;
    Ok(svd.singular_values.iter().map(|x| x * scale).collect())
}

fn svd_failure(a: &Mat) -> Error {
    Error::Numerical(format!(
        "SVD did not converge on a {}x{} matrix (max |entry| {:e}, finite: {})",
        a.nrows(),
        a.ncols(),
        a.amax(),
        a.iter().all(|x| x.is_finite())
    ))
}

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors of the symmetric part of `s`.
pub fn sym_eigen(s: &Mat) -> Result<(Vec<f64>, Mat)> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let n = s.nrows();
    if n == 0 {
        return Ok((Vec::new(), Mat::zeros(0, 0)));
    }
    let (b, scale) = normalized(&symmetrize(s))?;
    let eig = SymmetricEigen::try_new(b, f64::EPSILON, MAX_ITER).ok_or_else(|| {
        Error::Numerical(format!("symmetric eigensolver did not converge on {n}x{n} input"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k] * scale).collect();
    let vectors = Mat::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

/// Eigenvalues (descending) of the symmetric part of `s`.
pub fn sym_eigenvalues(s: &Mat) -> Result<Vec<f64>> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape("expected a square matrix".into()));
    }
    if s.nrows() == 0 {
        return Ok(Vec::new());
    }
    let (b, scale) = normalized(&symmetrize(s))?;
    let eig = SymmetricEigen::try_new(b, f64::EPSILON, MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().map(|x| x * scale).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}

/// Spectral norm of a symmetric matrix, `max |λᵢ|`.
pub fn sym_spectral_norm(s: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues(s)?
        .into_iter()
        .fold(0.0_f64, |acc, x| acc.max(x.abs())))
}

/// The smaller of `WᵀW` and `WWᵀ`, symmetrized. Both share the nonzero spectrum.
pub fn small_gram(w: &Mat) -> Mat {
    let g = if w.ncols() <= w.nrows() {
        w.tr_mul(w)
    } else {
        w * w.transpose()
    };
    symmetrize(&g)
}

/// Squared singular values of `W` via the smaller Gram matrix, descending, clamped at zero.
pub fn squared_singular_values(w: &Mat) -> Result<Vec<f64>> {
    Ok(sym_eigenvalues(&small_gram(w))?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect())
}

pub fn frobenius_sq(w: &Mat) -> f64 {
    w.iter().map(|x| x * x).sum()
}

pub fn all_finite(w: &Mat) -> bool {
    w.iter().all(|x| x.is_finite())
}
