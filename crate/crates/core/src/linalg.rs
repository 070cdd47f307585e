//! Thin dense linear-algebra layer over `faer`.
//!
//! Everything here is sequential so results are bit-identical across runs and
//! thread counts.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Ridge jitter added to every kernel system before factorization.
pub const JITTER: f64 = 1e-8;

/// Solve `a x = b` for symmetric positive (semi)definite `a`.
///
/// Uses a Cholesky factorization; if that fails the system is solved in the
/// least-squares sense through a truncated SVD.
pub fn solve_spd(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    check_square(a, b)?;
    match a.llt(Side::Lower) {
        Ok(llt) => Ok(llt.solve(b)),
        Err(_) => solve_lstsq(a, b),
    }
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn solve_lstsq(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system has {} rows, right-hand side has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Singular(format!("svd did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let smax = (0..s.nrows()).map(|i| s[i]).fold(0.0_f64, f64::max);
    if !(smax > 0.0) || !smax.is_finite() {
        return Err(Error::Singular("matrix is zero or non-finite".into()));
    }
    let cutoff = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let u = svd.U();
    let v = svd.V();
    let mut utb = u.transpose() * b;
    for i in 0..utb.nrows() {
        let scale = if s[i] > cutoff { 1.0 / s[i] } else { 0.0 };
        for j in 0..utb.ncols() {
            utb[(i, j)] *= scale;
        }
    }
    Ok(v * utb)
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: MatRef<'_, f64>) -> Result<Mat<f64>> {
    match a.llt(Side::Lower) {
        Ok(llt) => {
            let inv = llt.inverse();
            Ok(symmetrize(inv.as_ref()))
        }
        Err(_) => Err(Error::Singular("matrix is not positive definite".into())),
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

pub fn sym_eigen(a: MatRef<'_, f64>) -> Result<SymEigen> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Singular(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    Ok(SymEigen {
        values: (0..s.nrows()).map(|i| s[i]).collect(),
        vectors: evd.U().to_owned(),
    })
}

/// `(a + aᵀ) / 2`.
pub fn symmetrize(a: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn add_diagonal(a: &mut Mat<f64>, value: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)] += value;
    }
}

pub fn column(values: &[f64]) -> Mat<f64> {
    Mat::from_fn(values.len(), 1, |i, _| values[i])
}

pub fn to_vec(col: MatRef<'_, f64>) -> Vec<f64> {
    (0..col.nrows()).map(|i| col[(i, 0)]).collect()
}

pub fn matvec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), v.len());
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * v[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `vᵀ a v`.
pub fn quad_form(a: MatRef<'_, f64>, v: &[f64]) -> f64 {
    dot(v, &matvec(a, v))
}

/// Rows of `m` selected by index, in the given order.
pub fn select_rows(m: MatRef<'_, f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_columns(m: MatRef<'_, f64>, cols: &[usize]) -> Mat<f64> {
    Mat::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Mat<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn check_square(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with right-hand side {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_matches_hand_solution() {
        let a = Mat::from_fn(2, 2, |i, j| [[4.0, 1.0], [1.0, 3.0]][i][j]);
        let b = column(&[1.0, 2.0]);
        let x = solve_spd(a.as_ref(), b.as_ref()).unwrap();
        // det = 11
        assert!((x[(0, 0)] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[(1, 0)] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_falls_back_to_least_squares() {
        let a = Mat::from_fn(2, 2, |_, _| 1.0);
        let b = column(&[2.0, 2.0]);
        let x = solve_spd(a.as_ref(), b.as_ref()).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs() {
        let a = Mat::from_fn(3, 3, |i, j| [[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 3.0]][i][j]);
        let e = sym_eigen(a.as_ref()).unwrap();
        let d = Mat::from_fn(3, 3, |i, j| if i == j { e.values[i] } else { 0.0 });
        let r = &e.vectors * &d * e.vectors.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
