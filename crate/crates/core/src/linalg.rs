//! Small dense linear-algebra helpers shared across modules.
//!
//! Factorizations are delegated to `nalgebra`; everything else in the crate
//! works on `ndarray` arrays, so this module also owns the conversions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn from_dvector(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

pub fn check_square(a: ArrayView2<f64>, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::Shape(format!("{what} must be square, got {r}x{c}")));
    }
    Ok(r)
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}

pub fn max_abs(a: ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn max_asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows().min(a.ncols());
    let mut m = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            m = m.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    m
}

pub fn norm2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Full symmetric eigendecomposition, eigenvalues in ascending order.
pub fn sym_eigh(a: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = check_square(a, "symmetric eigen input")?;
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    let eig = SymmetricEigen::new(to_dmatrix(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(a, "cholesky input")?;
    let chol = nalgebra::Cholesky::new(to_dmatrix(a))
        .ok_or_else(|| Error::NotPositiveDefinite("cholesky factorization failed".into()))?;
    Ok(from_dmatrix(&chol.l()))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_square(a, "spd inverse input")?;
    let chol = nalgebra::Cholesky::new(to_dmatrix(a))
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{n}x{n} matrix")))?;
    Ok(symmetrize(&from_dmatrix(&chol.inverse())))
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(a, "spd solve lhs")?;
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "lhs has {} rows, rhs has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let chol = nalgebra::Cholesky::new(to_dmatrix(a))
        .ok_or_else(|| Error::NotPositiveDefinite("spd solve".into()))?;
    Ok(from_dmatrix(&chol.solve(&to_dmatrix(b))))
}

pub fn trace(a: ArrayView2<f64>) -> f64 {
    a.diag().sum()
}

pub fn identity(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigh_is_sorted_and_reconstructs() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let (vals, vecs) = sym_eigh(a.view()).unwrap();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        let back = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        assert!(max_abs((&back - &a).view()) < 1e-12);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let inv = spd_inverse(a.view()).unwrap();
        let prod = a.dot(&inv);
        assert!(max_abs((&prod - &identity(2)).view()) < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_lower(a.view()).is_err());
    }
}
