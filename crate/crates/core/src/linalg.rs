//! Row-major dense kernels for the tiny matrices that live on every grid node.
//!
//! Shapes are passed explicitly; `a` of shape `n×k` is stored as `a[r * k + c]`.
//! These run inside per-step loops, so they write into caller-owned buffers.

use nalgebra::{DMatrix, SymmetricEigen};

/// `out = a · b` with `a: n×k`, `b: k×p`.
#[inline]
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for r in 0..n {
        for c in 0..p {
            let mut acc = 0.0;
            for j in 0..k {
                acc += a[r * k + j] * b[j * p + c];
            }
            out[r * p + c] = acc;
        }
    }
}

/// `out = a · bᵀ` with `a: n×k`, `b: p×k`.
#[inline]
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for r in 0..n {
        for c in 0..p {
            let mut acc = 0.0;
            for j in 0..k {
                acc += a[r * k + j] * b[c * k + j];
            }
            out[r * p + c] = acc;
        }
    }
}

/// `out = a · v` with `a: n×k`.
#[inline]
pub(crate) fn matvec(a: &[f64], v: &[f64], out: &mut [f64], n: usize, k: usize) {
    for r in 0..n {
        let mut acc = 0.0;
        for j in 0..k {
            acc += a[r * k + j] * v[j];
        }
        out[r] = acc;
    }
}

/// `out = aᵀ · v` with `a: n×k`, result of length `k`.
#[inline]
pub(crate) fn matvec_t(a: &[f64], v: &[f64], out: &mut [f64], n: usize, k: usize) {
    for c in 0..k {
        let mut acc = 0.0;
        for r in 0..n {
            acc += a[r * k + c] * v[r];
        }
        out[c] = acc;
    }
}

/// Contracts the third index of an `m×m×m` tensor with `v`: `out[i][p] = Σ_q t[i][p][q] v[q]`.
#[inline]
pub(crate) fn contract_last(t: &[f64], v: &[f64], out: &mut [f64], m: usize) {
    for ip in 0..m * m {
        let mut acc = 0.0;
        for q in 0..m {
            acc += t[ip * m + q] * v[q];
        }
        out[ip] = acc;
    }
}

/// Extracts column `col` of an `n×k` matrix.
#[inline]
pub(crate) fn column(a: &[f64], col: usize, out: &mut [f64], n: usize, k: usize) {
    for r in 0..n {
        out[r] = a[r * k + col];
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `acc += scale · src`.
#[inline]
pub(crate) fn axpy(acc: &mut [f64], scale: f64, src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += scale * s;
    }
}

pub(crate) fn identity(m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
    }
    out
}

/// `out = g + gᵀ` for a square `m×m` matrix.
#[inline]
pub(crate) fn symmetrize_into(g: &[f64], out: &mut [f64], m: usize) {
    for p in 0..m {
        for q in 0..m {
            out[p * m + q] = g[p * m + q] + g[q * m + p];
        }
    }
}

pub(crate) fn to_dmatrix(a: &[f64], n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, k, a)
}

pub(crate) fn from_dmatrix(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows() * a.ncols()];
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            out[r * a.ncols() + c] = a[(r, c)];
        }
    }
    out
}

/// Inverse of a square row-major matrix via LU, `None` if singular.
pub(crate) fn invert(a: &[f64], m: usize) -> Option<Vec<f64>> {
    if m == 1 {
        return (a[0] != 0.0).then(|| vec![1.0 / a[0]]);
    }
    to_dmatrix(a, m, m).lu().try_inverse().map(|inv| from_dmatrix(&inv))
}

/// Spectral condition number of a symmetric matrix; infinite when not positive definite.
pub(crate) fn symmetric_condition_number(a: &[f64], m: usize) -> f64 {
    if m == 1 {
        return if a[0] > 0.0 { 1.0 } else { f64::INFINITY };
    }
    let eig = SymmetricEigen::new(to_dmatrix(a, m, m));
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_nalgebra() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 0.0, 1.0, 3.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 3, 2);
        let expect = to_dmatrix(&a, 2, 3) * to_dmatrix(&b, 3, 2);
        assert_eq!(out.to_vec(), from_dmatrix(&expect));
    }

    #[test]
    fn contraction_uses_third_index() {
        // t[i][p][q] = 100 i + 10 p + q for m = 2
        let mut t = vec![0.0; 8];
        for i in 0..2 {
            for p in 0..2 {
                for q in 0..2 {
                    t[i * 4 + p * 2 + q] = (100 * i + 10 * p + q) as f64;
                }
            }
        }
        let mut out = [0.0; 4];
        contract_last(&t, &[0.0, 1.0], &mut out, 2);
        assert_eq!(out, [1.0, 11.0, 101.0, 111.0]);
    }

    #[test]
    fn condition_number_of_singular_is_infinite() {
        assert!(symmetric_condition_number(&[1.0, 1.0, 1.0, 1.0], 2).is_infinite());
        assert!((symmetric_condition_number(&[2.0, 0.0, 0.0, 0.5], 2) - 4.0).abs() < 1e-12);
    }
}
