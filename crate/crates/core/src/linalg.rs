//! Small dense kernels: Householder orthonormalization and Cholesky solves.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dot_view(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis for the row space of `rows` (m×d, m ≤ d) by Householder
/// QR of its transpose. Each returned row is re-signed so that its first
/// nonzero entry is positive.
pub fn householder_orthonormal_rows(rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, d) = rows.dim();
    if m == 0 || m > d {
        return Err(Error::InvalidConstraint(format!(
            "need 1 <= m <= d, got m={m}, d={d}"
        )));
    }
    // work[j] holds column j of the d×m matrix being factorized.
    let mut work: Vec<Vec<f64>> = rows.outer_iter().map(|r| r.to_vec()).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(m);
    let scale = work
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::RankDeficient);
    }

    for k in 0..m {
        let x = &work[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale {
            return Err(Error::RankDeficient);
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            for t in v.iter_mut() {
                *t /= vnorm;
            }
        }
        for col in work.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= proj * vi;
            }
        }
        reflectors.push(v);
    }

    // Thin Q = H_0 H_1 ... H_{m-1} [I_m; 0], accumulated column by column.
    let mut q = Array2::<f64>::zeros((m, d));
    for j in 0..m {
        let mut col = vec![0.0; d];
        col[j] = 1.0;
        for k in (0..m).rev() {
            let v = &reflectors[k];
            let tail = &mut col[k..];
            let proj = 2.0 * dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= proj * vi;
            }
        }
        let first = col.iter().copied().find(|v| v.abs() > 1e-300).unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for (dst, src) in q.row_mut(j).iter_mut().zip(&col) {
            *dst = sign * src;
        }
    }
    Ok(q)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0_f64, f64::max);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 1e-14 * max_diag || !s.is_finite() {
                    return Err(Error::RankDeficient);
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` for X given the Cholesky factor `l`.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}
