//! Constraint token matrices: seeded orthonormal keys and dual (biorthogonal) rows.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, householder_orthonormal_rows};
use crate::rng::SeededRng;

const MAX_DRAWS: u64 = 8;

/// `m` orthonormal rows in `R^d` from a seeded Gaussian draw.
///
/// The Gaussian matrix is orthonormalized with Householder QR; rows are
/// re-signed so the first nonzero entry is positive, which makes the result a
/// function of `seed` alone. A numerically rank-deficient draw is retried on a
/// fresh stream, up to eight times.
pub fn orthonormalize_tokens(seed: u64, m: usize, d: usize) -> Result<Array2<f64>> {
    if m == 0 || m > d {
        return Err(Error::InvalidConstraint(format!(
            "token count must satisfy 1 <= m <= d, got m={m}, d={d}"
        )));
    }
    for attempt in 0..MAX_DRAWS {
        let mut rng = SeededRng::stream(seed, attempt);
        let draw = Array2::from_shape_vec((m, d), rng.normal_vec(m * d))
            .expect("shape matches length");
        match householder_orthonormal_rows(draw.view()) {
            Ok(q) => return Ok(q),
            Err(Error::RankDeficient) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RankDeficient)
}

/// Rows of `(A Aᵀ)⁻¹ A` for a token matrix `A` stored row-wise (m×d).
///
/// The result satisfies `⟨ã_i, a_j⟩ = δ_ij`; for orthonormal `A` it equals `A`.
pub fn dual_tokens(tokens: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, d) = tokens.dim();
    if m == 0 || m > d {
        return Err(Error::RankDeficient);
    }
    let gram = tokens.dot(&tokens.t());
    let l = cholesky(gram.view())?;
    Ok(cholesky_solve(l.view(), tokens.view()))
}

/// `max |A Aᵀ − I|`.
pub fn orthonormality_error(tokens: &Array2<f64>) -> f64 {
    let gram = tokens.dot(&tokens.t());
    gram.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_token_is_unit_vector() {
        let a = orthonormalize_tokens(3, 1, 4).unwrap();
        let n: f64 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-14);
    }

    #[test]
    fn square_key_is_orthogonal() {
        let a = orthonormalize_tokens(5, 2, 2).unwrap();
        let det = a[[0, 0]] * a[[1, 1]] - a[[0, 1]] * a[[1, 0]];
        assert!((det.abs() - 1.0).abs() < 1e-10);
        assert!(orthonormality_error(&a) < 1e-10);
    }

    #[test]
    fn keys_are_seed_deterministic() {
        let a = orthonormalize_tokens(42, 5, 30).unwrap();
        let b = orthonormalize_tokens(42, 5, 30).unwrap();
        let c = orthonormalize_tokens(43, 5, 30).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(orthonormalize_tokens(1, 0, 3).is_err());
        assert!(orthonormalize_tokens(1, 4, 3).is_err());
    }

    #[test]
    fn dual_of_diagonal() {
        let a = array![[2.0, 0.0], [0.0, 1.0]];
        let dual = dual_tokens(&a).unwrap();
        let want = array![[0.5, 0.0], [0.0, 1.0]];
        for (x, y) in dual.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_of_orthonormal_is_identity_map() {
        let a = orthonormalize_tokens(9, 4, 10).unwrap();
        let dual = dual_tokens(&a).unwrap();
        for (x, y) in dual.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_rejects_dependent_rows() {
        let a = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]];
        assert!(matches!(dual_tokens(&a), Err(Error::RankDeficient)));
    }
}
