use ndarray::{Array1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Squared 2-Wasserstein distance between two sorted 1-d empirical measures
/// with uniform weights, by the quantile coupling.
///
/// Breakpoints of the two quantile functions are merged in integer units of
/// `1/(n m)`, so equal-size inputs reduce to the paired sorted formula.
pub fn wasserstein_1d_sq(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return s / n as f64;
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0usize;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total += (next - prev) as f64 * diff * diff;
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    total / (n * m) as f64
}

/// Seeded unit directions in `R^d`.
pub fn projection_directions(d: usize, n_projections: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n_projections)
        .map(|_| loop {
            let v = Array1::from(rng.normal_vec(d));
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                break v / norm;
            }
        })
        .collect()
}

fn sorted_projection(x: ArrayView2<f64>, u: &Array1<f64>) -> Vec<f64> {
    let mut p = x.dot(u).to_vec();
    p.sort_by(f64::total_cmp);
    p
}

/// Per-direction 1-d `W_2` distances.
pub fn sliced_wasserstein_projections(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if x.nrows() == 0 || y.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    if n_projections == 0 {
        return Err(Error::InvalidConfig("n_projections must be at least 1".into()));
    }
    let dirs = projection_directions(x.ncols(), n_projections, seed);
    Ok(dirs
        .par_iter()
        .map(|u| wasserstein_1d_sq(&sorted_projection(x, u), &sorted_projection(y, u)).sqrt())
        .collect())
}

/// `sqrt(mean_u W_2²(⟨u, X⟩, ⟨u, Y⟩))` over seeded random unit directions `u`.
///
/// This is the root-mean-square of the per-direction distances; by Jensen it
/// bounds their plain average from above.
pub fn sliced_wasserstein(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let w = sliced_wasserstein_projections(x, y, n_projections, seed)?;
    Ok((w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt())
}
