use ndarray::ArrayView2;
use rayon::prelude::*;

use super::ot::median;
use crate::error::{Error, Result};

/// Multipliers applied to the median pairwise distance.
pub const DEFAULT_BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn rows(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}

/// Median Euclidean distance over all pairs of the pooled sample.
pub fn median_heuristic(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let pooled: Vec<Vec<f64>> = rows(x).into_iter().chain(rows(y)).collect();
    let mut d: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = &pooled;
            (i + 1..p.len()).map(move |j| sq_dist(&p[i], &p[j]).sqrt())
        })
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    median(&mut d)
}

/// Sum of `exp(−‖a−b‖²/(2σ²))` over pairs, per bandwidth, skipping `i = j`
/// when `same` is set.
fn kernel_sums(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64], same: bool) -> Vec<f64> {
    let inv: Vec<f64> = bandwidths.iter().map(|s| -0.5 / (s * s)).collect();
    let per_row: Vec<Vec<f64>> = a
        .par_iter()
        .enumerate()
        .map(|(i, ai)| {
            let mut acc = vec![0.0; inv.len()];
            for (j, bj) in b.iter().enumerate() {
                if same && i == j {
                    continue;
                }
                let d2 = sq_dist(ai, bj);
                for (s, c) in acc.iter_mut().zip(&inv) {
                    *s += (c * d2).exp();
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; inv.len()];
    for r in per_row {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    total
}

/// Unbiased MMD² averaged over bandwidths, before clamping.
pub fn mmd_squared(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidths: &[f64]) -> Result<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::EmptyInput);
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("bandwidths must be positive".into()));
    }
    // Canonical argument order makes the cross sum independent of which
    // sample is passed first, so the estimate is exactly symmetric.
    let (x, y) = if canonical_first(x, y) { (x, y) } else { (y, x) };
    let (n, m) = (x.nrows(), y.nrows());
    let (xr, yr) = (rows(x), rows(y));
    let kxx = kernel_sums(&xr, &xr, bandwidths, true);
    let kyy = kernel_sums(&yr, &yr, bandwidths, true);
    let kxy = kernel_sums(&xr, &yr, bandwidths, false);
    let mut total = 0.0;
    for k in 0..bandwidths.len() {
        total += kxx[k] / (n * (n - 1)) as f64 + kyy[k] / (m * (m - 1)) as f64
            - 2.0 * kxy[k] / (n * m) as f64;
    }
    Ok(total / bandwidths.len() as f64)
}

fn canonical_first(x: ArrayView2<f64>, y: ArrayView2<f64>) -> bool {
    if x.nrows() != y.nrows() {
        return x.nrows() < y.nrows();
    }
    for (a, b) in x.iter().zip(y.iter()) {
        match a.total_cmp(b) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// `sqrt(max(MMD², 0))` with RBF kernels at `bandwidths`, or at the median
/// heuristic times [`DEFAULT_BANDWIDTH_SCALES`] when `None`.
pub fn mmd_rbf(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidths: Option<&[f64]>) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let owned;
    let bw = match bandwidths {
        Some(b) => b,
        None => {
            let med = median_heuristic(x, y);
            if med == 0.0 {
                return Ok(0.0);
            }
            owned = DEFAULT_BANDWIDTH_SCALES.map(|s| s * med);
            &owned[..]
        }
    };
    Ok(mmd_squared(x, y, bw)?.max(0.0).sqrt())
}
