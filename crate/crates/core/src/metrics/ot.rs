//! Wasserstein-1 between uniform point clouds under Euclidean cost.
//!
//! The default path is a debiased entropic estimate
//! `W_ε(X, Y) − ½ W_ε(X, X) − ½ W_ε(Y, Y)`, where `W_ε = ⟨P_ε, C⟩` is the
//! transport cost of the entropic plan. The entropy term itself is left out:
//! at ε = 0.01·median cost it biases small clouds low by several percent,
//! while the plan cost stays within 1% of the exact value.
//!
//! Plans are found by log-domain Sinkhorn with ε-annealing: potentials are
//! warm-started through a geometric ladder of temperatures from the cost
//! diameter down to the target ε. An exact assignment solver covers small
//! equal-size problems.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest problem handed to the cubic-time assignment solver.
pub const MAX_EXACT_SIZE: usize = 256;
/// Temperature ratio between successive annealing stages.
const ANNEAL_FACTOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Target temperature as a multiple of the median pairwise cost.
    pub epsilon_scale: f64,
    /// Iteration cap at the target temperature.
    pub max_iter: usize,
    /// L1 marginal violation accepted as converged.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon_scale: 0.01,
            max_iter: 5000,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    /// False when some subproblem hit `max_iter`; `value` is then the last iterate.
    pub converged: bool,
    pub epsilon: f64,
}

pub(crate) fn euclidean_cost(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let m = y.nrows();
    let mut c = Array2::zeros((x.nrows(), m));
    if m == 0 {
        return c;
    }
    c.as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, row)| {
            let xi = x.row(i);
            for (v, yj) in row.iter_mut().zip(y.outer_iter()) {
                *v = xi
                    .iter()
                    .zip(yj.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        });
    c
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// `out_i = −ε log Σ_j exp(log_w_j + (g_j − C_ij)/ε)` for every row `i`.
fn soft_min(cost: &Array2<f64>, g: &[f64], log_w: f64, eps: f64) -> Vec<f64> {
    (0..cost.nrows())
        .into_par_iter()
        .map(|i| {
            let row = cost.row(i);
            let mut mx = f64::NEG_INFINITY;
            for (c, gj) in row.iter().zip(g) {
                mx = mx.max((gj - c) / eps);
            }
            let s: f64 = row
                .iter()
                .zip(g)
                .map(|(c, gj)| ((gj - c) / eps - mx).exp())
                .sum();
            -eps * (log_w + mx + s.ln())
        })
        .collect()
}

fn anneal_ladder(diameter: f64, target: f64) -> Vec<f64> {
    let mut ladder = Vec::new();
    let mut e = diameter.max(target);
    while e > target {
        ladder.push(e);
        e *= ANNEAL_FACTOR;
    }
    ladder.push(target);
    ladder
}

/// Transport cost of the entropic plan between uniform measures.
fn entropic_ot(cost: &Array2<f64>, eps: f64, cfg: &SinkhornConfig) -> (f64, bool) {
    let (n, m) = cost.dim();
    let cost_t = cost.t().as_standard_layout().into_owned();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let diameter = cost.iter().copied().fold(0.0, f64::max);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let ladder = anneal_ladder(diameter, eps);
    for &e in &ladder[..ladder.len() - 1] {
        let ft = soft_min(cost, &g, log_b, e);
        let gt = soft_min(&cost_t, &f, log_a, e);
        f.iter_mut().zip(&ft).for_each(|(a, b)| *a = 0.5 * (*a + b));
        g.iter_mut().zip(&gt).for_each(|(a, b)| *a = 0.5 * (*a + b));
    }
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        f = soft_min(cost, &g, log_b, eps);
        let g_new = soft_min(&cost_t, &f, log_a, eps);
        // column-marginal violation of the plan built from (f, g)
        let err: f64 = g
            .iter()
            .zip(&g_new)
            .map(|(old, new)| ((old - new) / eps).exp_m1().abs())
            .sum::<f64>()
            / m as f64;
        g = g_new;
        if err < cfg.tolerance {
            converged = true;
            break;
        }
    }
    (plan_cost(cost, &f, &g, eps), converged)
}

/// Symmetric problem `OT_ε(X, X)` by averaged fixed-point updates.
fn entropic_ot_self(cost: &Array2<f64>, eps: f64, cfg: &SinkhornConfig) -> (f64, bool) {
    let n = cost.nrows();
    let log_a = -(n as f64).ln();
    let diameter = cost.iter().copied().fold(0.0, f64::max);
    let mut p = vec![0.0; n];
    for e in anneal_ladder(diameter, eps) {
        let pt = soft_min(cost, &p, log_a, e);
        p.iter_mut().zip(&pt).for_each(|(a, b)| *a = 0.5 * (*a + b));
    }
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let pt = soft_min(cost, &p, log_a, eps);
        let err: f64 = p
            .iter()
            .zip(&pt)
            .map(|(old, new)| ((old - new) / eps).exp_m1().abs())
            .sum::<f64>()
            / n as f64;
        p.iter_mut().zip(&pt).for_each(|(a, b)| *a = 0.5 * (*a + b));
        if err < cfg.tolerance {
            converged = true;
            break;
        }
    }
    (plan_cost(cost, &p, &p, eps), converged)
}

/// `Σ_ij P_ij C_ij` with `P_ij = a_i b_j exp((f_i + g_j − C_ij)/ε)`.
fn plan_cost(cost: &Array2<f64>, f: &[f64], g: &[f64], eps: f64) -> f64 {
    let (n, m) = cost.dim();
    let log_ab = -((n * m) as f64).ln();
    (0..n)
        .into_par_iter()
        .map(|i| {
            cost.row(i)
                .iter()
                .zip(g)
                .map(|(c, gj)| c * ((f[i] + gj - c) / eps + log_ab).exp())
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// Debiased entropic estimate of `W_1(X, Y)`, clamped at zero.
pub fn wasserstein1(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<W1Estimate> {
    check_pair(x, y)?;
    if !(cfg.epsilon_scale > 0.0) {
        return Err(Error::InvalidConfig(
            "epsilon_scale must be positive; use wasserstein1_exact for ε = 0".into(),
        ));
    }
    let cxy = euclidean_cost(x, y);
    let mut flat: Vec<f64> = cxy.iter().copied().collect();
    let med = median(&mut flat);
    if med == 0.0 {
        // every cross pair coincides
        return Ok(W1Estimate {
            value: 0.0,
            converged: true,
            epsilon: 0.0,
        });
    }
    let eps = cfg.epsilon_scale * med;
    let (xy, c1) = entropic_ot(&cxy, eps, cfg);
    let (xx, c2) = entropic_ot_self(&euclidean_cost(x, x), eps, cfg);
    let (yy, c3) = entropic_ot_self(&euclidean_cost(y, y), eps, cfg);
    Ok(W1Estimate {
        value: (xy - 0.5 * xx - 0.5 * yy).max(0.0),
        converged: c1 && c2 && c3,
        epsilon: eps,
    })
}

/// Exact `W_1` for equal-size clouds via optimal assignment.
pub fn wasserstein1_exact(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.nrows(),
        });
    }
    if n > MAX_EXACT_SIZE {
        return Err(Error::InvalidConfig(format!(
            "exact assignment is limited to {MAX_EXACT_SIZE} points, got {n}"
        )));
    }
    let cost = euclidean_cost(x, y);
    let assignment = min_cost_assignment(&cost);
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum::<f64>()
        / n as f64)
}

/// Minimum-cost perfect matching of a square cost matrix (Hungarian method
/// with row/column potentials, O(n³)). Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}
