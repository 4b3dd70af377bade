//! Structured representations of the dual-space Hessian `∇²φ*(y)`.
//!
//! None of the supported sets needs a dense d×d matrix: the ball Hessian is a
//! scaled identity minus a rank-one term, the simplex Hessian is a diagonal
//! minus an outer product, and polytopes give identity plus a rank-m
//! correction. `to_dense` exists for tests and small-dimensional inspection.

use std::sync::Arc;

use ndarray::Array2;

use crate::linalg::{dot, dot_view};

#[derive(Clone, Debug)]
pub enum DualHessian {
    /// `scale · (I − coeff · v vᵀ)`; `log_det_factor = ln(1 − coeff‖v‖²)`.
    Ball {
        scale: f64,
        coeff: f64,
        v: Vec<f64>,
        log_det_factor: f64,
    },
    /// `diag(p) − p pᵀ` with `log_p` and the log of the implicit last weight.
    Simplex {
        p: Vec<f64>,
        log_p: Vec<f64>,
        log_p_last: f64,
    },
    /// `I + Σ_i sigma_i · left_i ⊗ right_i`, with `ln(1 + sigma_i)` kept
    /// alongside for the determinant. `left` rows are the dual tokens,
    /// `right` rows the tokens; `⟨left_i, right_j⟩ = δ_ij`.
    LowRank {
        dim: usize,
        sigma: Vec<f64>,
        log_one_plus_sigma: Vec<f64>,
        left: Arc<Array2<f64>>,
        right: Arc<Array2<f64>>,
    },
}

impl DualHessian {
    pub fn dim(&self) -> usize {
        match self {
            DualHessian::Ball { v, .. } => v.len(),
            DualHessian::Simplex { p, .. } => p.len(),
            DualHessian::LowRank { dim, .. } => *dim,
        }
    }

    /// `log |det ∇²φ*(y)|` from the closed-form structure.
    pub fn log_det(&self) -> f64 {
        match self {
            DualHessian::Ball {
                scale,
                v,
                log_det_factor,
                ..
            } => v.len() as f64 * scale.ln() + log_det_factor,
            DualHessian::Simplex {
                log_p, log_p_last, ..
            } => log_p.iter().sum::<f64>() + log_p_last,
            DualHessian::LowRank {
                log_one_plus_sigma,
                ..
            } => log_one_plus_sigma.iter().sum(),
        }
    }

    pub fn matvec(&self, u: &[f64]) -> Vec<f64> {
        match self {
            DualHessian::Ball { scale, coeff, v, .. } => {
                let proj = coeff * dot(v, u);
                u.iter()
                    .zip(v)
                    .map(|(ui, vi)| scale * (ui - proj * vi))
                    .collect()
            }
            DualHessian::Simplex { p, .. } => {
                let pu = dot(p, u);
                u.iter().zip(p).map(|(ui, pi)| pi * ui - pi * pu).collect()
            }
            DualHessian::LowRank {
                sigma, left, right, ..
            } => {
                let mut out = u.to_vec();
                for ((s, l), r) in sigma.iter().zip(left.outer_iter()).zip(right.outer_iter()) {
                    let c = s * dot_view(r, u);
                    for (o, li) in out.iter_mut().zip(l.iter()) {
                        *o += c * li;
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let d = self.dim();
        match self {
            DualHessian::Ball { scale, coeff, v, .. } => Array2::from_shape_fn((d, d), |(i, j)| {
                let id = if i == j { 1.0 } else { 0.0 };
                scale * (id - coeff * v[i] * v[j])
            }),
            DualHessian::Simplex { p, .. } => Array2::from_shape_fn((d, d), |(i, j)| {
                let diag = if i == j { p[i] } else { 0.0 };
                diag - p[i] * p[j]
            }),
            DualHessian::LowRank {
                sigma, left, right, ..
            } => {
                let mut h = Array2::<f64>::eye(d);
                for ((s, l), r) in sigma.iter().zip(left.outer_iter()).zip(right.outer_iter()) {
                    for i in 0..d {
                        for j in 0..d {
                            h[[i, j]] += s * l[i] * r[j];
                        }
                    }
                }
                h
            }
        }
    }
}
