//! Convex constraint sets and their mirror maps.
//!
//! Each set `M ⊂ R^d` carries a strictly convex barrier `φ` whose gradient
//! `∇φ : M → R^d` is a bijection onto the whole dual space. The maps here are
//! closed-form in both directions:
//!
//! | set       | barrier                          | `∇φ*(y)`                          |
//! |-----------|----------------------------------|-----------------------------------|
//! | ball      | `−γ log(R − ‖x‖²)`               | `R y / (√(R‖y‖² + γ²) + γ)`       |
//! | simplex   | negative entropy (reduced coords) | softmax with an implicit zero logit |
//! | polytope  | tanh-rescaled token coefficients | `y + Σ (s⁻¹(⟨a_i,y⟩) − ⟨a_i,y⟩) ã_i` |
//! | hypercube | polytope with `a_i = e_i`, `(0, 1)` | coordinate-wise                   |
//!
//! `mirror_forward` refuses points within a relative distance of
//! [`BOUNDARY_GUARD`] of the boundary; `mirror_inverse` never clamps.

mod hessian;
mod tokens;

use std::cell::Cell;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

pub use hessian::DualHessian;
pub use tokens::{dual_tokens, orthonormality_error, orthonormalize_tokens};

use crate::error::{Error, Result};
use crate::linalg::dot_view;

/// Relative distance to the boundary below which `mirror_forward` rejects a point.
pub const BOUNDARY_GUARD: f64 = 1e-12;

/// Rescaled polytope coefficients are kept within `[-1 + ATANH_CLAMP, 1 - ATANH_CLAMP]`.
pub const ATANH_CLAMP: f64 = 1e-15;

const ORTHONORMAL_TOL: f64 = 1e-10;

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `mirror_forward` evaluations made on the current thread.
pub fn mirror_forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallConstraint {
    pub dim: usize,
    /// Bound `R` on the squared norm: `‖x‖² < R`.
    pub radius_sq: f64,
    pub gamma: f64,
}

impl BallConstraint {
    pub fn new(dim: usize, radius_sq: f64, gamma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConstraint("ball dimension must be >= 1".into()));
        }
        if !(radius_sq > 0.0 && radius_sq.is_finite()) {
            return Err(Error::InvalidConstraint(format!(
                "ball radius_sq must be positive, got {radius_sq}"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConstraint(format!(
                "ball gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            dim,
            radius_sq,
            gamma,
        })
    }

    /// Unit ball with `γ = 1`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(dim, 1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexConstraint {
    /// Reduced dimension; the simplex has `dim + 1` barycentric coordinates.
    pub dim: usize,
}

impl SimplexConstraint {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConstraint("simplex dimension must be >= 1".into()));
        }
        Ok(Self { dim })
    }
}

/// `{x : c_i < ⟨a_i, x⟩ < b_i}` for linearly independent tokens `a_i`.
#[derive(Clone, Debug)]
pub struct PolytopeConstraint {
    tokens: Arc<Array2<f64>>,
    dual_tokens: Arc<Array2<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    orthonormal: bool,
    seed: Option<u64>,
}

impl PartialEq for PolytopeConstraint {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.lower == other.lower
            && self.upper == other.upper
            && self.seed == other.seed
    }
}

impl PolytopeConstraint {
    pub fn new(tokens: Array2<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let (m, d) = tokens.dim();
        if m == 0 || m > d {
            return Err(Error::InvalidConstraint(format!(
                "polytope needs 1 <= m <= d tokens, got m={m}, d={d}"
            )));
        }
        if lower.len() != m || upper.len() != m {
            return Err(Error::InvalidConstraint(format!(
                "expected {m} bounds, got {} lower and {} upper",
                lower.len(),
                upper.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        for (i, (c, b)) in lower.iter().zip(&upper).enumerate() {
            if !(c.is_finite() && b.is_finite() && c < b) {
                return Err(Error::InvalidConstraint(format!(
                    "token {i}: need finite c < b, got c={c}, b={b}"
                )));
            }
        }
        let orthonormal = orthonormality_error(&tokens) < ORTHONORMAL_TOL;
        let tokens = Arc::new(tokens);
        let dual = if orthonormal {
            Arc::clone(&tokens)
        } else {
            Arc::new(dual_tokens(&tokens)?)
        };
        Ok(Self {
            tokens,
            dual_tokens: dual,
            lower,
            upper,
            orthonormal,
            seed: None,
        })
    }

    /// Symmetric bounds `(-bound, bound)` on every token.
    pub fn symmetric(tokens: Array2<f64>, bound: f64) -> Result<Self> {
        let m = tokens.nrows();
        Self::new(tokens, vec![-bound; m], vec![bound; m])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn dual_tokens(&self) -> &Array2<f64> {
        &self.dual_tokens
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Token coefficients `⟨a_i, x⟩`.
    pub fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        self.tokens.outer_iter().map(|a| dot_view(a, x)).collect()
    }

    fn shift_along_dual(&self, base: &[f64], deltas: &[f64]) -> Vec<f64> {
        let mut out = base.to_vec();
        for (delta, row) in deltas.iter().zip(self.dual_tokens.outer_iter()) {
            if *delta != 0.0 {
                for (o, a) in out.iter_mut().zip(row.iter()) {
                    *o += delta * a;
                }
            }
        }
        out
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let coef = self.coefficients(x);
        let mut deltas = Vec::with_capacity(coef.len());
        for ((z, c), b) in coef.iter().zip(&self.lower).zip(&self.upper) {
            let width = b - c;
            let margin = (z - c).min(b - z);
            if !(margin > BOUNDARY_GUARD * width) {
                return Err(Error::PointOutsideSet { margin });
            }
            deltas.push(tanh_scaler(*z, *c, *b) - z);
        }
        Ok(self.shift_along_dual(x, &deltas))
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let deltas: Vec<f64> = self
            .coefficients(y)
            .iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((w, c), b)| tanh_scaler_inverse(*w, *c, *b) - w)
            .collect();
        self.shift_along_dual(y, &deltas)
    }

    fn hessian(&self, y: &[f64]) -> DualHessian {
        let coef = self.coefficients(y);
        let mut sigma = Vec::with_capacity(coef.len());
        let mut log_one_plus_sigma = Vec::with_capacity(coef.len());
        for ((w, c), b) in coef.iter().zip(&self.lower).zip(&self.upper) {
            let half_width = 0.5 * (b - c);
            let t = w.tanh();
            sigma.push(half_width * (1.0 - t * t) - 1.0);
            // ln(half_width · sech²w), with ln sech w = ln 2 − |w| − ln(1 + e^{−2|w|})
            let a = w.abs();
            let log_sech = std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p();
            log_one_plus_sigma.push(half_width.ln() + 2.0 * log_sech);
        }
        DualHessian::LowRank {
            dim: self.dim(),
            sigma,
            log_one_plus_sigma,
            left: Arc::clone(&self.dual_tokens),
            right: Arc::clone(&self.tokens),
        }
    }

    fn margins(&self, x: &[f64]) -> Vec<f64> {
        self.coefficients(x)
            .iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((z, c), b)| (z - c).min(b - z))
            .collect()
    }
}

/// `s(z) = atanh(2(z − c)/(b − c) − 1)`, evaluated as `½ ln((z − c)/(b − z))`
/// with both relative slacks floored at `ATANH_CLAMP / 2`.
pub fn tanh_scaler(z: f64, c: f64, b: f64) -> f64 {
    let width = b - c;
    let lo = ((z - c) / width).max(0.5 * ATANH_CLAMP);
    let hi = ((b - z) / width).max(0.5 * ATANH_CLAMP);
    0.5 * (lo / hi).ln()
}

/// `s⁻¹(w) = c + (b − c)(1 + tanh w)/2`, written so the slack to the nearer
/// bound is computed without cancellation.
pub fn tanh_scaler_inverse(w: f64, c: f64, b: f64) -> f64 {
    let width = b - c;
    if w >= 0.0 {
        b - width / (1.0 + (2.0 * w).exp())
    } else {
        c + width / (1.0 + (-2.0 * w).exp())
    }
}

/// Scaler induced by the two-sided log-barrier, `−1/(z − c) − 1/(z − b)`.
/// It has no closed-form inverse and is kept for comparison with the tanh form.
pub fn log_barrier_scaler(z: f64, c: f64, b: f64) -> f64 {
    -1.0 / (z - c) - 1.0 / (z - b)
}

/// The unit hypercube `(0, 1)^d`, carried as an orthonormal polytope with `a_i = e_i`.
#[derive(Clone, Debug)]
pub struct HypercubeConstraint {
    dim: usize,
    polytope: PolytopeConstraint,
}

impl PartialEq for HypercubeConstraint {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
    }
}

impl HypercubeConstraint {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConstraint("hypercube dimension must be >= 1".into()));
        }
        let polytope = PolytopeConstraint::new(Array2::eye(dim), vec![0.0; dim], vec![1.0; dim])?;
        Ok(Self { dim, polytope })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_polytope(&self) -> &PolytopeConstraint {
        &self.polytope
    }
}

/// Result of a membership test: strict inclusion plus a signed margin per
/// defining inequality (positive means satisfied).
#[derive(Clone, Debug, PartialEq)]
pub struct Containment {
    pub inside: bool,
    pub margins: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSet {
    Ball(BallConstraint),
    Simplex(SimplexConstraint),
    Polytope(PolytopeConstraint),
    Hypercube(HypercubeConstraint),
}

impl From<BallConstraint> for ConstraintSet {
    fn from(c: BallConstraint) -> Self {
        ConstraintSet::Ball(c)
    }
}

impl From<SimplexConstraint> for ConstraintSet {
    fn from(c: SimplexConstraint) -> Self {
        ConstraintSet::Simplex(c)
    }
}

impl From<PolytopeConstraint> for ConstraintSet {
    fn from(c: PolytopeConstraint) -> Self {
        ConstraintSet::Polytope(c)
    }
}

impl From<HypercubeConstraint> for ConstraintSet {
    fn from(c: HypercubeConstraint) -> Self {
        ConstraintSet::Hypercube(c)
    }
}

impl ConstraintSet {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::Ball(b) => b.dim,
            ConstraintSet::Simplex(s) => s.dim,
            ConstraintSet::Polytope(p) => p.dim(),
            ConstraintSet::Hypercube(h) => h.dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConstraintSet::Ball(_) => "ball",
            ConstraintSet::Simplex(_) => "simplex",
            ConstraintSet::Polytope(_) => "polytope",
            ConstraintSet::Hypercube(_) => "hypercube",
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn check_finite(v: &[f64]) -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteInput)
        }
    }

    /// Mirror map `∇φ(x)`.
    pub fn mirror_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PointOutsideSet { margin: f64::NAN });
        }
        match self {
            ConstraintSet::Ball(ball) => {
                let norm_sq: f64 = x.iter().map(|v| v * v).sum();
                let slack = ball.radius_sq - norm_sq;
                if !(slack > BOUNDARY_GUARD * ball.radius_sq) {
                    return Err(Error::PointOutsideSet { margin: slack });
                }
                let scale = 2.0 * ball.gamma / slack;
                Ok(x.iter().map(|v| scale * v).collect())
            }
            ConstraintSet::Simplex(_) => {
                let min = x.iter().copied().fold(f64::INFINITY, f64::min);
                let last = 1.0 - x.iter().sum::<f64>();
                if !(min > 0.0) {
                    return Err(Error::PointOutsideSet { margin: min });
                }
                if !(last > BOUNDARY_GUARD) {
                    return Err(Error::PointOutsideSet { margin: last });
                }
                let log_last = last.ln();
                Ok(x.iter().map(|v| v.ln() - log_last).collect())
            }
            ConstraintSet::Polytope(p) => p.forward(x),
            ConstraintSet::Hypercube(h) => h.polytope.forward(x),
        }
    }

    /// Inverse mirror map `∇φ*(y)`.
    pub fn mirror_inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        Self::check_finite(y)?;
        Ok(match self {
            ConstraintSet::Ball(ball) => {
                let norm_sq: f64 = y.iter().map(|v| v * v).sum();
                let root = (ball.radius_sq * norm_sq + ball.gamma * ball.gamma).sqrt();
                let scale = ball.radius_sq / (root + ball.gamma);
                y.iter().map(|v| scale * v).collect()
            }
            ConstraintSet::Simplex(_) => {
                let lse = log_one_plus_sum_exp(y);
                y.iter().map(|v| (v - lse).exp()).collect()
            }
            ConstraintSet::Polytope(p) => p.inverse(y),
            ConstraintSet::Hypercube(h) => h.polytope.inverse(y),
        })
    }

    /// Hessian of the dual function, `∇²φ*(y)`, i.e. the Jacobian of `mirror_inverse`.
    pub fn hessian_dual(&self, y: &[f64]) -> Result<DualHessian> {
        self.check_dim(y)?;
        Self::check_finite(y)?;
        Ok(match self {
            ConstraintSet::Ball(ball) => {
                // ∇φ*(y) = g(y) y with g = R / (s + γ), s = √(R‖y‖² + γ²).
                // Differentiating: g (I − R/((s + γ) s) y yᵀ), and
                // 1 − R‖y‖²/((s + γ) s) simplifies to γ/s.
                let r = ball.radius_sq;
                let gamma = ball.gamma;
                let norm_sq: f64 = y.iter().map(|v| v * v).sum();
                let s = (r * norm_sq + gamma * gamma).sqrt();
                DualHessian::Ball {
                    scale: r / (s + gamma),
                    coeff: r / ((s + gamma) * s),
                    v: y.to_vec(),
                    log_det_factor: (gamma / s).ln(),
                }
            }
            ConstraintSet::Simplex(_) => {
                let lse = log_one_plus_sum_exp(y);
                let log_p: Vec<f64> = y.iter().map(|v| v - lse).collect();
                DualHessian::Simplex {
                    p: log_p.iter().map(|l| l.exp()).collect(),
                    log_p,
                    log_p_last: -lse,
                }
            }
            ConstraintSet::Polytope(p) => p.hessian(y),
            ConstraintSet::Hypercube(h) => h.polytope.hessian(y),
        })
    }

    /// `log |det ∇²φ*(y)|` without forming the dense matrix.
    pub fn log_det_hessian_dual(&self, y: &[f64]) -> Result<f64> {
        Ok(self.hessian_dual(y)?.log_det())
    }

    /// Strict membership test with per-inequality margins.
    pub fn contains(&self, x: &[f64]) -> Containment {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return Containment {
                inside: false,
                margins: Vec::new(),
            };
        }
        let margins = match self {
            ConstraintSet::Ball(ball) => {
                vec![ball.radius_sq - x.iter().map(|v| v * v).sum::<f64>()]
            }
            ConstraintSet::Simplex(_) => {
                let mut m = x.to_vec();
                m.push(1.0 - x.iter().sum::<f64>());
                m
            }
            ConstraintSet::Polytope(p) => p.margins(x),
            ConstraintSet::Hypercube(_) => x.iter().map(|v| v.min(1.0 - v)).collect(),
        };
        Containment {
            inside: margins.iter().all(|m| *m > 0.0),
            margins,
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map_rows(x, |row| self.mirror_forward(row))
    }

    pub fn inverse_batch(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map_rows(y, |row| self.mirror_inverse(row))
    }

    fn map_rows<F>(&self, input: ArrayView2<f64>, f: F) -> Result<Array2<f64>>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>>,
    {
        let (n, d) = input.dim();
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d,
            });
        }
        let mut out = Array2::<f64>::zeros((n, d));
        for (src, mut dst) in input.outer_iter().zip(out.outer_iter_mut()) {
            let row = src.to_vec();
            for (o, v) in dst.iter_mut().zip(f(&row)?) {
                *o = v;
            }
        }
        Ok(out)
    }
}

/// `ln(1 + Σ e^{y_i})`, shifted by the largest logit (the implicit zero included).
fn log_one_plus_sum_exp(y: &[f64]) -> f64 {
    let shift = y.iter().copied().fold(0.0_f64, f64::max);
    let sum: f64 = (-shift).exp() + y.iter().map(|v| (v - shift).exp()).sum::<f64>();
    shift + sum.ln()
}

#[cfg(test)]
mod tests;
