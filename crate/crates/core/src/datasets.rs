//! Seeded synthetic datasets on each constraint set.
//!
//! Every generator accepts a row only if `contains` reports it strictly
//! inside, boundary guard included, so outputs are valid `mirror_forward`
//! inputs.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::SampleBatch;
use crate::error::{Error, Result};
use crate::geometry::{BallConstraint, ConstraintSet, HypercubeConstraint, SimplexConstraint};
use crate::rng::SeededRng;

/// Minimum tolerated acceptance rate for rejection sampling.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
/// Attempts made before the acceptance rate is judged.
pub const BUDGET_WINDOW: usize = 100_000;

/// Components of the planar mixture sit on this circle (unit ball scale).
pub const GMM_2D_RADIUS: f64 = 0.6;
pub const GMM_2D_COMPONENTS: usize = 8;
/// Higher-dimensional ball mixtures center component `i` at this multiple of `e_i`.
pub const GMM_CORNER_SCALE: f64 = 0.7;
/// Spiral turns through `[0, SPIRAL_THETA_MAX]` out to radius `SPIRAL_RADIUS`.
pub const SPIRAL_THETA_MAX: f64 = 4.0 * PI;
pub const SPIRAL_RADIUS: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    #[default]
    Reject,
    Reflect,
}

fn default_gmm_variance() -> f64 {
    0.05
}

fn default_corner_variance() -> f64 {
    0.2
}

fn default_spiral_sigma() -> f64 {
    0.02
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    GmmBall {
        dim: usize,
        #[serde(default = "default_gmm_variance")]
        variance: f64,
        #[serde(default = "one")]
        radius_sq: f64,
    },
    SpiralBall {
        #[serde(default = "default_spiral_sigma")]
        sigma: f64,
    },
    Dirichlet {
        alpha: Vec<f64>,
    },
    HypercubeCorners {
        dim: usize,
        #[serde(default = "default_corner_variance")]
        variance: f64,
        #[serde(default)]
        mode: BoundaryMode,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidDataset(m));
        if self.n_samples == 0 {
            return fail("n_samples must be at least 1".into());
        }
        match &self.kind {
            DatasetKind::GmmBall {
                dim,
                variance,
                radius_sq,
            } => {
                if *dim < 2 {
                    return fail(format!("gmm_ball needs dim >= 2, got {dim}"));
                }
                if !(*variance >= 0.0 && variance.is_finite()) {
                    return fail(format!("variance must be non-negative, got {variance}"));
                }
                if !(*radius_sq > 0.0 && radius_sq.is_finite()) {
                    return fail(format!("radius_sq must be positive, got {radius_sq}"));
                }
            }
            DatasetKind::SpiralBall { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return fail(format!("sigma must be non-negative, got {sigma}"));
                }
            }
            DatasetKind::Dirichlet { alpha } => {
                if alpha.len() < 2 {
                    return fail("dirichlet needs at least two concentrations".into());
                }
                if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                    return fail(format!("concentrations must be positive, got {a}"));
                }
            }
            DatasetKind::HypercubeCorners { dim, variance, .. } => {
                if *dim < 2 {
                    return fail(format!("hypercube_corners needs dim >= 2, got {dim}"));
                }
                if !(*variance >= 0.0 && variance.is_finite()) {
                    return fail(format!("variance must be non-negative, got {variance}"));
                }
            }
        }
        Ok(())
    }

    /// Dimension of the generated rows (reduced coordinates for the simplex).
    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::GmmBall { dim, .. } | DatasetKind::HypercubeCorners { dim, .. } => *dim,
            DatasetKind::SpiralBall { .. } => 2,
            DatasetKind::Dirichlet { alpha } => alpha.len() - 1,
        }
    }

    /// The constraint set the dataset lives in.
    pub fn constraint(&self) -> Result<ConstraintSet> {
        self.validate()?;
        Ok(match &self.kind {
            DatasetKind::GmmBall { dim, radius_sq, .. } => {
                BallConstraint::new(*dim, *radius_sq, 1.0)?.into()
            }
            DatasetKind::SpiralBall { .. } => BallConstraint::unit(2)?.into(),
            DatasetKind::Dirichlet { alpha } => SimplexConstraint::new(alpha.len() - 1)?.into(),
            DatasetKind::HypercubeCorners { dim, .. } => HypercubeConstraint::new(*dim)?.into(),
        })
    }
}

/// Generate the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<SampleBatch> {
    spec.validate()?;
    let (n, seed) = (spec.n_samples, spec.seed);
    match &spec.kind {
        DatasetKind::GmmBall {
            dim,
            variance,
            radius_sq,
        } => gmm_ball_labeled(*dim, n, seed, *variance, *radius_sq).map(|(b, _)| b),
        DatasetKind::SpiralBall { sigma } => spiral_ball_with(n, seed, *sigma),
        DatasetKind::Dirichlet { alpha } => dirichlet(alpha, n, seed),
        DatasetKind::HypercubeCorners {
            dim,
            variance,
            mode,
        } => hypercube_corners(*dim, n, seed, *variance, *mode),
    }
}

/// Accept-reject loop with the acceptance budget check.
fn rejection_fill<F>(
    constraint: &ConstraintSet,
    n: usize,
    mut draw: F,
) -> Result<(Array2<f64>, Vec<usize>)>
where
    F: FnMut(&mut [f64]) -> usize,
{
    let d = constraint.dim();
    let mut out = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    let mut attempts = 0usize;
    while labels.len() < n {
        attempts += 1;
        let label = draw(&mut row);
        if constraint.contains(&row).inside {
            out.row_mut(labels.len())
                .iter_mut()
                .zip(&row)
                .for_each(|(o, v)| *o = *v);
            labels.push(label);
        }
        if attempts >= BUDGET_WINDOW && (labels.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
            return Err(Error::RejectionBudgetExceeded {
                accepted: labels.len(),
                attempts,
            });
        }
    }
    Ok((out, labels))
}

/// Mixture component centers for the ball dataset.
pub fn gmm_ball_centers(d: usize, radius_sq: f64) -> Vec<Vec<f64>> {
    let scale = radius_sq.sqrt();
    if d == 2 {
        (0..GMM_2D_COMPONENTS)
            .map(|k| {
                let a = TAU * k as f64 / GMM_2D_COMPONENTS as f64;
                vec![scale * GMM_2D_RADIUS * a.cos(), scale * GMM_2D_RADIUS * a.sin()]
            })
            .collect()
    } else {
        (0..d)
            .map(|i| {
                let mut c = vec![0.0; d];
                c[i] = scale * GMM_CORNER_SCALE;
                c
            })
            .collect()
    }
}

/// Isotropic Gaussian mixture rejected to the ball `‖x‖² < radius_sq`.
pub fn gmm_ball(d: usize, n: usize, seed: u64, variance: f64, radius_sq: f64) -> Result<SampleBatch> {
    gmm_ball_labeled(d, n, seed, variance, radius_sq).map(|(b, _)| b)
}

/// As [`gmm_ball`], also returning the component index of each row.
pub fn gmm_ball_labeled(
    d: usize,
    n: usize,
    seed: u64,
    variance: f64,
    radius_sq: f64,
) -> Result<(SampleBatch, Vec<usize>)> {
    if d < 2 {
        return Err(Error::InvalidDataset(format!("gmm_ball needs dim >= 2, got {d}")));
    }
    let constraint = Arc::new(ConstraintSet::from(BallConstraint::new(d, radius_sq, 1.0)?));
    let centers = gmm_ball_centers(d, radius_sq);
    let std = variance.sqrt();
    let mut rng = SeededRng::new(seed);
    let (data, labels) = rejection_fill(&constraint, n, |row| {
        let k = rng.below(centers.len() as u64) as usize;
        for (v, c) in row.iter_mut().zip(&centers[k]) {
            *v = c + std * rng.normal();
        }
        k
    })?;
    Ok((SampleBatch::primal(data, constraint)?, labels))
}

/// Point of the spiral at angle `theta`.
pub fn spiral_point(theta: f64) -> [f64; 2] {
    let r = SPIRAL_RADIUS * theta / SPIRAL_THETA_MAX;
    [r * theta.cos(), r * theta.sin()]
}

/// Archimedean spiral with jitter `σ = 0.02`, rejected to the unit disc.
pub fn spiral_ball(n: usize, seed: u64) -> Result<SampleBatch> {
    spiral_ball_with(n, seed, default_spiral_sigma())
}

pub fn spiral_ball_with(n: usize, seed: u64, sigma: f64) -> Result<SampleBatch> {
    let constraint = Arc::new(ConstraintSet::from(BallConstraint::unit(2)?));
    let mut rng = SeededRng::new(seed);
    let (data, _) = rejection_fill(&constraint, n, |row| {
        let p = spiral_point(SPIRAL_THETA_MAX * rng.uniform());
        row[0] = p[0] + sigma * rng.normal();
        row[1] = p[1] + sigma * rng.normal();
        0
    })?;
    SampleBatch::primal(data, constraint)
}

/// `Dir(alpha)` by normalized Gammas, returned in reduced coordinates
/// (the first `alpha.len() − 1` weights).
pub fn dirichlet(alpha: &[f64], n: usize, seed: u64) -> Result<SampleBatch> {
    if alpha.len() < 2 {
        return Err(Error::InvalidDataset(
            "dirichlet needs at least two concentrations".into(),
        ));
    }
    if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidDataset("concentrations must be positive".into()));
    }
    let constraint = Arc::new(ConstraintSet::from(SimplexConstraint::new(alpha.len() - 1)?));
    let mut rng = SeededRng::new(seed);
    let mut g = vec![0.0; alpha.len()];
    let (data, _) = rejection_fill(&constraint, n, |row| {
        for (gi, a) in g.iter_mut().zip(alpha) {
            *gi = rng.gamma(*a);
        }
        let total: f64 = g.iter().sum();
        for (v, gi) in row.iter_mut().zip(&g) {
            *v = gi / total;
        }
        0
    })?;
    SampleBatch::primal(data, constraint)
}

/// Triangle wave folding `ℝ` onto `[0, 1]` by reflecting about 0 and 1.
pub fn fold_unit(z: f64) -> f64 {
    let r = z.abs() % 2.0;
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

/// `d` Gaussians centered at the corners `e_i` of the unit cube.
pub fn hypercube_corners(
    d: usize,
    n: usize,
    seed: u64,
    variance: f64,
    mode: BoundaryMode,
) -> Result<SampleBatch> {
    if d < 2 {
        return Err(Error::InvalidDataset(format!(
            "hypercube_corners needs dim >= 2, got {d}"
        )));
    }
    let constraint = Arc::new(ConstraintSet::from(HypercubeConstraint::new(d)?));
    let std = variance.sqrt();
    let mut rng = SeededRng::new(seed);
    let (data, _) = rejection_fill(&constraint, n, |row| {
        let k = rng.below(d as u64) as usize;
        for (i, v) in row.iter_mut().enumerate() {
            let center = if i == k { 1.0 } else { 0.0 };
            let z = center + std * rng.normal();
            *v = match mode {
                BoundaryMode::Reject => z,
                BoundaryMode::Reflect => fold_unit(z),
            };
        }
        k
    })?;
    SampleBatch::primal(data, constraint)
}
