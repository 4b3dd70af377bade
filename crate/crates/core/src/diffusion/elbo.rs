//! Variational bound on the primal negative log-likelihood.
//!
//! With `y_0 = ∇φ(x)`, the change of variables gives
//! `−log p(x) ≤ log|det ∇²φ*(y_0)| + L̃(y_0)`, where `L̃` is the usual DDPM
//! bound in the dual space:
//!
//! ```text
//! L̃ = KL(q(y_T|y_0) ‖ N(0, I))
//!   + Σ_{t=2..T} ‖μ̃_t(y_t, y_0) − μ_θ(y_t, t)‖² / (2 β̃_t)
//!   + d/2 · ln(2π β_1) + ‖y_0 − μ_θ(y_1, 1)‖² / (2 β_1)
//! ```
//!
//! Values are in nats; lower is better.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::EpsModel;
use super::schedule::{mu_coefficients, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;
use crate::rng::SeededRng;

/// How the `y_t` in the expectation are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboEstimator {
    /// One forward chain `y_1, …, y_T` per Monte Carlo draw.
    #[default]
    ForwardChain,
    /// Each `y_t` drawn from `q(y_t | y_0)` independently.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub n_mc: usize,
    pub estimator: ElboEstimator,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            n_mc: 1,
            estimator: ElboEstimator::ForwardChain,
        }
    }
}

/// Components of the bound; `total` is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub log_det_hessian: f64,
    pub prior_kl: f64,
    pub diffusion_kl: f64,
    pub decoder_nll: f64,
    pub total: f64,
}

impl ElboTerms {
    fn new(log_det_hessian: f64, prior_kl: f64, diffusion_kl: f64, decoder_nll: f64) -> Self {
        Self {
            log_det_hessian,
            prior_kl,
            diffusion_kl,
            decoder_nll,
            total: log_det_hessian + prior_kl + diffusion_kl + decoder_nll,
        }
    }
}

/// Bound for one primal point with the default single-chain estimator.
pub fn elbo(
    x: &[f64],
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    constraint: &ConstraintSet,
    n_mc: usize,
    seed: u64,
) -> Result<ElboTerms> {
    let config = ElboConfig {
        n_mc,
        ..ElboConfig::default()
    };
    elbo_with(x, model, schedule, constraint, &config, seed, 0)
}

/// Bound for one primal point; draw `r` uses stream `index · n_mc + r`.
pub fn elbo_with(
    x: &[f64],
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    constraint: &ConstraintSet,
    config: &ElboConfig,
    seed: u64,
    index: u64,
) -> Result<ElboTerms> {
    if config.n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
    }
    if model.dim() != constraint.dim() {
        return Err(Error::DimensionMismatch {
            expected: constraint.dim(),
            got: model.dim(),
        });
    }
    let y0 = constraint.mirror_forward(x)?;
    let log_det = constraint.log_det_hessian_dual(&y0)?;
    let prior = prior_kl(schedule, &y0);

    let mut diffusion = 0.0;
    let mut decoder = 0.0;
    for r in 0..config.n_mc {
        let mut rng = SeededRng::stream(seed, index * config.n_mc as u64 + r as u64);
        let (kl, dec) = dual_terms(model, schedule, &y0, config.estimator, &mut rng)?;
        diffusion += kl;
        decoder += dec;
    }
    let n = config.n_mc as f64;
    let terms = ElboTerms::new(log_det, prior, diffusion / n, decoder / n);
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteElbo { t: 0 });
    }
    Ok(terms)
}

/// Bound for each row of `x`; row `i` uses its own streams under `seed`.
pub fn elbo_rows(
    x: &Array2<f64>,
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    constraint: &ConstraintSet,
    config: &ElboConfig,
    seed: u64,
) -> Vec<Result<ElboTerms>> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            elbo_with(
                &x.row(i).to_vec(),
                model,
                schedule,
                constraint,
                config,
                seed,
                i as u64,
            )
        })
        .collect()
}

/// `KL(N(√ᾱ_T y_0, (1 − ᾱ_T) I) ‖ N(0, I))`.
pub fn prior_kl(schedule: &NoiseSchedule, y0: &[f64]) -> f64 {
    let ab = schedule.alpha_bar(schedule.steps());
    let var = schedule.one_minus_alpha_bar(schedule.steps());
    y0.iter()
        .map(|v| 0.5 * (var + ab * v * v - 1.0 - var.ln()))
        .sum()
}

fn dual_terms(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    y0: &[f64],
    estimator: ElboEstimator,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let steps = schedule.steps();
    let d = y0.len();
    // row t−1 holds y_t
    let mut ys = Array2::zeros((steps, d));
    match estimator {
        ElboEstimator::ForwardChain => {
            let mut prev = y0.to_vec();
            for t in 1..=steps {
                let beta = schedule.beta(t);
                let (a, s) = ((1.0 - beta).sqrt(), beta.sqrt());
                for (k, p) in prev.iter_mut().enumerate() {
                    *p = a * *p + s * rng.normal();
                    ys[[t - 1, k]] = *p;
                }
            }
        }
        ElboEstimator::Independent => {
            for t in 1..=steps {
                let ab = schedule.alpha_bar(t);
                let s = schedule.one_minus_alpha_bar(t).sqrt();
                let a = ab.sqrt();
                for (k, v) in y0.iter().enumerate() {
                    ys[[t - 1, k]] = a * v + s * rng.normal();
                }
            }
        }
    }
    let t_index: Vec<usize> = (1..=steps).collect();
    let eps_hat = model.predict(ys.view(), &t_index)?;
    if eps_hat.dim() != (steps, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: eps_hat.ncols(),
        });
    }

    let mut kl = 0.0;
    let mut decoder = 0.0;
    for t in 1..=steps {
        let y_t = ys.row(t - 1);
        let e = eps_hat.row(t - 1);
        let (k_eps, k_out) = mu_coefficients(schedule, t);
        if t == 1 {
            let beta = schedule.beta(1);
            let sq: f64 = y0
                .iter()
                .zip(y_t.iter().zip(e.iter()))
                .map(|(target, (y, ev))| (target - k_out * (y - k_eps * ev)).powi(2))
                .sum();
            decoder = 0.5 * d as f64 * (std::f64::consts::TAU * beta).ln() + sq / (2.0 * beta);
            if !decoder.is_finite() {
                return Err(Error::NonFiniteElbo { t });
            }
            continue;
        }
        let bt = schedule.beta_tilde(t);
        if !(bt > 0.0) {
            return Err(Error::NonFiniteElbo { t });
        }
        let (c0, ct) = schedule.posterior_coefficients(t);
        let sq: f64 = y0
            .iter()
            .zip(y_t.iter().zip(e.iter()))
            .map(|(y0v, (y, ev))| {
                let mu_tilde = c0 * y0v + ct * y;
                let mu_theta = k_out * (y - k_eps * ev);
                (mu_tilde - mu_theta).powi(2)
            })
            .sum();
        let term = sq / (2.0 * bt);
        if !term.is_finite() {
            return Err(Error::NonFiniteElbo { t });
        }
        kl += term;
    }
    Ok((kl, decoder))
}
