use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linearly spaced `β_1..β_T` with cumulative products `ᾱ_0..ᾱ_T`.
///
/// Steps are 1-based; `ᾱ_0 = 1` so that the first posterior is well defined.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `1 − ᾱ_t` via `−expm1(Σ log1p(−β_s))`, accurate when `ᾱ_t` is near 1.
    one_minus_alpha_bars: Vec<f64>,
    beta_min: f64,
    beta_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: String,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: "linear".into(),
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.kind != "linear" {
            return Err(Error::InvalidSchedule(format!(
                "unknown schedule kind {:?}",
                self.kind
            )));
        }
        make_linear_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    let mut one_minus_alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    one_minus_alpha_bars.push(0.0);
    let mut acc = 1.0;
    let mut log_acc = 0.0;
    for b in &betas {
        acc *= 1.0 - b;
        log_acc += (-b).ln_1p();
        alpha_bars.push(acc);
        one_minus_alpha_bars.push(-log_acc.exp_m1());
    }
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        one_minus_alpha_bars,
        beta_min,
        beta_max,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleSpec::default().build().expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: "linear".into(),
            steps: self.steps(),
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_0..ᾱ_T`, length `T + 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bars[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) β_t / (1 − ᾱ_t)`; zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.one_minus_alpha_bars[t - 1] * self.betas[t - 1] / self.one_minus_alpha_bars[t]
    }

    /// Coefficients `(on y_0, on y_t)` of the posterior mean `μ̃_t`.
    /// At `t = 1` these are exactly `(1, 0)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        if t == 1 {
            return (1.0, 0.0);
        }
        let beta = self.betas[t - 1];
        let om = self.one_minus_alpha_bars[t];
        (
            self.alpha_bars[t - 1].sqrt() * beta / om,
            (1.0 - beta).sqrt() * self.one_minus_alpha_bars[t - 1] / om,
        )
    }
}

/// `y_t = √ᾱ_t y_0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(schedule: &NoiseSchedule, y0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_len(y0.len(), eps.len())?;
    let (a, s) = (
        schedule.alpha_bar(t).sqrt(),
        schedule.one_minus_alpha_bar(t).sqrt(),
    );
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + s * e).collect())
}

/// Mean and variance of `q(y_{t−1} | y_t, y_0)`.
pub fn posterior_params(
    schedule: &NoiseSchedule,
    y_t: &[f64],
    y0: &[f64],
    t: usize,
) -> Result<(Vec<f64>, f64)> {
    schedule.check_step(t)?;
    check_len(y0.len(), y_t.len())?;
    let (c0, ct) = schedule.posterior_coefficients(t);
    let mu = y0.iter().zip(y_t).map(|(a, b)| c0 * a + ct * b).collect();
    Ok((mu, schedule.beta_tilde(t)))
}

/// Reverse mean `μ_θ = (y_t − β_t / √(1 − ᾱ_t) · ε̂) / √(1 − β_t)`.
pub fn mu_from_eps(
    schedule: &NoiseSchedule,
    y_t: &[f64],
    t: usize,
    eps_hat: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_len(y_t.len(), eps_hat.len())?;
    let (k_eps, k_out) = mu_coefficients(schedule, t);
    Ok(y_t
        .iter()
        .zip(eps_hat)
        .map(|(y, e)| k_out * (y - k_eps * e))
        .collect())
}

/// `(β_t / √(1 − ᾱ_t), 1 / √(1 − β_t))`.
pub(crate) fn mu_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let beta = schedule.beta(t);
    (
        beta / schedule.one_minus_alpha_bar(t).sqrt(),
        1.0 / (1.0 - beta).sqrt(),
    )
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}
