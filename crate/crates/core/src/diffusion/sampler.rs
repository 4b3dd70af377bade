use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::batch::SampleBatch;
use super::schedule::{mu_coefficients, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Chains are advanced in fixed-size groups so results do not depend on how
/// the groups are distributed across threads.
pub const CHAIN_CHUNK: usize = 256;

/// A noise predictor `ε_θ(y, t)` evaluated row-wise on a batch.
pub trait EpsModel: Sync {
    fn dim(&self) -> usize;

    /// `t[i]` is the diffusion step of row `i`.
    fn predict(&self, y: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>>;
}

/// Predicts `ε̂ = 0` everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroModel {
    pub dim: usize,
}

impl EpsModel for ZeroModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, y: ArrayView2<f64>, _t: &[usize]) -> Result<Array2<f64>> {
        Ok(Array2::zeros(y.raw_dim()))
    }
}

/// Draw `n` dual samples by running the reverse chain from `y_T ~ N(0, I)`.
///
/// Chain `i` draws all of its noise from stream `i` under `seed`. The last
/// transition returns the mean without noise.
pub fn ancestral_sample(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let d = model.dim();
    let starts: Vec<usize> = (0..n).step_by(CHAIN_CHUNK).collect();
    let chunks: Vec<Result<Array2<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let len = CHAIN_CHUNK.min(n - start);
            run_chains(model, schedule, d, start, len, seed)
        })
        .collect();
    let mut out = Array2::zeros((n, d));
    for (start, chunk) in starts.iter().zip(chunks) {
        let chunk = chunk?;
        out.slice_mut(ndarray::s![*start..*start + chunk.nrows(), ..])
            .assign(&chunk);
    }
    Ok(SampleBatch::dual(out))
}

fn run_chains(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    d: usize,
    start: usize,
    len: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rngs: Vec<SeededRng> = (start..start + len)
        .map(|i| SeededRng::stream(seed, i as u64))
        .collect();
    let mut y = Array2::zeros((len, d));
    for (mut row, rng) in y.outer_iter_mut().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.normal();
        }
    }
    for t in (1..=schedule.steps()).rev() {
        let steps = vec![t; len];
        let eps_hat = model.predict(y.view(), &steps)?;
        if eps_hat.dim() != (len, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: eps_hat.ncols(),
            });
        }
        let (k_eps, k_out) = mu_coefficients(schedule, t);
        let sigma = schedule.beta_tilde(t).sqrt();
        for ((mut row, e), rng) in y
            .outer_iter_mut()
            .zip(eps_hat.outer_iter())
            .zip(rngs.iter_mut())
        {
            for (v, ev) in row.iter_mut().zip(e.iter()) {
                *v = k_out * (*v - k_eps * ev);
                if t > 1 {
                    *v += sigma * rng.normal();
                }
            }
        }
    }
    Ok(y)
}

/// Inputs and targets for one step of ε-regression.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTarget {
    pub t: Vec<usize>,
    pub y_t: Array2<f64>,
    pub eps: Array2<f64>,
}

/// `t ~ U{1..T}`, `ε ~ N(0, I)`, `y_t = √ᾱ_t y_0 + √(1 − ᾱ_t) ε` per row.
pub fn regression_target(
    schedule: &NoiseSchedule,
    y0: ArrayView2<f64>,
    seed: u64,
) -> RegressionTarget {
    regression_target_with(schedule, y0, &mut SeededRng::new(seed))
}

pub fn regression_target_with(
    schedule: &NoiseSchedule,
    y0: ArrayView2<f64>,
    rng: &mut SeededRng,
) -> RegressionTarget {
    let (n, d) = y0.dim();
    let mut t = Vec::with_capacity(n);
    let mut y_t = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    for (i, row) in y0.axis_iter(Axis(0)).enumerate() {
        let step = 1 + rng.below(schedule.steps() as u64) as usize;
        let a = schedule.alpha_bar(step).sqrt();
        let s = schedule.one_minus_alpha_bar(step).sqrt();
        for (k, v) in row.iter().enumerate() {
            let e = rng.normal();
            eps[[i, k]] = e;
            y_t[[i, k]] = a * v + s * e;
        }
        t.push(step);
    }
    RegressionTarget { t, y_t, eps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_linear_schedule;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn single_step_zero_model_is_scaled_prior() {
        let s = make_linear_schedule(1, 0.2, 0.2).unwrap();
        let n = 20_000;
        let batch = ancestral_sample(&ZeroModel { dim: 2 }, &s, n, 3).unwrap();
        // y_0 = y_1 / √(1 − β_1)
        let mut prior = SeededRng::stream(3, 0);
        let first = prior.normal() / 0.8_f64.sqrt();
        assert_eq!(batch.data()[[0, 0]], first);
        let var = batch.data().iter().map(|v| v * v).sum::<f64>() / (2 * n) as f64;
        let want = 1.0 / 0.8;
        assert!((var - want).abs() < 4.0 * want * (1.0 / n as f64).sqrt());
    }

    #[test]
    fn empty_request_gives_empty_batch() {
        let s = make_linear_schedule(5, 0.1, 0.2).unwrap();
        let b = ancestral_sample(&ZeroModel { dim: 3 }, &s, 0, 1).unwrap();
        assert_eq!(b.data().dim(), (0, 3));
    }

    #[test]
    fn sampling_is_deterministic_and_chunk_independent() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let m = ZeroModel { dim: 2 };
        let a = ancestral_sample(&m, &s, 600, 9).unwrap();
        let b = ancestral_sample(&m, &s, 600, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| ancestral_sample(&m, &s, 600, 9).unwrap());
        assert_eq!(a.data(), c.data());
        // chain i depends only on its own stream
        let short = ancestral_sample(&m, &s, 300, 9).unwrap();
        assert_eq!(
            a.data().slice(ndarray::s![..300, ..]),
            short.data().view()
        );
    }

    struct WrongDim;
    impl EpsModel for WrongDim {
        fn dim(&self) -> usize {
            2
        }
        fn predict(&self, y: ArrayView2<f64>, _t: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::zeros((y.nrows(), 3)))
        }
    }

    #[test]
    fn model_shape_is_checked() {
        let s = make_linear_schedule(3, 0.1, 0.2).unwrap();
        assert!(matches!(
            ancestral_sample(&WrongDim, &s, 4, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn regression_target_properties() {
        let s = make_linear_schedule(1, 0.3, 0.3).unwrap();
        let y0 = Array2::from_elem((1, 2), 0.5);
        assert_eq!(regression_target(&s, y0.view(), 4).t, vec![1]);

        let s = NoiseSchedule::default();
        let y0 = Array2::from_shape_fn((50, 3), |(i, j)| (i as f64) * 0.1 - j as f64);
        let a = regression_target(&s, y0.view(), 11);
        let b = regression_target(&s, y0.view(), 11);
        assert_eq!(a, b);
        for i in 0..50 {
            let ab = s.alpha_bar(a.t[i]);
            let om = s.one_minus_alpha_bar(a.t[i]);
            for k in 0..3 {
                let want = ab.sqrt() * y0[[i, k]] + om.sqrt() * a.eps[[i, k]];
                assert_eq!(a.y_t[[i, k]], want);
            }
        }
    }

    #[test]
    fn timestep_histogram_is_uniform() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let y0 = Array2::zeros((100_000, 1));
        let target = regression_target(&s, y0.view(), 12);
        let mut counts = [0usize; 20];
        for t in target.t {
            counts[t - 1] += 1;
        }
        let expected = 100_000.0 / 20.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let crit = ChiSquared::new(19.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }
}
