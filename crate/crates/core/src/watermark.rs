//! Polytope watermarks: secret orthonormal tokens `a_i` with symmetric bound
//! `b`. A sample carries the mark when every coefficient satisfies
//! `|⟨a_i, x⟩| < b`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::SampleBatch;
use crate::error::{Error, Result};
use crate::geometry::{orthonormalize_tokens, PolytopeConstraint};
use crate::io::{read_f64_blob, read_json, write_f64_blob, write_json};
use crate::rng::SeededRng;

pub const KEY_FORMAT_VERSION: u32 = 1;
/// Projection targets `|⟨a_i, x⟩| ≤ b − δ` with `δ = MARGIN_FRACTION · b`.
pub const MARGIN_FRACTION: f64 = 0.01;
/// Coefficients within `TOLERANCE_FRACTION · b` of the target are left alone,
/// which absorbs the rounding left by a previous projection.
pub const TOLERANCE_FRACTION: f64 = 1e-9;
/// Extra projection passes allowed when rounding leaves a coefficient out of band.
const MAX_PASSES: usize = 4;
/// Monte Carlo draws handled per independent stream.
const MC_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    tokens: Array2<f64>,
    bound: f64,
    seed: u64,
}

impl WatermarkKey {
    pub fn from_tokens(tokens: Array2<f64>, bound: f64, seed: u64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidConstraint(format!(
                "watermark bound must be positive, got {bound}"
            )));
        }
        let (m, d) = tokens.dim();
        if m == 0 || m > d {
            return Err(Error::InvalidConstraint(format!(
                "watermark needs 1 <= m <= d tokens, got m={m}, d={d}"
            )));
        }
        if crate::geometry::orthonormality_error(&tokens) > 1e-10 {
            return Err(Error::InvalidConstraint("watermark tokens are not orthonormal".into()));
        }
        Ok(Self {
            tokens,
            bound,
            seed,
        })
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// The polytope `{x : −b < ⟨a_i, x⟩ < b}`.
    pub fn constraint(&self) -> Result<PolytopeConstraint> {
        Ok(PolytopeConstraint::symmetric(self.tokens.clone(), self.bound)?.with_seed(self.seed))
    }

    fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        self.tokens
            .outer_iter()
            .map(|a| a.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Write the manifest to `path` and the tokens to `<stem>.tokens.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "key".into());
        let blob_name = format!("{stem}.tokens.bin");
        let flat: Vec<f64> = self.tokens.iter().copied().collect();
        write_f64_blob(&path.with_file_name(&blob_name), &flat)?;
        write_json(
            path,
            &KeyManifest {
                format_version: KEY_FORMAT_VERSION,
                m: self.n_tokens(),
                d: self.dim(),
                b: self.bound,
                seed: self.seed,
                tokens_file: blob_name,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let man: KeyManifest = read_json(path)?;
        if man.format_version != KEY_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported key format version {}", man.format_version),
            ));
        }
        let blob = path.with_file_name(&man.tokens_file);
        let flat = read_f64_blob(&blob)?;
        if flat.len() != man.m * man.d {
            return Err(Error::format(
                &blob,
                format!("expected {} values, found {}", man.m * man.d, flat.len()),
            ));
        }
        let tokens = Array2::from_shape_vec((man.m, man.d), flat).expect("length checked");
        Self::from_tokens(tokens, man.b, man.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyManifest {
    pub format_version: u32,
    pub m: usize,
    pub d: usize,
    pub b: f64,
    pub seed: u64,
    pub tokens_file: String,
}

/// `m` orthonormalized Gaussian tokens in `R^d` with bound `b`.
pub fn keygen(seed: u64, m: usize, d: usize, b: f64) -> Result<WatermarkKey> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::InvalidConstraint(format!(
            "watermark bound must be positive, got {b}"
        )));
    }
    WatermarkKey::from_tokens(orthonormalize_tokens(seed, m, d)?, b, seed)
}

/// Clamp each token coefficient into `[−(b − δ), b − δ]`, moving `x` only
/// along the token directions. Inputs already inside that range are returned
/// unchanged.
pub fn project(key: &WatermarkKey, x: &[f64]) -> Result<Vec<f64>> {
    key.check(x)?;
    let target = key.bound * (1.0 - MARGIN_FRACTION);
    let band = target + TOLERANCE_FRACTION * key.bound;
    let mut out = x.to_vec();
    for _ in 0..MAX_PASSES {
        let coef = key.coefficients(&out);
        if coef.iter().all(|c| c.abs() <= band) {
            break;
        }
        for (a, c) in key.tokens.outer_iter().zip(&coef) {
            if c.abs() > band {
                let t = c.clamp(-target, target);
                out.iter_mut()
                    .zip(a.iter())
                    .for_each(|(o, ai)| *o = (*o - c * ai) + t * ai);
            }
        }
    }
    Ok(out)
}

pub fn project_batch(key: &WatermarkKey, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = x
        .outer_iter()
        .map(|r| project(key, &r.to_vec()))
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((x.nrows(), x.ncols()), flat).expect("row lengths match"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub detected: bool,
    pub coefficients: Vec<f64>,
    /// `b − |⟨a_i, x⟩|`; positive means token `i` is satisfied.
    pub margins: Vec<f64>,
    pub violated: Vec<usize>,
}

pub fn detect(key: &WatermarkKey, x: &[f64]) -> Result<DetectionResult> {
    key.check(x)?;
    let coefficients = key.coefficients(x);
    let margins: Vec<f64> = coefficients.iter().map(|c| key.bound - c.abs()).collect();
    let violated: Vec<usize> = margins
        .iter()
        .enumerate()
        .filter(|(_, m)| **m <= 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(DetectionResult {
        detected: violated.is_empty(),
        coefficients,
        margins,
        violated,
    })
}

/// Probability that `x ~ N(0, I)` carries the mark by chance: `(2Φ(b) − 1)^m`.
pub fn analytic_fp_rate(m: usize, b: f64) -> f64 {
    let phi = Normal::standard();
    // 2Φ(b) − 1 = 1 − 2Φ(−b), evaluated through the tail for accuracy
    (1.0 - 2.0 * phi.cdf(-b)).powi(m as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpRate {
    pub analytic: f64,
    pub monte_carlo: f64,
    /// Binomial standard error `sqrt(p (1 − p) / n)` at the analytic rate.
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl FpRate {
    /// `|monte_carlo − analytic|` in units of `stderr`.
    pub fn z_score(&self) -> f64 {
        let diff = (self.monte_carlo - self.analytic).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.stderr
        }
    }
}

/// Analytic false-positive rate against a Monte Carlo estimate from `n`
/// standard Gaussian draws in `R^d`.
pub fn fp_rate_gaussian(key: &WatermarkKey, n: usize, seed: u64) -> Result<FpRate> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = key.dim();
    let starts: Vec<usize> = (0..n).step_by(MC_CHUNK).collect();
    let hits: usize = starts
        .par_iter()
        .map(|&start| {
            let mut rng = SeededRng::stream(seed, (start / MC_CHUNK) as u64);
            let mut x = vec![0.0; d];
            let mut hits = 0;
            for _ in start..(start + MC_CHUNK).min(n) {
                rng.fill_normal(&mut x);
                let inside = key.tokens.outer_iter().all(|a| {
                    let c: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
                    c.abs() < key.bound
                });
                hits += inside as usize;
            }
            hits
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let analytic = analytic_fp_rate(key.n_tokens(), key.bound);
    Ok(FpRate {
        analytic,
        monte_carlo: hits as f64 / n as f64,
        stderr: (analytic * (1.0 - analytic) / n as f64).sqrt(),
        n,
        seed,
    })
}

/// Percentage of rows that carry the mark, measured on samples as generated
/// (before any projection).
pub fn precision_estimate(key: &WatermarkKey, samples: &SampleBatch) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for row in samples.data().outer_iter() {
        hits += detect(key, &row.to_vec())?.detected as usize;
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}
