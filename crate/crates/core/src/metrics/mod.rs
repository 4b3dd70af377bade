//! Sample-quality metrics and the trial-averaged report.

mod mmd;
mod ot;
mod sliced;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;

pub use mmd::{median_heuristic, mmd_rbf, mmd_squared, DEFAULT_BANDWIDTH_SCALES};
pub use ot::{
    min_cost_assignment, wasserstein1, wasserstein1_exact, SinkhornConfig, W1Estimate,
    MAX_EXACT_SIZE,
};
pub use sliced::{
    projection_directions, sliced_wasserstein, sliced_wasserstein_projections, wasserstein_1d_sq,
};

/// Percentage of rows that fail `contains`; non-finite rows count as failures.
pub fn violation_rate(constraint: &ConstraintSet, x: ArrayView2<f64>) -> Result<f64> {
    if x.ncols() != constraint.dim() {
        return Err(Error::DimensionMismatch {
            expected: constraint.dim(),
            got: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let failed = x
        .outer_iter()
        .filter(|r| {
            let r = r.to_vec();
            r.iter().any(|v| !v.is_finite()) || !constraint.contains(&r).inside
        })
        .count();
    Ok(100.0 * failed as f64 / x.nrows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub n_projections: usize,
    /// Order of the per-direction Wasserstein distance in the sliced metric.
    pub sliced_order: u32,
    pub sinkhorn: SinkhornConfig,
    /// Skip the quadratic-cost W1 estimate when false.
    pub wasserstein1: bool,
    pub bandwidth_scales: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n_projections: 100,
            sliced_order: 2,
            sinkhorn: SinkhornConfig::default(),
            wasserstein1: true,
            bandwidth_scales: DEFAULT_BANDWIDTH_SCALES.to_vec(),
        }
    }
}

/// Metrics of one generated-vs-reference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub seed: u64,
    pub sliced_wasserstein: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wasserstein1: Option<W1Estimate>,
    pub mmd: f64,
    /// Violation percentage of the generated sample; absent without a constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation_rate: Option<f64>,
}

/// Compare `generated` against `reference`; `seed` drives the projections.
pub fn evaluate_pair(
    generated: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    constraint: Option<&ConstraintSet>,
    config: &MetricConfig,
    seed: u64,
) -> Result<TrialMetrics> {
    if config.sliced_order != 2 {
        return Err(Error::InvalidConfig(
            "only order-2 sliced Wasserstein is implemented".into(),
        ));
    }
    let sw = sliced_wasserstein(generated, reference, config.n_projections, seed)?;
    let w1 = if config.wasserstein1 {
        Some(wasserstein1(generated, reference, &config.sinkhorn)?)
    } else {
        None
    };
    let med = median_heuristic(generated, reference);
    let mmd = if med == 0.0 {
        0.0
    } else {
        let bw: Vec<f64> = config.bandwidth_scales.iter().map(|s| s * med).collect();
        mmd_rbf(generated, reference, Some(&bw))?
    };
    let violation_rate = constraint
        .map(|c| violation_rate(c, generated))
        .transpose()?;
    Ok(TrialMetrics {
        seed,
        sliced_wasserstein: sw,
        wasserstein1: w1,
        mmd,
        violation_rate,
    })
}

/// Mean and population standard deviation across trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn new(metric: &str, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            metric: metric.into(),
            values,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub n_trials: usize,
    pub seeds: Vec<u64>,
    pub summaries: Vec<MetricSummary>,
    pub trials: Vec<TrialMetrics>,
    pub config: MetricConfig,
}

impl MetricReport {
    pub fn from_trials(trials: Vec<TrialMetrics>, n_samples: usize, config: MetricConfig) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::InvalidConfig("a report needs at least one trial".into()));
        }
        let mut summaries = vec![
            MetricSummary::new(
                "sliced_wasserstein",
                trials.iter().map(|t| t.sliced_wasserstein).collect(),
            ),
            MetricSummary::new("mmd", trials.iter().map(|t| t.mmd).collect()),
        ];
        if trials.iter().all(|t| t.wasserstein1.is_some()) {
            summaries.push(MetricSummary::new(
                "wasserstein1",
                trials
                    .iter()
                    .map(|t| t.wasserstein1.as_ref().map_or(0.0, |w| w.value))
                    .collect(),
            ));
        }
        if trials.iter().all(|t| t.violation_rate.is_some()) {
            summaries.push(MetricSummary::new(
                "violation_rate",
                trials.iter().map(|t| t.violation_rate.unwrap_or(0.0)).collect(),
            ));
        }
        Ok(Self {
            n_samples,
            n_trials: trials.len(),
            seeds: trials.iter().map(|t| t.seed).collect(),
            summaries,
            trials,
            config,
        })
    }

    pub fn summary(&self, metric: &str) -> Option<&MetricSummary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }
}

/// Counts on a `bins × bins` grid over `[lo, hi)` in the first two
/// coordinates; row index is the x-bin. Points outside the range are dropped.
pub fn histogram2d(x: ArrayView2<f64>, bins: usize, lo: [f64; 2], hi: [f64; 2]) -> Result<Array2<u64>> {
    if x.ncols() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: x.ncols(),
        });
    }
    if bins == 0 || !(lo[0] < hi[0] && lo[1] < hi[1]) {
        return Err(Error::InvalidConfig("histogram needs bins >= 1 and lo < hi".into()));
    }
    let mut h = Array2::zeros((bins, bins));
    let bin = |v: f64, k: usize| -> Option<usize> {
        let f = (v - lo[k]) / (hi[k] - lo[k]);
        (0.0..1.0).contains(&f).then(|| ((f * bins as f64) as usize).min(bins - 1))
    };
    for r in x.outer_iter() {
        if let (Some(i), Some(j)) = (bin(r[0], 0), bin(r[1], 1)) {
            h[[i, j]] += 1;
        }
    }
    Ok(h)
}
