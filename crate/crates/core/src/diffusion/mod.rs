//! Dual-space denoising diffusion: schedule, forward marginals, posterior,
//! ε-parameterized reverse mean, ancestral sampler and the variational bound.

mod batch;
mod elbo;
mod sampler;
mod schedule;

pub use batch::{SampleBatch, Space};
pub use elbo::{elbo, elbo_rows, elbo_with, prior_kl, ElboConfig, ElboEstimator, ElboTerms};
pub use sampler::{
    ancestral_sample, regression_target, regression_target_with, EpsModel, RegressionTarget,
    ZeroModel, CHAIN_CHUNK,
};
pub use schedule::{
    make_linear_schedule, mu_from_eps, posterior_params, q_sample, NoiseSchedule, ScheduleSpec,
};
