use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mlp::loss_and_grad_target;
use super::{Architecture, NetworkParams};
use crate::diffusion::{regression_target_with, NoiseSchedule, SampleBatch, Space};
use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;
use crate::rng::SeededRng;

/// Stream reserved for parameter initialization; step `s` uses stream `s`.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub ema_decay: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` steps.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            n_steps: 50_000,
            ema_decay: 0.99,
            lr_decay: 0.99,
            lr_decay_every: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail("ema_decay must lie in (0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.lr_decay_every == 0 || self.log_every == 0 {
            return fail("lr_decay_every and log_every must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect for the step that follows `completed` steps.
    pub fn lr_at(&self, completed: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((completed / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// AdamW first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// `ema ← decay · ema + (1 − decay) · params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Single-writer training state: parameters, EMA, AdamW moments, step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    data: Array2<f64>,
    params: NetworkParams,
    ema: NetworkParams,
    optimizer: OptimizerState,
    step: usize,
    trace: Vec<LossRecord>,
}

impl Trainer {
    /// Fresh state for dual-space training data.
    pub fn new(
        arch: Architecture,
        config: TrainConfig,
        schedule: NoiseSchedule,
        data: Array2<f64>,
    ) -> Result<Self> {
        let params = NetworkParams::init(arch, init_seed(config.seed))?;
        let ema = params.clone();
        let optimizer = OptimizerState::zeros(params.len());
        Self::resume(config, schedule, data, params, ema, optimizer, 0)
    }

    /// Continue from a saved state.
    pub fn resume(
        config: TrainConfig,
        schedule: NoiseSchedule,
        data: Array2<f64>,
        params: NetworkParams,
        ema: NetworkParams,
        optimizer: OptimizerState,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        if data.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if data.ncols() != params.architecture().input_dim {
            return Err(Error::DimensionMismatch {
                expected: params.architecture().input_dim,
                got: data.ncols(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if ema.len() != params.len() || optimizer.m.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: ema.len(),
            });
        }
        Ok(Self {
            config,
            schedule,
            data,
            params,
            ema,
            optimizer,
            step,
            trace: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn ema(&self) -> &NetworkParams {
        &self.ema
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Loss records produced since construction.
    pub fn trace(&self) -> &[LossRecord] {
        &self.trace
    }

    /// One AdamW step on a minibatch drawn from stream `step`.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng = SeededRng::stream(self.config.seed, self.step as u64);
        let n = self.data.nrows() as u64;
        let rows: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng.below(n) as usize)
            .collect();
        let batch = self.data.select(ndarray::Axis(0), &rows);
        let target = regression_target_with(&self.schedule, batch.view(), &mut rng);
        let (loss, grad) = loss_and_grad_target(&self.params, &target)?;
        if !loss.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "training diverged at step {}",
                self.step
            )));
        }
        let lr = self.config.lr_at(self.step);
        self.adamw(&grad, lr);
        ema_update(
            self.ema.values_mut(),
            self.params.values(),
            self.config.ema_decay,
        );
        self.step += 1;
        if self.step.is_multiple_of(self.config.log_every) || self.step == self.config.n_steps {
            self.trace.push(LossRecord {
                step: self.step,
                loss,
                lr,
            });
        }
        Ok(loss)
    }

    fn adamw(&mut self, grad: &[f64], lr: f64) {
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.adam_beta1.powi(t);
        let bc2 = 1.0 - c.adam_beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        let state = &mut self.optimizer;
        for (((p, g), m), v) in self
            .params
            .values_mut()
            .iter_mut()
            .zip(grad)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *p *= decay;
            *m = c.adam_beta1 * *m + (1.0 - c.adam_beta1) * g;
            *v = c.adam_beta2 * *v + (1.0 - c.adam_beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.adam_eps);
        }
    }

    /// Run `n` more steps, stopping early at `config.n_steps`.
    pub fn run(&mut self, n: usize) -> Result<()> {
        let end = (self.step + n).min(self.config.n_steps.max(self.step));
        while self.step < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        let remaining = self.config.n_steps.saturating_sub(self.step);
        self.run(remaining)
    }
}

/// Parameter-initialization seed derived from the training seed.
pub(crate) fn init_seed(seed: u64) -> u64 {
    SeededRng::stream(seed, INIT_STREAM).next_u64()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub ema: NetworkParams,
    pub optimizer: OptimizerState,
    pub trace: Vec<LossRecord>,
}

/// Push `data` to the dual space once, then run `config.n_steps` of AdamW.
pub fn train(
    arch: Architecture,
    config: TrainConfig,
    data: &SampleBatch,
    constraint: &ConstraintSet,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    if data.space() != Space::Primal {
        return Err(Error::InvalidDataset("training data must be primal".into()));
    }
    if data.dim() != constraint.dim() || arch.input_dim != constraint.dim() {
        return Err(Error::DimensionMismatch {
            expected: constraint.dim(),
            got: data.dim(),
        });
    }
    let dual = constraint.forward_batch(data.data().view())?;
    let mut trainer = Trainer::new(arch, config, schedule.clone(), dual)?;
    trainer.run_to_end()?;
    Ok(TrainOutcome {
        params: trainer.params.clone(),
        ema: trainer.ema.clone(),
        optimizer: trainer.optimizer.clone(),
        trace: trainer.trace,
    })
}
