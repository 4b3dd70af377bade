//! End-to-end steps shared by the command line and the acceptance suite:
//! train with snapshots, sample in the primal space, evaluate the bound.

use ndarray::Array2;

use crate::diffusion::{ancestral_sample, elbo_rows, ElboConfig, ElboTerms, SampleBatch, ScheduleSpec};
use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;
use crate::network::checkpoint::Checkpoint;
use crate::network::{Architecture, LossRecord, TrainConfig, Trainer};

pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    /// Checkpoints taken at the requested intermediate steps, in order.
    pub snapshots: Vec<Checkpoint>,
    pub trace: Vec<LossRecord>,
}

fn snapshot(trainer: &Trainer, constraint: &ConstraintSet) -> Checkpoint {
    Checkpoint {
        train_config: trainer.config().clone(),
        schedule: trainer.schedule().spec(),
        step: trainer.step_count(),
        params: trainer.params().clone(),
        ema: trainer.ema().clone(),
        optimizer: trainer.optimizer().clone(),
        constraint: constraint.clone(),
    }
}

fn check_data(data: &SampleBatch, constraint: &ConstraintSet) -> Result<()> {
    match data.constraint() {
        Some(c) if c.as_ref() == constraint => Ok(()),
        Some(c) => Err(Error::InvalidConfig(format!(
            "training data lives on a {} (dim {}), model constraint is a {} (dim {})",
            c.kind(),
            c.dim(),
            constraint.kind(),
            constraint.dim()
        ))),
        None => Err(Error::InvalidDataset("training data must be primal".into())),
    }
}

fn run_with_snapshots(
    mut trainer: Trainer,
    constraint: &ConstraintSet,
    snapshot_steps: &[usize],
) -> Result<TrainedModel> {
    let mut steps: Vec<usize> = snapshot_steps
        .iter()
        .copied()
        .filter(|s| *s > trainer.step_count() && *s < trainer.config().n_steps)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let mut snapshots = Vec::with_capacity(steps.len());
    for s in steps {
        trainer.run(s - trainer.step_count())?;
        snapshots.push(snapshot(&trainer, constraint));
    }
    trainer.run_to_end()?;
    Ok(TrainedModel {
        checkpoint: snapshot(&trainer, constraint),
        snapshots,
        trace: trainer.trace().to_vec(),
    })
}

/// Push `data` to the dual space once and train, capturing checkpoints at
/// `snapshot_steps`.
pub fn train_model(
    constraint: &ConstraintSet,
    data: &SampleBatch,
    arch: Architecture,
    config: TrainConfig,
    schedule: &ScheduleSpec,
    snapshot_steps: &[usize],
) -> Result<TrainedModel> {
    check_data(data, constraint)?;
    if arch.input_dim != constraint.dim() {
        return Err(Error::DimensionMismatch {
            expected: constraint.dim(),
            got: arch.input_dim,
        });
    }
    let dual = constraint.forward_batch(data.data().view())?;
    let trainer = Trainer::new(arch, config, schedule.build()?, dual)?;
    run_with_snapshots(trainer, constraint, snapshot_steps)
}

/// Continue training from `checkpoint` up to `n_steps` total steps.
pub fn resume_model(
    checkpoint: &Checkpoint,
    data: &SampleBatch,
    n_steps: usize,
    snapshot_steps: &[usize],
) -> Result<TrainedModel> {
    check_data(data, &checkpoint.constraint)?;
    let dual = checkpoint.constraint.forward_batch(data.data().view())?;
    let config = TrainConfig {
        n_steps,
        ..checkpoint.train_config.clone()
    };
    let trainer = Trainer::resume(
        config,
        checkpoint.schedule.build()?,
        dual,
        checkpoint.params.clone(),
        checkpoint.ema.clone(),
        checkpoint.optimizer.clone(),
        checkpoint.step,
    )?;
    run_with_snapshots(trainer, &checkpoint.constraint, snapshot_steps)
}

/// Draw `n` dual samples with the EMA network and map them into the set.
pub fn sample_primal(checkpoint: &Checkpoint, n: usize, seed: u64) -> Result<SampleBatch> {
    let schedule = checkpoint.schedule.build()?;
    let dual = ancestral_sample(&checkpoint.ema, &schedule, n, seed)?;
    let constraint = std::sync::Arc::new(checkpoint.constraint.clone());
    dual.to_primal(constraint)
}

/// Per-row bound under the EMA network.
pub fn checkpoint_elbo(
    checkpoint: &Checkpoint,
    x: &Array2<f64>,
    config: &ElboConfig,
    seed: u64,
) -> Result<Vec<Result<ElboTerms>>> {
    let schedule = checkpoint.schedule.build()?;
    Ok(elbo_rows(
        x,
        &checkpoint.ema,
        &schedule,
        &checkpoint.constraint,
        config,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{dirichlet, gmm_ball};
    use crate::geometry::BallConstraint;

    fn tiny() -> (Architecture, TrainConfig, ScheduleSpec) {
        let arch = Architecture {
            input_dim: 2,
            hidden_dim: 8,
            n_res_blocks: 1,
            embed_dim: 4,
            norm_groups: 2,
        };
        let cfg = TrainConfig {
            n_steps: 12,
            batch_size: 8,
            log_every: 4,
            ..TrainConfig::default()
        };
        let sched = ScheduleSpec {
            steps: 20,
            ..ScheduleSpec::default()
        };
        (arch, cfg, sched)
    }

    #[test]
    fn snapshots_and_resume_agree() {
        let (arch, cfg, sched) = tiny();
        let data = gmm_ball(2, 50, 1, 0.05, 1.0).unwrap();
        let c = data.constraint().unwrap().as_ref().clone();
        let full = train_model(&c, &data, arch.clone(), cfg.clone(), &sched, &[5, 0, 12, 5]).unwrap();
        assert_eq!(full.snapshots.len(), 1);
        assert_eq!(full.snapshots[0].step, 5);
        assert_eq!(full.checkpoint.step, 12);

        let resumed = resume_model(&full.snapshots[0], &data, 12, &[]).unwrap();
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
        assert_eq!(resumed.checkpoint.ema, full.checkpoint.ema);
    }

    #[test]
    fn samples_are_inside_and_empty_requests_work() {
        let (arch, cfg, sched) = tiny();
        let data = gmm_ball(2, 50, 1, 0.05, 1.0).unwrap();
        let c = data.constraint().unwrap().as_ref().clone();
        let m = train_model(&c, &data, arch, cfg, &sched, &[]).unwrap();
        let s = sample_primal(&m.checkpoint, 300, 4).unwrap();
        assert_eq!(crate::metrics::violation_rate(&c, s.data().view()).unwrap(), 0.0);
        assert_eq!(sample_primal(&m.checkpoint, 0, 4).unwrap().len(), 0);
        let rows = checkpoint_elbo(&m.checkpoint, data.data(), &ElboConfig::default(), 1).unwrap();
        assert!(rows.iter().all(|r| r.as_ref().unwrap().total.is_finite()));
    }

    #[test]
    fn mismatched_constraint_is_rejected() {
        let (arch, cfg, sched) = tiny();
        let data = dirichlet(&[2.0, 4.0, 8.0], 20, 7).unwrap();
        let ball: ConstraintSet = BallConstraint::unit(2).unwrap().into();
        assert!(matches!(
            train_model(&ball, &data, arch, cfg, &sched, &[]),
            Err(Error::InvalidConfig(_))
        ));
    }
}
