//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json      architecture, layout table, config, schedule, step
//! params.bin         flat parameter vector, little-endian f64
//! ema.bin            EMA parameters, same layout
//! optimizer.bin      AdamW moments m then v
//! constraint.json    constraint the model was trained under (+ tokens blob)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, LossRecord, NetworkParams, OptimizerState, ParamSpec, TrainConfig};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;
use crate::io::{load_constraint, read_f64_blob, read_json, save_constraint, write_f64_blob, write_json};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const EMA: &str = "ema.bin";
const OPTIMIZER: &str = "optimizer.bin";
const CONSTRAINT: &str = "constraint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub layout: Vec<ParamSpec>,
    pub n_params: usize,
    pub train_config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub params: NetworkParams,
    pub ema: NetworkParams,
    pub optimizer: OptimizerState,
    pub constraint: ConstraintSet,
}

impl Checkpoint {
    pub fn architecture(&self) -> &Architecture {
        self.params.architecture()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            architecture: self.params.architecture().clone(),
            layout: self.params.layout().to_vec(),
            n_params: self.params.len(),
            train_config: self.train_config.clone(),
            schedule: self.schedule.clone(),
            step: self.step,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST), &self.manifest())?;
        write_f64_blob(&dir.join(PARAMS), self.params.values())?;
        write_f64_blob(&dir.join(EMA), self.ema.values())?;
        let mut moments = self.optimizer.m.clone();
        moments.extend_from_slice(&self.optimizer.v);
        write_f64_blob(&dir.join(OPTIMIZER), &moments)?;
        save_constraint(&dir.join(CONSTRAINT), &self.constraint)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let arch = manifest.architecture.clone();
        let blank = NetworkParams::zeros(arch.clone())?;
        if blank.layout() != manifest.layout.as_slice() || blank.len() != manifest.n_params {
            return Err(Error::format(
                &manifest_path,
                "layout table does not match the architecture",
            ));
        }
        let load = |name: &str, expected: usize| -> Result<Vec<f64>> {
            let path = dir.join(name);
            let v = read_f64_blob(&path)?;
            if v.len() != expected {
                return Err(Error::format(
                    &path,
                    format!("expected {expected} values, found {}", v.len()),
                ));
            }
            Ok(v)
        };
        let n = manifest.n_params;
        let params = NetworkParams::from_values(arch.clone(), load(PARAMS, n)?)?;
        let ema = NetworkParams::from_values(arch.clone(), load(EMA, n)?)?;
        let mut m = load(OPTIMIZER, 2 * n)?;
        let v = m.split_off(n);
        let constraint = load_constraint(&dir.join(CONSTRAINT))?;
        if constraint.dim() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim,
                got: constraint.dim(),
            });
        }
        Ok(Self {
            train_config: manifest.train_config,
            schedule: manifest.schedule,
            step: manifest.step,
            params,
            ema,
            optimizer: OptimizerState { m, v },
            constraint,
        })
    }
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    if trace.is_empty() {
        w.write_record(["step", "loss", "lr"])
            .map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.error()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::format(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BallConstraint;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            input_dim: 2,
            hidden_dim: 8,
            n_res_blocks: 1,
            embed_dim: 4,
            norm_groups: 2,
        };
        let params = NetworkParams::init(arch.clone(), 1).unwrap();
        let mut ema = params.clone();
        ema.values_mut()[0] = 0.25;
        let n = params.len();
        Checkpoint {
            train_config: TrainConfig::default(),
            schedule: ScheduleSpec::default(),
            step: 17,
            params,
            ema,
            optimizer: OptimizerState {
                m: vec![0.5; n],
                v: vec![0.125; n],
            },
            constraint: BallConstraint::unit(2).unwrap().into(),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.ema, ck.ema);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.step, 17);
        assert_eq!(back.train_config, ck.train_config);
        assert_eq!(back.constraint, ck.constraint);
        let bytes = std::fs::read(dir.path().join(PARAMS)).unwrap();
        assert_eq!(bytes.len(), 8 * ck.params.len());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        write_f64_blob(&dir.path().join(EMA), &[1.0, 2.0]).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn loss_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let trace = vec![
            LossRecord {
                step: 100,
                loss: 0.8123,
                lr: 1e-3,
            },
            LossRecord {
                step: 200,
                loss: 0.51,
                lr: 9.9e-4,
            },
        ];
        write_loss_trace(&path, &trace).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("step,loss,lr\n"));
        assert_eq!(read_loss_trace(&path).unwrap(), trace);
        write_loss_trace(&path, &[]).unwrap();
        assert!(read_loss_trace(&path).unwrap().is_empty());
    }
}
