//! Versioned JSON run configuration. Every field is optional; command-line
//! flags take precedence over values read from the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mdm_core::datasets::DatasetSpec;
use mdm_core::diffusion::ScheduleSpec;
use mdm_core::geometry::ConstraintSet;
use mdm_core::io::ConstraintDoc;
use mdm_core::metrics::MetricConfig;
use mdm_core::network::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const CONFIG_VERSION: u32 = 1;

/// Network shape without the input width, which always comes from the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureOverrides {
    pub hidden_dim: Option<usize>,
    pub n_res_blocks: Option<usize>,
    pub embed_dim: Option<usize>,
    pub norm_groups: Option<usize>,
}

impl ArchitectureOverrides {
    pub fn apply(&self, mut arch: Architecture) -> Architecture {
        if let Some(v) = self.hidden_dim {
            arch.hidden_dim = v;
        }
        if let Some(v) = self.n_res_blocks {
            arch.n_res_blocks = v;
        }
        if let Some(v) = self.embed_dim {
            arch.embed_dim = v;
        }
        if let Some(v) = self.norm_groups {
            arch.norm_groups = v;
        }
        arch
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub constraint: Option<ConstraintDoc>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub architecture: ArchitectureOverrides,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: Option<MetricConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Directory of the config file; relative paths inside it resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                version: CONFIG_VERSION,
                base_dir: PathBuf::from("."),
                ..Self::default()
            });
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            bail!(UsageError(format!(
                "{}: unsupported config version {} (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        if let Some(out) = &cfg.output {
            if out.is_relative() {
                cfg.output = Some(cfg.base_dir.join(out));
            }
        }
        Ok(cfg)
    }

    pub fn constraint(&self) -> Result<Option<ConstraintSet>> {
        self.constraint
            .as_ref()
            .map(|doc| doc.build(&self.base_dir).map_err(anyhow::Error::from))
            .transpose()
    }

    /// Flag value, else the file's output path, else a usage error.
    pub fn output(&self, flag: Option<PathBuf>, what: &str) -> Result<PathBuf> {
        flag.or_else(|| self.output.clone())
            .ok_or_else(|| UsageError(format!("missing --out for {what}")).into())
    }
}
