//! Time-conditioned residual MLP `ε_θ(y, t)`.
//!
//! ```text
//! h_0     = y W_in + b_in
//! h_{k+1} = h_k + res_k(GN_k(h_k))            k = 0..n_res_blocks
//! res_k   = Linear → SiLU → Linear → SiLU → Linear → SiLU → Linear
//! temb    = Linear(SiLU(Linear(sinusoid(t))))
//! out     = Linear(SiLU(Linear(GN_out(h_K + temb))))
//! ```
//!
//! All parameters live in one flat `Vec<f64>`; the layout table maps names to
//! offsets. Affine weights are stored `(fan_in, fan_out)` so a layer computes
//! `x W + b` on row-major batches.

mod mlp;
mod train;

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use mlp::{forward, forward_batch, loss_and_grad, loss_and_grad_target};
pub use train::{
    ema_update, train, LossRecord, OptimizerState, TrainConfig, TrainOutcome, Trainer,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_res_blocks: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
}

impl Architecture {
    /// Width 128, three residual blocks, 128-wide time embedding, 8 groups.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 128,
            n_res_blocks: 3,
            embed_dim: 128,
            norm_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArchitecture(m));
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be >= 1".into());
        }
        if self.n_res_blocks == 0 {
            return fail("n_res_blocks must be >= 1".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.norm_groups == 0 || !self.hidden_dim.is_multiple_of(self.norm_groups) {
            return fail(format!(
                "norm_groups {} must divide hidden_dim {}",
                self.norm_groups, self.hidden_dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub norm: Norm,
    pub lins: [Linear; 4],
}

/// Offsets of every tensor, in layout order.
#[derive(Clone, Debug)]
pub(crate) struct Index {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub t0: Linear,
    pub t1: Linear,
    pub out_norm: Norm,
    pub out0: Linear,
    pub out1: Linear,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    next: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.specs.push(ParamSpec { name, offset, shape });
        offset
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.push(format!("{name}.weight"), vec![fan_in, fan_out]),
            b: self.push(format!("{name}.bias"), vec![fan_out]),
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), vec![width]),
            beta: self.push(format!("{name}.beta"), vec![width]),
        }
    }
}

fn build_index(arch: &Architecture) -> (Index, Vec<ParamSpec>, usize) {
    let h = arch.hidden_dim;
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        next: 0,
    };
    let input = b.linear("input", arch.input_dim, h);
    let blocks = (0..arch.n_res_blocks)
        .map(|k| Block {
            norm: b.norm(&format!("block{k}.norm"), h),
            lins: [0, 1, 2, 3].map(|j| b.linear(&format!("block{k}.lin{j}"), h, h)),
        })
        .collect();
    let t0 = b.linear("temb.lin0", arch.embed_dim, h);
    let t1 = b.linear("temb.lin1", h, h);
    let out_norm = b.norm("out.norm", h);
    let out0 = b.linear("out.lin0", h, h);
    let out1 = b.linear("out.lin1", h, arch.input_dim);
    let index = Index {
        input,
        blocks,
        t0,
        t1,
        out_norm,
        out0,
        out1,
    };
    (index, b.specs, b.next)
}

/// Flat parameter vector together with its architecture and layout.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    arch: Architecture,
    layout: Vec<ParamSpec>,
    index: Index,
    values: Vec<f64>,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values
    }
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (index, layout, total) = build_index(&arch);
        Ok(Self {
            arch,
            layout,
            index,
            values: vec![0.0; total],
        })
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::DimensionMismatch {
                expected: p.values.len(),
                got: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    /// Truncated-normal fan-in initialization (std `1/√fan_in`, cut at 2σ),
    /// unit group-norm scales, zero biases and a zero output layer.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = SeededRng::new(seed);
        let index = p.index.clone();
        let mut lins = vec![index.input];
        for block in &index.blocks {
            lins.extend(block.lins);
        }
        lins.extend([index.t0, index.t1, index.out0]);
        for lin in lins {
            let std = 1.0 / (lin.fan_in as f64).sqrt();
            for v in &mut p.values[lin.w..lin.w + lin.fan_in * lin.fan_out] {
                *v = std * truncated_normal(&mut rng);
            }
        }
        let h = p.arch.hidden_dim;
        let norms = index
            .blocks
            .iter()
            .map(|b| b.norm)
            .chain(std::iter::once(index.out_norm));
        for norm in norms {
            p.values[norm.gamma..norm.gamma + h].fill(1.0);
        }
        Ok(p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub(crate) fn index(&self) -> &Index {
        &self.index
    }
}

fn truncated_normal(rng: &mut SeededRng) -> f64 {
    loop {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Interleaved `(sin(t ω_k), cos(t ω_k))` with `ω_k = 10000^(−2k/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::OddDimension(dim));
    }
    let mut out = vec![0.0; dim];
    write_embedding(t, &mut out);
    Ok(out)
}

pub(crate) fn write_embedding(t: f64, out: &mut [f64]) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (t * omega).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_examples() {
        assert_eq!(timestep_embedding(0.0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = timestep_embedding(1.0, 2).unwrap();
        assert!((e[0] - 1f64.sin()).abs() < 1e-15 && (e[1] - 1f64.cos()).abs() < 1e-15);
        assert!(matches!(timestep_embedding(1.0, 5), Err(Error::OddDimension(5))));
        for t in [0.0, 1.0, 17.0, 999.0] {
            let e = timestep_embedding(t, 128).unwrap();
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= (64.0f64).sqrt() * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let p = NetworkParams::zeros(Architecture::standard(5)).unwrap();
        let mut next = 0;
        for s in p.layout() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
        let h = 128;
        let want = (5 * h + h)
            + 3 * (2 * h + 4 * (h * h + h))
            + (h * h + h)
            + (h * h + h)
            + 2 * h
            + (h * h + h)
            + (h * 5 + 5);
        assert_eq!(p.len(), want);
    }

    #[test]
    fn architecture_validation() {
        let mut a = Architecture::standard(2);
        a.norm_groups = 7;
        assert!(NetworkParams::zeros(a.clone()).is_err());
        a.norm_groups = 8;
        a.embed_dim = 9;
        assert!(a.validate().is_err());
        a.embed_dim = 8;
        a.n_res_blocks = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_zeroes_output() {
        let a = NetworkParams::init(Architecture::standard(3), 4).unwrap();
        let b = NetworkParams::init(Architecture::standard(3), 4).unwrap();
        let c = NetworkParams::init(Architecture::standard(3), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensor("out.lin1.weight").unwrap().iter().all(|v| *v == 0.0));
        assert!(a.tensor("out.lin1.bias").unwrap().iter().all(|v| *v == 0.0));
        assert!(a.tensor("block0.norm.gamma").unwrap().iter().all(|v| *v == 1.0));
        let w = a.tensor("block1.lin2.weight").unwrap();
        let bound = 2.0 / 128f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        // variance of a standard normal truncated at ±2 is ≈ 0.774
        assert!((var * 128.0 - 0.774).abs() < 0.03);
    }
}
