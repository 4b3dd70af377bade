//! Forward pass and hand-derived reverse-mode gradients.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::{write_embedding, Linear, NetworkParams, Norm};
use crate::diffusion::{regression_target, EpsModel, NoiseSchedule, RegressionTarget};
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

fn weight<'a>(values: &'a [f64], lin: &Linear) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(
        (lin.fan_in, lin.fan_out),
        &values[lin.w..lin.w + lin.fan_in * lin.fan_out],
    )
    .expect("layout shape")
}

fn bias<'a>(values: &'a [f64], lin: &Linear) -> ArrayView1<'a, f64> {
    ArrayView1::from(&values[lin.b..lin.b + lin.fan_out])
}

fn affine(x: &Array2<f64>, values: &[f64], lin: &Linear) -> Array2<f64> {
    let mut z = x.dot(&weight(values, lin));
    z += &bias(values, lin);
    z
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn silu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|a| a * sigmoid(a))
}

/// `dz = ds ⊙ σ(a)(1 + a(1 − σ(a)))`.
fn silu_backward(ds: Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    let mut out = ds;
    out.zip_mut_with(z, |g, &a| {
        let sg = sigmoid(a);
        *g *= sg * (1.0 + a * (1.0 - sg));
    });
    out
}

struct GroupNormCache {
    xhat: Array2<f64>,
    /// `1/√(var + eps)` per row and group.
    inv_std: Array2<f64>,
}

fn group_norm(
    x: &Array2<f64>,
    values: &[f64],
    norm: &Norm,
    groups: usize,
) -> (Array2<f64>, GroupNormCache) {
    let (n, h) = x.dim();
    let g = h / groups;
    let gamma = &values[norm.gamma..norm.gamma + h];
    let beta = &values[norm.beta..norm.beta + h];
    let mut xhat = Array2::zeros((n, h));
    let mut inv_std = Array2::zeros((n, groups));
    let mut out = Array2::zeros((n, h));
    for i in 0..n {
        let row = x.row(i);
        for k in 0..groups {
            let seg = row.slice(s![k * g..(k + 1) * g]);
            let mean = seg.sum() / g as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
            let is = 1.0 / (var + GN_EPS).sqrt();
            inv_std[[i, k]] = is;
            for j in k * g..(k + 1) * g {
                let xh = (x[[i, j]] - mean) * is;
                xhat[[i, j]] = xh;
                out[[i, j]] = gamma[j] * xh + beta[j];
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates `dγ`, `dβ` into `grad`.
fn group_norm_backward(
    dout: &Array2<f64>,
    cache: &GroupNormCache,
    values: &[f64],
    norm: &Norm,
    grad: &mut [f64],
) -> Array2<f64> {
    let (n, h) = dout.dim();
    let groups = cache.inv_std.ncols();
    let g = h / groups;
    let gamma = &values[norm.gamma..norm.gamma + h];
    let mut dx = Array2::zeros((n, h));
    for i in 0..n {
        for j in 0..h {
            grad[norm.gamma + j] += dout[[i, j]] * cache.xhat[[i, j]];
            grad[norm.beta + j] += dout[[i, j]];
        }
        for k in 0..groups {
            let range = k * g..(k + 1) * g;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in range.clone() {
                let dxh = dout[[i, j]] * gamma[j];
                mean_d += dxh;
                mean_dx += dxh * cache.xhat[[i, j]];
            }
            mean_d /= g as f64;
            mean_dx /= g as f64;
            let is = cache.inv_std[[i, k]];
            for j in range {
                let dxh = dout[[i, j]] * gamma[j];
                dx[[i, j]] = is * (dxh - mean_d - cache.xhat[[i, j]] * mean_dx);
            }
        }
    }
    dx
}

/// Accumulates `dW = xᵀ dz`, `db = Σ dz`; returns `dx = dz Wᵀ`.
fn affine_backward(
    dz: &Array2<f64>,
    x: &Array2<f64>,
    values: &[f64],
    lin: &Linear,
    grad: &mut [f64],
    need_dx: bool,
) -> Option<Array2<f64>> {
    let dw = x.t().dot(dz);
    for (g, v) in grad[lin.w..lin.w + lin.fan_in * lin.fan_out]
        .iter_mut()
        .zip(dw.iter())
    {
        *g += v;
    }
    let db = dz.sum_axis(Axis(0));
    for (g, v) in grad[lin.b..lin.b + lin.fan_out].iter_mut().zip(db.iter()) {
        *g += v;
    }
    need_dx.then(|| dz.dot(&weight(values, lin).t()))
}

struct BlockCache {
    norm: GroupNormCache,
    a0: Array2<f64>,
    z: [Array2<f64>; 3],
    s: [Array2<f64>; 3],
}

struct Cache {
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
    emb: Array2<f64>,
    tz: Array2<f64>,
    ts: Array2<f64>,
    out_norm: GroupNormCache,
    u: Array2<f64>,
    oz: Array2<f64>,
    os: Array2<f64>,
}

fn embed(t: &[usize], dim: usize) -> Array2<f64> {
    let mut emb = Array2::zeros((t.len(), dim));
    for (mut row, &step) in emb.outer_iter_mut().zip(t) {
        write_embedding(step as f64, row.as_slice_mut().expect("contiguous row"));
    }
    emb
}

fn run(params: &NetworkParams, y: ArrayView2<f64>, t: &[usize]) -> (Array2<f64>, Cache) {
    let v = params.values();
    let idx = params.index();
    let arch = params.architecture();
    let groups = arch.norm_groups;
    let input = y.to_owned();
    let mut h = affine(&input, v, &idx.input);
    let mut blocks = Vec::with_capacity(idx.blocks.len());
    for block in &idx.blocks {
        let (a0, norm) = group_norm(&h, v, &block.norm, groups);
        let z0 = affine(&a0, v, &block.lins[0]);
        let s0 = silu(&z0);
        let z1 = affine(&s0, v, &block.lins[1]);
        let s1 = silu(&z1);
        let z2 = affine(&s1, v, &block.lins[2]);
        let s2 = silu(&z2);
        h += &affine(&s2, v, &block.lins[3]);
        blocks.push(BlockCache {
            norm,
            a0,
            z: [z0, z1, z2],
            s: [s0, s1, s2],
        });
    }
    let emb = embed(t, arch.embed_dim);
    let tz = affine(&emb, v, &idx.t0);
    let ts = silu(&tz);
    h += &affine(&ts, v, &idx.t1);
    let (u, out_norm) = group_norm(&h, v, &idx.out_norm, groups);
    let oz = affine(&u, v, &idx.out0);
    let os = silu(&oz);
    let out = affine(&os, v, &idx.out1);
    (
        out,
        Cache {
            input,
            blocks,
            emb,
            tz,
            ts,
            out_norm,
            u,
            oz,
            os,
        },
    )
}

fn backward(params: &NetworkParams, cache: &Cache, dout: &Array2<f64>) -> Vec<f64> {
    let v = params.values();
    let idx = params.index();
    let mut grad = vec![0.0; params.len()];

    let dos = affine_backward(dout, &cache.os, v, &idx.out1, &mut grad, true).unwrap();
    let doz = silu_backward(dos, &cache.oz);
    let du = affine_backward(&doz, &cache.u, v, &idx.out0, &mut grad, true).unwrap();
    let mut dh = group_norm_backward(&du, &cache.out_norm, v, &idx.out_norm, &mut grad);

    let dts = affine_backward(&dh, &cache.ts, v, &idx.t1, &mut grad, true).unwrap();
    let dtz = silu_backward(dts, &cache.tz);
    affine_backward(&dtz, &cache.emb, v, &idx.t0, &mut grad, false);

    for (block, bc) in idx.blocks.iter().zip(&cache.blocks).rev() {
        let ds2 = affine_backward(&dh, &bc.s[2], v, &block.lins[3], &mut grad, true).unwrap();
        let dz2 = silu_backward(ds2, &bc.z[2]);
        let ds1 = affine_backward(&dz2, &bc.s[1], v, &block.lins[2], &mut grad, true).unwrap();
        let dz1 = silu_backward(ds1, &bc.z[1]);
        let ds0 = affine_backward(&dz1, &bc.s[0], v, &block.lins[1], &mut grad, true).unwrap();
        let dz0 = silu_backward(ds0, &bc.z[0]);
        let da0 = affine_backward(&dz0, &bc.a0, v, &block.lins[0], &mut grad, true).unwrap();
        dh += &group_norm_backward(&da0, &bc.norm, v, &block.norm, &mut grad);
    }
    affine_backward(&dh, &cache.input, v, &idx.input, &mut grad, false);
    grad
}

fn check_input(params: &NetworkParams, y: ArrayView2<f64>, t: &[usize]) -> Result<()> {
    let d = params.architecture().input_dim;
    if y.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: y.ncols(),
        });
    }
    if t.len() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: y.nrows(),
            got: t.len(),
        });
    }
    Ok(())
}

/// `ε_θ(y, t)` for one point.
pub fn forward(params: &NetworkParams, y: &[f64], t: usize) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, y.len()), y).expect("row view");
    Ok(forward_batch(params, view, &[t])?.into_raw_vec_and_offset().0)
}

/// `ε_θ(y_i, t_i)` row-wise.
pub fn forward_batch(params: &NetworkParams, y: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>> {
    check_input(params, y, t)?;
    Ok(run(params, y, t).0)
}

impl EpsModel for NetworkParams {
    fn dim(&self) -> usize {
        self.architecture().input_dim
    }

    fn predict(&self, y: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>> {
        forward_batch(self, y, t)
    }
}

/// Batch-mean squared error `(1/N) Σ ‖ε_i − ε_θ(y_t,i, t_i)‖²` and its gradient.
pub fn loss_and_grad_target(
    params: &NetworkParams,
    target: &RegressionTarget,
) -> Result<(f64, Vec<f64>)> {
    let n = target.y_t.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_input(params, target.y_t.view(), &target.t)?;
    let (out, cache) = run(params, target.y_t.view(), &target.t);
    let resid = &target.eps - &out;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let dout = resid * (-2.0 / n as f64);
    Ok((loss, backward(params, &cache, &dout)))
}

/// Draws `(t, ε)` for `y0` from `seed`, then evaluates the regression loss.
pub fn loss_and_grad(
    params: &NetworkParams,
    y0: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if y0.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    loss_and_grad_target(params, &regression_target(schedule, y0, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::rng::SeededRng;

    fn tiny() -> Architecture {
        Architecture {
            input_dim: 2,
            hidden_dim: 8,
            n_res_blocks: 1,
            embed_dim: 8,
            norm_groups: 2,
        }
    }

    /// Randomizes every parameter, including the zero-initialized ones.
    fn random_params(arch: Architecture, seed: u64) -> NetworkParams {
        let mut p = NetworkParams::zeros(arch).unwrap();
        let mut rng = SeededRng::new(seed);
        for v in p.values_mut() {
            *v = 0.5 * rng.normal();
        }
        p
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = NetworkParams::zeros(Architecture::standard(3)).unwrap();
        let out = forward(&p, &[0.3, -1.0, 2.0], 17).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let p = NetworkParams::init(Architecture::standard(3), 1).unwrap();
        assert_eq!(forward(&p, &[0.3, -1.0, 2.0], 17).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic_and_continuous() {
        let p = random_params(Architecture::standard(4), 2);
        let mut rng = SeededRng::new(3);
        for _ in 0..10 {
            let y = rng.normal_vec(4);
            let t = 1 + rng.below(1000) as usize;
            let a = forward(&p, &y, t).unwrap();
            assert_eq!(a, forward(&p, &y, t).unwrap());
            let mut prev = f64::INFINITY;
            for k in 1..6 {
                let delta = 10f64.powi(-2 * k);
                let yp: Vec<f64> = y.iter().map(|v| v + delta).collect();
                let b = forward(&p, &yp, t).unwrap();
                let gap = a.iter().zip(&b).map(|(x, z)| (x - z).abs()).fold(0.0, f64::max);
                assert!(gap <= prev);
                prev = gap;
            }
            assert!(prev < 1e-6);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = random_params(tiny(), 4);
        let y = ndarray::array![[0.1, 0.2], [1.0, -3.0], [0.0, 0.5]];
        let batch = forward_batch(&p, y.view(), &[3, 400, 999]).unwrap();
        for (i, t) in [3usize, 400, 999].iter().enumerate() {
            let single = forward(&p, &y.row(i).to_vec(), *t).unwrap();
            assert_eq!(batch.row(i).to_vec(), single);
        }
    }

    #[test]
    fn dimension_checks() {
        let p = random_params(tiny(), 5);
        assert!(matches!(
            forward(&p, &[1.0, 2.0, 3.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
        let s = NoiseSchedule::default();
        assert!(matches!(
            loss_and_grad(&p, Array2::zeros((0, 2)).view(), &s, 0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn zero_network_loss_is_noise_energy() {
        let p = NetworkParams::init(Architecture::standard(3), 6).unwrap();
        let y0 = Array2::from_elem((4000, 3), 0.25);
        let (loss, _) = loss_and_grad(&p, y0.view(), &NoiseSchedule::default(), 7).unwrap();
        // E‖ε‖² = d with variance 2d per row
        assert!((loss - 3.0).abs() < 4.0 * (6.0f64 / 4000.0).sqrt());
    }

    #[test]
    fn duplicated_rows_keep_the_mean() {
        let p = random_params(tiny(), 8);
        let s = NoiseSchedule::default();
        let t = regression_target(&s, Array2::from_elem((5, 2), 0.3).view(), 9);
        let doubled = RegressionTarget {
            t: t.t.iter().chain(&t.t).copied().collect(),
            y_t: ndarray::concatenate![Axis(0), t.y_t, t.y_t],
            eps: ndarray::concatenate![Axis(0), t.eps, t.eps],
        };
        let (a, ga) = loss_and_grad_target(&p, &t).unwrap();
        let (b, gb) = loss_and_grad_target(&p, &doubled).unwrap();
        assert!((a - b).abs() < 1e-13 * a);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-11 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(10);
        for arch in [
            tiny(),
            Architecture {
                input_dim: 3,
                hidden_dim: 12,
                n_res_blocks: 2,
                embed_dim: 6,
                norm_groups: 3,
            },
        ] {
            let p = random_params(arch.clone(), 11);
            let y0 = Array2::from_shape_fn((6, arch.input_dim), |_| rng.normal());
            let target = regression_target(&s, y0.view(), 12);
            let (_, grad) = loss_and_grad_target(&p, &target).unwrap();
            for _ in 0..50 {
                let k = rng.below(p.len() as u64) as usize;
                let h = 1e-6;
                let mut plus = p.clone();
                plus.values_mut()[k] += h;
                let mut minus = p.clone();
                minus.values_mut()[k] -= h;
                let lp = loss_and_grad_target(&plus, &target).unwrap().0;
                let lm = loss_and_grad_target(&minus, &target).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }
}
