use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mdm_core::datasets::{self, BoundaryMode, DatasetKind, DatasetSpec};
use mdm_core::diffusion::{ElboConfig, ElboEstimator, SampleBatch, Space};
use mdm_core::geometry::ConstraintSet;
use mdm_core::io::{self, ConstraintDoc};
use mdm_core::metrics::{self, evaluate_pair, MetricConfig, MetricReport};
use mdm_core::network::checkpoint::{read_loss_trace, write_loss_trace, Checkpoint};
use mdm_core::network::{Architecture, LossRecord, TrainConfig};
use mdm_core::pipeline::{self, TrainedModel};
use mdm_core::watermark::{self, WatermarkKey};
use ndarray::{s, Array2};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{
    Cli, Command, DatasetKindArg, DetectionFailed, ElboArgs, EstimatorArg, EvalArgs, GenDataArgs,
    ModeArg, SampleArgs, TrainArgs, UsageError, WatermarkCommand,
};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Sample(a) => sample(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Elbo(a) => elbo(&cfg, a),
        Command::Watermark(w) => watermark_cmd(&cfg, w),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn seed_or(flag: Option<u64>, cfg: &RunConfig) -> u64 {
    flag.or(cfg.seed).unwrap_or(0)
}

/// Companion file next to `path`: `dir/stem.csv` becomes `dir/stem.<suffix>`.
fn companion(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json_out<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => io::write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn kind_of(k: &DatasetKind) -> DatasetKindArg {
    match k {
        DatasetKind::GmmBall { .. } => DatasetKindArg::GmmBall,
        DatasetKind::SpiralBall { .. } => DatasetKindArg::SpiralBall,
        DatasetKind::Dirichlet { .. } => DatasetKindArg::Dirichlet,
        DatasetKind::HypercubeCorners { .. } => DatasetKindArg::HypercubeCorners,
    }
}

/// Start from the file's dataset when it has the requested kind, then apply
/// every flag that was given.
fn dataset_spec(cfg: &RunConfig, a: &GenDataArgs) -> Result<DatasetSpec> {
    let base = cfg.dataset.clone();
    let kind_arg = match (a.kind, &base) {
        (Some(k), _) => k,
        (None, Some(b)) => kind_of(&b.kind),
        (None, None) => return Err(usage("missing --kind")),
    };
    let inherited = base.as_ref().filter(|b| kind_of(&b.kind) == kind_arg);
    let mut kind = match inherited {
        Some(b) => b.kind.clone(),
        None => match kind_arg {
            DatasetKindArg::GmmBall => DatasetKind::GmmBall {
                dim: a.dim.ok_or_else(|| usage("gmm-ball needs --dim"))?,
                variance: 0.05,
                radius_sq: 1.0,
            },
            DatasetKindArg::SpiralBall => DatasetKind::SpiralBall { sigma: 0.02 },
            DatasetKindArg::Dirichlet => DatasetKind::Dirichlet {
                alpha: a.alpha.clone().ok_or_else(|| usage("dirichlet needs --alpha"))?,
            },
            DatasetKindArg::HypercubeCorners => DatasetKind::HypercubeCorners {
                dim: a.dim.ok_or_else(|| usage("hypercube-corners needs --dim"))?,
                variance: 0.2,
                mode: BoundaryMode::Reject,
            },
        },
    };
    match &mut kind {
        DatasetKind::GmmBall {
            dim,
            variance,
            radius_sq,
        } => {
            *dim = a.dim.unwrap_or(*dim);
            *variance = a.variance.unwrap_or(*variance);
            *radius_sq = a.radius_sq.unwrap_or(*radius_sq);
        }
        DatasetKind::SpiralBall { sigma } => *sigma = a.sigma.unwrap_or(*sigma),
        DatasetKind::Dirichlet { alpha } => {
            if let Some(v) = &a.alpha {
                alpha.clone_from(v);
            }
        }
        DatasetKind::HypercubeCorners {
            dim,
            variance,
            mode,
        } => {
            *dim = a.dim.unwrap_or(*dim);
            *variance = a.variance.unwrap_or(*variance);
            if let Some(m) = a.mode {
                *mode = match m {
                    ModeArg::Reject => BoundaryMode::Reject,
                    ModeArg::Reflect => BoundaryMode::Reflect,
                };
            }
        }
    }
    let spec = DatasetSpec {
        kind,
        n_samples: a
            .n
            .or(inherited.map(|b| b.n_samples))
            .unwrap_or(1000),
        seed: a
            .seed
            .or(inherited.map(|b| b.seed))
            .or(cfg.seed)
            .unwrap_or(0),
    };
    spec.validate()?;
    Ok(spec)
}

fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> Result<()> {
    let spec = dataset_spec(cfg, &a)?;
    let out = cfg.output(a.out.clone(), "gen-data")?;
    let batch = datasets::generate(&spec)?;
    io::write_batch(&out, &batch, json!({ "dataset": spec }))
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} x {} samples to {}", batch.len(), batch.dim(), out.display());
    Ok(())
}

fn train_config(cfg: &RunConfig, a: &TrainArgs, base: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut tc = base.cloned().or_else(|| cfg.train.clone()).unwrap_or_default();
    if base.is_none() {
        tc.seed = a.seed.or(cfg.seed).unwrap_or(tc.seed);
    } else if a.seed.is_some() {
        return Err(usage("--seed cannot change when resuming"));
    }
    if let Some(v) = a.steps {
        tc.n_steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.log_every {
        tc.log_every = v;
    }
    tc.validate()?;
    Ok(tc)
}

fn save_model(
    out: &Path,
    model: &TrainedModel,
    prior_trace: Vec<LossRecord>,
    echo: &Value,
) -> Result<()> {
    let mut trace = prior_trace;
    trace.extend(model.trace.iter().cloned());
    model.checkpoint.save(out)?;
    write_loss_trace(&out.join("loss.csv"), &trace)?;
    for snap in &model.snapshots {
        let dir = out.join(format!("step-{}", snap.step));
        snap.save(&dir)?;
        let upto: Vec<_> = trace.iter().filter(|r| r.step <= snap.step).cloned().collect();
        write_loss_trace(&dir.join("loss.csv"), &upto)?;
    }
    io::write_json(&out.join("run.json"), echo)?;
    Ok(())
}

fn train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let out = cfg.output(a.out.clone(), "train")?;
    let data = io::read_batch(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if data.space() != Space::Primal {
        bail!(UsageError(format!(
            "{}: training data needs a primal sidecar with its constraint",
            a.data.display()
        )));
    }
    let constraint: ConstraintSet = match (&a.constraint, cfg.constraint()?) {
        (Some(p), _) => io::load_constraint(p)?,
        (None, Some(c)) => c,
        (None, None) => data.constraint().expect("primal batch").as_ref().clone(),
    };
    let echo_base = json!({
        "data": a.data,
        "constraint": ConstraintDoc::describe(&constraint, None),
    });

    if let Some(resume) = &a.resume {
        let ck = Checkpoint::load(resume)?;
        if ck.constraint != constraint {
            bail!(UsageError(format!(
                "checkpoint constraint ({} dim {}) differs from the requested one ({} dim {})",
                ck.constraint.kind(),
                ck.constraint.dim(),
                constraint.kind(),
                constraint.dim()
            )));
        }
        let tc = train_config(cfg, &a, Some(&ck.train_config))?;
        if tc.n_steps < ck.step {
            bail!(UsageError(format!(
                "--steps {} is below the checkpoint step {}",
                tc.n_steps, ck.step
            )));
        }
        let prior = match read_loss_trace(&resume.join("loss.csv")) {
            Ok(t) => t.into_iter().filter(|r| r.step <= ck.step).collect(),
            Err(_) => Vec::new(),
        };
        let model = pipeline::resume_model(&ck, &data, tc.n_steps, &a.snapshot_steps)?;
        let mut echo = echo_base;
        echo["resumed_from"] = json!(resume);
        echo["resumed_step"] = json!(ck.step);
        echo["train"] = json!(model.checkpoint.train_config);
        echo["schedule"] = json!(model.checkpoint.schedule);
        echo["architecture"] = json!(model.checkpoint.architecture());
        save_model(&out, &model, prior, &echo)?;
        eprintln!("resumed at step {} and trained to {}", ck.step, model.checkpoint.step);
        return Ok(());
    }

    let tc = train_config(cfg, &a, None)?;
    let mut schedule = cfg.schedule.clone().unwrap_or_default();
    if let Some(t) = a.timesteps {
        schedule.steps = t;
    }
    let mut arch = cfg.architecture.apply(Architecture::standard(constraint.dim()));
    if let Some(v) = a.hidden_dim {
        arch.hidden_dim = v;
    }
    if let Some(v) = a.n_res_blocks {
        arch.n_res_blocks = v;
    }
    arch.validate()?;
    schedule.build()?;
    let model = pipeline::train_model(&constraint, &data, arch.clone(), tc.clone(), &schedule, &a.snapshot_steps)?;
    let mut echo = echo_base;
    echo["train"] = json!(tc);
    echo["schedule"] = json!(schedule);
    echo["architecture"] = json!(arch);
    save_model(&out, &model, Vec::new(), &echo)?;
    match model.trace.last() {
        Some(r) => eprintln!("trained {} steps, final loss {:.6}", model.checkpoint.step, r.loss),
        None => eprintln!("wrote untrained checkpoint"),
    }
    Ok(())
}

fn sample(cfg: &RunConfig, a: SampleArgs) -> Result<()> {
    let out = cfg.output(a.out.clone(), "sample")?;
    let seed = seed_or(a.seed, cfg);
    let ck = Checkpoint::load(&a.checkpoint)?;
    let batch = pipeline::sample_primal(&ck, a.n, seed)?;
    let rate = metrics::violation_rate(&ck.constraint, batch.data().view())?;
    let meta = json!({
        "checkpoint": a.checkpoint,
        "checkpoint_step": ck.step,
        "n": a.n,
        "seed": seed,
    });
    io::write_batch(&out, &batch, meta.clone())?;
    let mut report = meta;
    report["violation_rate"] = json!(rate);
    io::write_json(&companion(&out, "report.json"), &report)?;
    eprintln!("wrote {} samples to {} (violation rate {rate}%)", batch.len(), out.display());
    Ok(())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(mdm_core::Error::DimensionMismatch { expected: b, got: a }.into());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    if a.trials == 0 {
        bail!(UsageError("--trials must be at least 1".into()));
    }
    if a.hist_bins.is_some() != a.hist_out.is_some() {
        bail!(UsageError("--hist-bins and --hist-out go together".into()));
    }
    let seed = seed_or(a.seed, cfg);
    let reference = io::read_batch(&a.b)?;
    let mut mc: MetricConfig = cfg.metrics.clone().unwrap_or_default();
    if let Some(p) = a.projections {
        mc.n_projections = p;
    }
    if a.no_w1 {
        mc.wasserstein1 = false;
    }

    enum Source {
        File(SampleBatch),
        Model(Box<Checkpoint>),
    }
    let source = match (&a.a, &a.checkpoint) {
        (Some(p), None) => Source::File(io::read_batch(p)?),
        (None, Some(p)) => Source::Model(Box::new(Checkpoint::load(p)?)),
        _ => bail!(UsageError("give exactly one of --a or --checkpoint".into())),
    };
    let constraint: Option<ConstraintSet> = match (&a.constraint, cfg.constraint()?) {
        (Some(p), _) => Some(io::load_constraint(p)?),
        (None, Some(c)) => Some(c),
        (None, None) => match &source {
            Source::File(b) => b.constraint().map(|c| c.as_ref().clone()),
            Source::Model(ck) => Some(ck.constraint.clone()),
        },
    };
    let n_gen = match &source {
        Source::File(b) => b.len(),
        Source::Model(_) => reference.len(),
    };
    let dim = match &source {
        Source::File(b) => b.dim(),
        Source::Model(ck) => ck.constraint.dim(),
    };
    check_dims(dim, reference.dim())?;
    if let Some(c) = &constraint {
        check_dims(dim, c.dim())?;
    }

    let mut trials = Vec::with_capacity(a.trials);
    let mut first_generated: Option<Array2<f64>> = None;
    for k in 0..a.trials {
        let trial_seed = seed + k as u64;
        let generated = match &source {
            Source::File(b) => b.data().clone(),
            Source::Model(ck) => pipeline::sample_primal(ck, n_gen, trial_seed)?.into_data(),
        };
        trials.push(evaluate_pair(
            generated.view(),
            reference.data().view(),
            constraint.as_ref(),
            &mc,
            trial_seed,
        )?);
        if first_generated.is_none() {
            first_generated = Some(generated);
        }
    }
    let report = MetricReport::from_trials(trials, n_gen, mc)?;
    let mut value = serde_json::to_value(&report)?;
    value["inputs"] = json!({
        "a": a.a,
        "checkpoint": a.checkpoint,
        "b": a.b,
        "constraint": constraint.as_ref().map(|c| ConstraintDoc::describe(c, None)),
        "seed": seed,
    });
    write_json_out(a.out.as_deref().or(cfg.output.as_deref()), &value)?;

    if let (Some(bins), Some(path)) = (a.hist_bins, &a.hist_out) {
        let gen = first_generated.expect("at least one trial");
        write_histograms(path, bins, &gen, reference.data())?;
    }
    Ok(())
}

/// Long-format CSV of both samples binned on a shared grid over the first
/// two coordinates.
fn write_histograms(path: &Path, bins: usize, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if bins == 0 {
        bail!(UsageError("--hist-bins must be at least 1".into()));
    }
    if a.ncols() < 2 {
        bail!(UsageError("histograms need at least two columns".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for x in [a, b] {
        for row in x.slice(s![.., 0..2]).outer_iter() {
            for k in 0..2 {
                if row[k].is_finite() {
                    lo[k] = lo[k].min(row[k]);
                    hi[k] = hi[k].max(row[k]);
                }
            }
        }
    }
    for k in 0..2 {
        if !lo[k].is_finite() {
            (lo[k], hi[k]) = (0.0, 1.0);
        }
        // widen so the maximum falls inside the half-open range
        let pad = 1e-9 * (hi[k] - lo[k]).abs().max(1.0);
        hi[k] += pad;
    }
    let ha = metrics::histogram2d(a.view(), bins, lo, hi)?;
    let hb = metrics::histogram2d(b.view(), bins, lo, hi)?;
    let w = [(hi[0] - lo[0]) / bins as f64, (hi[1] - lo[1]) / bins as f64];
    let mut text = String::from("ix,iy,x_center,y_center,count_a,count_b\n");
    for i in 0..bins {
        for j in 0..bins {
            let cx = lo[0] + (i as f64 + 0.5) * w[0];
            let cy = lo[1] + (j as f64 + 0.5) * w[1];
            text.push_str(&format!("{i},{j},{cx:?},{cy:?},{},{}\n", ha[[i, j]], hb[[i, j]]));
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct ElboSummary {
    checkpoint: PathBuf,
    checkpoint_step: usize,
    data: PathBuf,
    n_rows: usize,
    n_failed: usize,
    /// Mean bound on `−log p(x)` in nats over rows that succeeded; lower is better.
    mean_total: Option<f64>,
    min_total: Option<f64>,
    max_total: Option<f64>,
    n_mc: usize,
    estimator: ElboEstimator,
    seed: u64,
}

fn elbo(cfg: &RunConfig, a: ElboArgs) -> Result<()> {
    let out = cfg.output(a.out.clone(), "elbo")?;
    let seed = seed_or(a.seed, cfg);
    if a.n_mc == 0 {
        bail!(UsageError("--n-mc must be at least 1".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let x = io::read_csv(&a.data)?;
    check_dims(x.ncols(), ck.constraint.dim())?;
    let config = ElboConfig {
        n_mc: a.n_mc,
        estimator: match a.estimator {
            EstimatorArg::ForwardChain => ElboEstimator::ForwardChain,
            EstimatorArg::Independent => ElboEstimator::Independent,
        },
    };
    let rows = pipeline::checkpoint_elbo(&ck, &x, &config, seed)?;

    let mut text = String::from("index,total,log_det_hessian,prior_kl,diffusion_kl,decoder_nll,error\n");
    let mut ok = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        match r {
            Ok(t) => {
                ok.push(t.total);
                text.push_str(&format!(
                    "{i},{:?},{:?},{:?},{:?},{:?},\n",
                    t.total, t.log_det_hessian, t.prior_kl, t.diffusion_kl, t.decoder_nll
                ));
            }
            Err(e) => {
                let msg = e.to_string().replace('"', "'");
                text.push_str(&format!("{i},,,,,,\"{msg}\"\n"));
            }
        }
    }
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;

    let n_failed = rows.len() - ok.len();
    let summary = ElboSummary {
        checkpoint: a.checkpoint.clone(),
        checkpoint_step: ck.step,
        data: a.data.clone(),
        n_rows: rows.len(),
        n_failed,
        mean_total: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
        min_total: ok.iter().copied().reduce(f64::min),
        max_total: ok.iter().copied().reduce(f64::max),
        n_mc: a.n_mc,
        estimator: config.estimator,
        seed,
    };
    io::write_json(&companion(&out, "summary.json"), &summary)?;
    if n_failed > 0 {
        bail!("{n_failed} of {} rows have no finite bound; see {}", rows.len(), out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectReport {
    key: PathBuf,
    data: PathBuf,
    n_rows: usize,
    n_detected: usize,
    rows: Vec<watermark::DetectionResult>,
}

fn watermark_cmd(cfg: &RunConfig, w: WatermarkCommand) -> Result<()> {
    match w {
        WatermarkCommand::Keygen { seed, m, d, b, out } => {
            let out = cfg.output(out, "watermark keygen")?;
            let key = watermark::keygen(seed_or(seed, cfg), m, d, b)?;
            key.save(&out)?;
            eprintln!("wrote key with {m} tokens in R^{d} to {}", out.display());
        }
        WatermarkCommand::Embed { key, data, out } => {
            let out = cfg.output(out, "watermark embed")?;
            let k = WatermarkKey::load(&key)?;
            let x = io::read_csv(&data)?;
            check_dims(x.ncols(), k.dim())?;
            let projected = watermark::project_batch(&k, x.view())?;
            let constraint: ConstraintSet = k.constraint()?.into();
            let batch = SampleBatch::primal(projected, Arc::new(constraint))?;
            io::write_batch(&out, &batch, json!({ "key": key, "source": data }))?;
        }
        WatermarkCommand::Detect { key, data, out } => {
            let k = WatermarkKey::load(&key)?;
            let x = io::read_csv(&data)?;
            check_dims(x.ncols(), k.dim())?;
            let rows: Vec<_> = x
                .outer_iter()
                .map(|r| watermark::detect(&k, &r.to_vec()))
                .collect::<mdm_core::Result<_>>()?;
            let n_detected = rows.iter().filter(|r| r.detected).count();
            let n_rows = rows.len();
            if let Some(p) = out.as_deref() {
                io::write_json(
                    p,
                    &DetectReport {
                        key,
                        data,
                        n_rows,
                        n_detected,
                        rows,
                    },
                )?;
            }
            println!("{n_detected}/{n_rows} samples carry the mark");
            if n_detected < n_rows {
                return Err(DetectionFailed(n_rows - n_detected).into());
            }
        }
        WatermarkCommand::FpRate { key, n, seed, out } => {
            let k = WatermarkKey::load(&key)?;
            let rate = watermark::fp_rate_gaussian(&k, n, seed_or(seed, cfg))?;
            let mut value = serde_json::to_value(&rate)?;
            value["m"] = json!(k.n_tokens());
            value["d"] = json!(k.dim());
            value["b"] = json!(k.bound());
            value["z_score"] = json!(rate.z_score());
            write_json_out(out.as_deref(), &value)?;
        }
    }
    Ok(())
}
