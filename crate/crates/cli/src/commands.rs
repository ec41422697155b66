use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use brimpr_core::adapt::{grad_fixture, prompt_gradcheck, run_stream, write_metrics_csv, LossTerm};
use brimpr_core::io::TensorFile;
use brimpr_core::model::{from_tensor_file, to_tensor_file, ModelConfig};
use brimpr_core::stats::{theorem1_closed_form, theorem1_monte_carlo};
use brimpr_core::synthdata::{
    gen_labeled, gen_stream, pretrain_source, push_dataset, push_task, read_task, LabeledSet, TASK_KEY,
};
use brimpr_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Relative tolerance of the theorem check.
pub const THEOREM_TOL: f64 = 0.05;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(Value, bool)> {
    let task = cfg.task_spec();
    let src = pretrain_source::<f64, _>(cfg.model, &task, &cfg.pretrain, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut f = to_tensor_file(&src.model, &src.bank);
    push_task(&mut f, &task);
    f.save(out)?;
    let report = json!({
        "checkpoint": out.display().to_string(),
        "seed": cfg.seed,
        "clean_test_acc": src.clean_test_acc,
        "epoch_loss": src.epoch_loss,
        "frozen_checksum": hex(&src.model.frozen_checksum()),
    });
    Ok((report, true))
}

pub struct AdaptOptions {
    pub checkpoint: PathBuf,
    pub continual: bool,
    pub no_adapt: bool,
    pub max_adapt_batches: Option<usize>,
    pub metrics: Option<PathBuf>,
}

pub fn adapt(cfg: &RunConfig, opts: &AdaptOptions) -> Result<(Value, bool)> {
    let file = TensorFile::load(&opts.checkpoint).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", opts.checkpoint.display())),
        other => other,
    })?;
    let (mut model, bank) = from_tensor_file::<f64>(&file)?;
    let task = if file.contains(TASK_KEY) { read_task(&file)? } else { cfg.task_spec() };
    task.check_model(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let stream = gen_stream::<f64>(&task, &cfg.stream)?;
    let mut ac = cfg.adapt_config();
    ac.update = !opts.no_adapt;
    ac.max_adapt_batches = opts.max_adapt_batches;
    ac.continual = opts.continual.then_some(cfg.detector);
    let log = run_stream(&mut model, &bank, &stream.batches, Some(&stream.labels), &ac)?;

    if let Some(path) = &opts.metrics {
        let mut w = BufWriter::new(File::create(path)?);
        write_metrics_csv(&log.records, &mut w)?;
    }
    let mut report = serde_json::to_value(&log.summary).expect("summary serializes");
    report["metrics"] = json!(opts.metrics.as_ref().map(|p| p.display().to_string()));
    Ok((report, true))
}

/// `G Gᵀ / (9d) + 0.1 I` with `G` uniform on `[-3, 3]`.
fn random_psd(d: usize, rng: &mut impl Rng) -> Tensor {
    let g: Vec<f64> = (0..d * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    Tensor::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        (0..d).map(|l| g[i * d + l] * g[j * d + l]).sum::<f64>() / (9.0 * d as f64) + if i == j { 0.1 } else { 0.0 }
    })
}

pub fn verify_theorem(d: usize, n: usize, trials: usize, random: bool, seed: u64) -> Result<(Value, bool)> {
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!("--trials must be at least 1000, got {trials}")));
    }
    if d == 0 || n < 2 {
        return Err(Error::InvalidArgument(format!("need d >= 1 and n >= 2, got d = {d}, n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = if random { random_psd(d, &mut rng) } else { Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 }) };
    let (cf, cd) = theorem1_closed_form(sigma.data(), d, n)?;
    let mc = theorem1_monte_carlo(&sigma, n, trials, &mut rng)?;
    let rel = |emp: f64, exact: f64| if exact == 0.0 { emp.abs() } else { (emp / exact - 1.0).abs() };
    let (ef, ed) = (rel(mc.frobenius_mse, cf), rel(mc.diag_mse, cd));
    let pass = ef < THEOREM_TOL && ed < THEOREM_TOL;
    let report = json!({
        "d": d,
        "n": n,
        "trials": trials,
        "sigma": if random { "random-psd" } else { "identity" },
        "seed": seed,
        "closed_form": { "frobenius_mse": cf, "diag_mse": cd },
        "empirical": { "frobenius_mse": mc.frobenius_mse, "diag_mse": mc.diag_mse },
        "relative_error": { "frobenius_mse": ef, "diag_mse": ed },
        "tolerance": THEOREM_TOL,
        "pass": pass,
    });
    Ok((report, pass))
}

pub fn gradcheck(seed: u64, batch: usize, step: f64, tol: f64, corrupt: Option<f64>) -> Result<(Value, bool)> {
    let fx = grad_fixture::<f64>(ModelConfig::tiny(), batch, seed)?;
    let checks = prompt_gradcheck(&fx, &Default::default(), &LossTerm::ALL, step, corrupt)?;
    let pass = checks.iter().all(|c| c.check.passes(tol));
    let terms: Vec<Value> = checks
        .iter()
        .map(|c| {
            json!({
                "term": c.term.name(),
                "max_rel_error": c.check.max_rel_error,
                "worst": [c.check.worst.0, c.check.worst.1],
                "entries": c.check.entries,
                "pass": c.check.passes(tol),
            })
        })
        .collect();
    let report = json!({
        "model": "tiny",
        "seed": seed,
        "batch": batch,
        "step": step,
        "tolerance": tol,
        "corrupted": corrupt.is_some(),
        "terms": terms,
        "pass": pass,
    });
    Ok((report, pass))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(Value, bool)> {
    let task = cfg.task_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = gen_labeled::<f64, _>(&task, cfg.pretrain.train_samples, &mut rng)?;
    let test = gen_labeled::<f64, _>(&task, cfg.pretrain.test_samples, &mut rng)?;
    let s = gen_stream::<f64>(&task, &cfg.stream)?;
    let stream = LabeledSet {
        audio: s.batches.iter().flat_map(|b| b.audio.iter().cloned()).collect(),
        video: s.batches.iter().flat_map(|b| b.video.iter().cloned()).collect(),
        labels: s.labels.concat(),
    };
    let mut f = TensorFile::new();
    push_task(&mut f, &task);
    for (name, set) in [("train", &train), ("test", &test), ("stream", &stream)] {
        push_dataset(&mut f, name, set)?;
    }
    f.save(out)?;
    let report = json!({
        "data": out.display().to_string(),
        "seed": cfg.seed,
        "splits": { "train": train.len(), "test": test.len(), "stream": stream.len() },
        "stream_batch_size": cfg.stream.batch_size,
        "audio_schedule": cfg.stream.audio.to_string(),
        "video_schedule": cfg.stream.video.to_string(),
    });
    Ok((report, true))
}
