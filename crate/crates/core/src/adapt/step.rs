use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{AdamConfig, AdamState};
use super::detector::ShiftDetector;
use super::objective::{objective, Batch, LossConfig};
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::losses::{DiscReport, LossBreakdown};
use crate::model::{argmax, mask_tokens, Binding, MaskSpec, Modality, ModelBundle};
use crate::scalar::Scalar;
use crate::stats::{stack_rows, SourceStatsBank};

/// Sliding-window detector settings for continual runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub window: usize,
    pub threshold: f64,
    pub eps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { window: 10, threshold: 5.0, eps: 1e-6 }
    }
}

/// Default prompt learning rate for desk-scale models.
pub const DESK_LR: f64 = 1e-3;

/// Everything that controls an adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub mask_ratio: f64,
    pub seed: u64,
    /// When false the loop only predicts (prompts stay as loaded).
    pub update: bool,
    /// Stop updating after this many batches; later batches are inference-only.
    pub max_adapt_batches: Option<usize>,
    /// Enables shift detection with prompt re-initialization.
    pub continual: Option<DetectorConfig>,
    /// Also evaluate the non-adapting model on the stream when labels are available.
    pub eval_source: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig { lr: DESK_LR, ..AdamConfig::default() },
            loss: LossConfig::default(),
            mask_ratio: 0.5,
            seed: 0,
            update: true,
            max_adapt_batches: None,
            continual: None,
            eval_source: true,
        }
    }
}

/// Mutable state carried across steps.
#[derive(Clone, Debug)]
pub struct AdaptState<T> {
    /// Slots: audio prompt layers, then video prompt layers.
    pub adam: AdamState<T>,
    pub detector: Option<ShiftDetector>,
    pub step: usize,
    mask_rng: ChaCha8Rng,
    reset_rng: ChaCha8Rng,
}

impl<T: Scalar> AdaptState<T> {
    pub fn new(model: &ModelBundle<T>, cfg: &AdaptConfig) -> Self {
        let params = model.prompts.audio.iter().chain(&model.prompts.video);
        let mut reset_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        reset_rng.set_stream(1);
        Self {
            adam: AdamState::new(cfg.adam, params),
            detector: cfg.continual.map(|d| ShiftDetector::new(d.window, d.threshold, d.eps)),
            step: 0,
            mask_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            reset_rng,
        }
    }
}

/// Log entry of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub batch_idx: usize,
    pub batch_size: usize,
    /// Filled in by the evaluator when labels exist.
    pub acc_batch: Option<f64>,
    pub acc_cum: Option<f64>,
    pub losses: Option<LossBreakdown<f64>>,
    pub disc: Option<DiscReport<f64>>,
    pub shift: [bool; 2],
    /// Batch too small for statistics: predictions only.
    pub inference_only: bool,
    /// An update was attempted and skipped because of non-finite values.
    pub update_skipped: bool,
    pub updated: bool,
}

fn to_f64<T: Scalar>(r: &DiscReport<T>) -> DiscReport<f64> {
    DiscReport {
        disc_a: r.disc_a.as_f64(),
        disc_v: r.disc_v.as_f64(),
        disc_j: r.disc_j.as_f64(),
        lambda_a: r.lambda_a.as_f64(),
        lambda_v: r.lambda_v.as_f64(),
        ada_tp: r.ada_tp.as_f64(),
    }
}

/// Redraws the prompts of modality `m` and restarts their optimizer slots.
pub fn reset_prompts<T: Scalar>(model: &mut ModelBundle<T>, m: Modality, state: &mut AdaptState<T>) {
    let cfg = model.config;
    model.prompts.reinit(&cfg, m, &mut state.reset_rng);
    let n = model.prompts.audio.len();
    let range = match m {
        Modality::Audio => 0..n,
        Modality::Video => n..state.adam.slots.len(),
    };
    for slot in &mut state.adam.slots[range] {
        slot.reset();
    }
}

fn predict_only<T: Scalar>(model: &ModelBundle<T>, batch: &Batch<T>) -> Result<Vec<usize>> {
    Ok(model.predict_logits(&batch.audio, &batch.video, true)?.iter().map(|l| argmax(l.data())).collect())
}

/// One online step: predict with the current prompts, then (optionally)
/// take a single optimizer step on the prompts.
pub fn adapt_step<T: Scalar>(
    model: &mut ModelBundle<T>,
    bank: &SourceStatsBank<T>,
    batch: &Batch<T>,
    cfg: &AdaptConfig,
    state: &mut AdaptState<T>,
) -> Result<(Vec<usize>, StepRecord)> {
    let idx = state.step;
    state.step += 1;
    let mut rec = StepRecord {
        batch_idx: idx,
        batch_size: batch.len(),
        acc_batch: None,
        acc_cum: None,
        losses: None,
        disc: None,
        shift: [false; 2],
        inference_only: false,
        update_skipped: false,
        updated: false,
    };
    if batch.len() < 2 {
        rec.inference_only = true;
        return Ok((predict_only(model, batch)?, rec));
    }

    let spec = MaskSpec { ratio: cfg.mask_ratio, seed: cfg.seed };
    let mask = |xs: &[_], rng: &mut ChaCha8Rng| xs.iter().map(|x| mask_tokens(x, &spec, rng)).collect::<Result<Vec<_>>>();
    let masked = Batch { audio: mask(&batch.audio, &mut state.mask_rng)?, video: mask(&batch.video, &mut state.mask_rng)? };

    let update = cfg.update && cfg.max_adapt_batches.is_none_or(|k| idx < k);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, if update { Binding::Prompts } else { Binding::Frozen });
    let obj = match objective(&mut tape, &bound, bank, batch, &masked, &cfg.loss, None) {
        Ok(o) => o,
        Err(Error::NonFinite(_)) => {
            rec.update_skipped = update;
            return Ok((predict_only(model, batch)?, rec));
        }
        Err(e) => return Err(e),
    };
    let (rows, _) = obj.logits.dims2();
    let preds = (0..rows).map(|r| argmax(obj.logits.row(r))).collect();
    let b = obj.breakdown;
    rec.losses = Some(LossBreakdown { pmgfa: b.pmgfa.as_f64(), cmer: b.cmer.as_f64(), iicl: b.iicl.as_f64(), total: b.total.as_f64() });
    let report = to_f64(&obj.detached.report);
    rec.disc = Some(report);

    if update {
        let applied = match tape.backward(obj.total) {
            Ok(grads) => {
                let vars: Vec<_> = bound.prompt_vars(Modality::Audio).iter().chain(bound.prompt_vars(Modality::Video)).copied().collect();
                let g: Vec<_> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
                let mut params: Vec<_> = model.prompts.audio.iter_mut().chain(model.prompts.video.iter_mut()).collect();
                state.adam.update(&mut params, &g)?
            }
            Err(Error::NonFinite(_)) => false,
            Err(e) => return Err(e),
        };
        rec.updated = applied;
        rec.update_skipped = !applied;
    }

    if let Some(det) = state.detector.as_mut() {
        rec.shift = det.detect(report.disc_a, report.disc_v);
        for (m, fired) in Modality::BOTH.into_iter().zip(rec.shift) {
            if fired {
                reset_prompts(model, m, state);
            }
        }
    }
    Ok((preds, rec))
}

/// Aggregate figures of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub batches: usize,
    pub samples: usize,
    /// The model as loaded (frozen weights and initial prompts), never updated.
    pub acc_source_frozen: Option<f64>,
    /// The frozen weights with prompts removed.
    pub acc_source_promptless: Option<f64>,
    pub acc_adapted: Option<f64>,
    /// Mean of `Disc_a + Disc_v` over the first fifth of the batches with statistics.
    pub mean_disc_first_20pct: f64,
    pub mean_disc_last_20pct: f64,
    pub shifts_detected: usize,
    pub shifts_a: usize,
    pub shifts_v: usize,
    pub skipped_updates: usize,
    pub threads: usize,
    pub frozen_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// Predicted class per sample, batch by batch.
    pub predictions: Vec<Vec<usize>>,
    pub summary: RunSummary,
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / preds.len().max(1) as f64
}

/// Fraction of correct predictions of the non-adapting model over labeled
/// batches, with its current prompts or with none.
pub fn evaluate_source<T: Scalar>(
    model: &ModelBundle<T>,
    batches: &[Batch<T>],
    labels: &[Vec<usize>],
    use_prompts: bool,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (batch, y) in batches.iter().zip(labels) {
        let logits = model.predict_logits(&batch.audio, &batch.video, use_prompts)?;
        hits += logits.iter().zip(y).filter(|(l, &y)| argmax(l.data()) == y).count();
        total += y.len();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Processes the stream in order. `labels`, when present, is used only to
/// score predictions after each step.
pub fn run_stream<T: Scalar>(
    model: &mut ModelBundle<T>,
    bank: &SourceStatsBank<T>,
    batches: &[Batch<T>],
    labels: Option<&[Vec<usize>]>,
    cfg: &AdaptConfig,
) -> Result<RunLog> {
    if let Some(l) = labels {
        if l.len() != batches.len() || l.iter().zip(batches).any(|(y, b)| y.len() != b.len()) {
            return Err(Error::InvalidArgument("labels do not match the stream layout".into()));
        }
    }
    let (acc_source_frozen, acc_source_promptless) = match labels {
        Some(l) if cfg.eval_source && !batches.is_empty() => {
            (Some(evaluate_source(model, batches, l, true)?), Some(evaluate_source(model, batches, l, false)?))
        }
        _ => (None, None),
    };
    let mut state = AdaptState::new(model, cfg);
    let mut records = Vec::with_capacity(batches.len());
    let mut predictions = Vec::with_capacity(batches.len());
    let (mut hits, mut seen) = (0usize, 0usize);
    for (t, batch) in batches.iter().enumerate() {
        let (preds, mut rec) = adapt_step(model, bank, batch, cfg, &mut state)?;
        if let Some(l) = labels {
            let acc = accuracy(&preds, &l[t]);
            hits += preds.iter().zip(&l[t]).filter(|(p, y)| p == y).count();
            seen += preds.len();
            rec.acc_batch = Some(acc);
            rec.acc_cum = Some(hits as f64 / seen.max(1) as f64);
        }
        records.push(rec);
        predictions.push(preds);
    }

    let discs: Vec<f64> = records.iter().filter_map(|r| r.disc.map(|d| d.disc_a + d.disc_v)).collect();
    let k = (discs.len() as f64 * 0.2).ceil() as usize;
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let shifts_a = records.iter().filter(|r| r.shift[0]).count();
    let shifts_v = records.iter().filter(|r| r.shift[1]).count();
    let summary = RunSummary {
        batches: batches.len(),
        samples: batches.iter().map(Batch::len).sum(),
        acc_source_frozen,
        acc_source_promptless,
        acc_adapted: labels.filter(|_| seen > 0).map(|_| hits as f64 / seen as f64),
        mean_disc_first_20pct: mean(&discs[..k]),
        mean_disc_last_20pct: mean(&discs[discs.len() - k..]),
        shifts_detected: shifts_a + shifts_v,
        shifts_a,
        shifts_v,
        skipped_updates: records.iter().filter(|r| r.update_skipped).count(),
        threads: 1,
        frozen_checksum: hex(&model.frozen_checksum()),
    };
    Ok(RunLog { records, predictions, summary })
}

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str =
    "batch_idx,acc_batch,acc_cum,loss_total,loss_pmgfa,loss_cmer,loss_iicl,disc_a,disc_v,disc_j,lambda_a,ada_tp,shift_a,shift_v";

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

/// Writes one header row and one row per step; missing values are left empty.
pub fn write_metrics_csv(records: &[StepRecord], w: &mut impl std::io::Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let l = r.losses;
        let d = r.disc;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.batch_idx,
            fmt(r.acc_batch),
            fmt(r.acc_cum),
            fmt(l.map(|l| l.total)),
            fmt(l.map(|l| l.pmgfa)),
            fmt(l.map(|l| l.cmer)),
            fmt(l.map(|l| l.iicl)),
            fmt(d.map(|d| d.disc_a)),
            fmt(d.map(|d| d.disc_v)),
            fmt(d.map(|d| d.disc_j)),
            fmt(d.map(|d| d.lambda_a)),
            fmt(d.map(|d| d.ada_tp)),
            r.shift[0] as u8,
            r.shift[1] as u8,
        )?;
    }
    Ok(())
}

/// Stacks the per-sample logits of a batch into `B × C` (used by evaluators).
pub fn batch_logits<T: Scalar>(model: &ModelBundle<T>, batch: &Batch<T>, use_prompts: bool) -> Result<crate::grad::Tensor<T>> {
    stack_rows(&model.predict_logits(&batch.audio, &batch.video, use_prompts)?)
}
