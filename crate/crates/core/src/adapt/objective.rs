use crate::error::{invalid, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::losses::{
    calibrated_pseudo_label, cmer_loss, compute_disc_report, iicl_loss, pmgfa_loss, total_loss, DiscReport, LossBreakdown,
};
use crate::model::{BoundModel, Modality};
use crate::scalar::Scalar;
use crate::stats::{batch_stats, disc, stack_rows, SourceStatsBank};

/// One batch of unlabeled two-modality inputs, each sample `m × input_dim`.
///
/// Deliberately carries no labels: everything the adaptation loop sees goes
/// through this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub audio: Vec<Tensor<T>>,
    pub video: Vec<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(audio: Vec<Tensor<T>>, video: Vec<Tensor<T>>) -> Result<Self> {
        if audio.len() != video.len() {
            return Err(invalid(format!("batch has {} audio and {} video samples", audio.len(), video.len())));
        }
        Ok(Self { audio, video })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &[Tensor<T>] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau0: f64,
    pub d0: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Exchange the two recombination weights (ablation).
    pub swap_lambda: bool,
    /// Multipliers on the alignment, recombination and contrastive terms.
    /// All ones gives the plain sum.
    pub weights: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau0: 0.2, d0: 5.0, tau: 0.07, swap_lambda: false, weights: [1.0; 3] }
    }
}

/// Quantities that enter the objective without a gradient path.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached<T> {
    pub report: DiscReport<T>,
    /// `B × C` calibrated pseudo-labels.
    pub pseudo: Tensor<T>,
}

/// Handles and values of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    /// `B × C` complete-pair logits.
    pub logits: Tensor<T>,
    pub detached: Detached<T>,
    pub pmgfa: Var,
    pub cmer: Var,
    pub iicl: Var,
    pub total: Var,
    pub breakdown: LossBreakdown<T>,
}

/// Builds the full adaptation objective for a batch and its masked copy.
///
/// When `pinned` is given its report and pseudo-labels are used as-is instead
/// of being recomputed; this keeps finite-difference probes consistent with
/// the analytic gradient, which treats them as constants.
pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    bank: &SourceStatsBank<T>,
    batch: &Batch<T>,
    masked: &Batch<T>,
    cfg: &LossConfig,
    pinned: Option<&Detached<T>>,
) -> Result<Objective<T>> {
    let b = batch.len();
    if b < 2 || masked.len() != b {
        return Err(invalid(format!("objective needs a batch of at least 2 with a matching masked copy, got {b}")));
    }
    let n = bound.config.layers;
    let nj = bound.config.joint_layers;
    let mut enc_pooled = [vec![Vec::with_capacity(b); n], vec![Vec::with_capacity(b); n]];
    let mut joint_pooled = vec![Vec::with_capacity(b); nj];
    let mut logits = Vec::with_capacity(b);
    let (mut y_amv, mut y_avm) = (Vec::with_capacity(b), Vec::with_capacity(b));
    let (mut za, mut zv) = (Vec::with_capacity(b), Vec::with_capacity(b));

    for j in 0..b {
        let xa = tape.constant(batch.audio[j].clone());
        let xv = tape.constant(batch.video[j].clone());
        let xam = tape.constant(masked.audio[j].clone());
        let xvm = tape.constant(masked.video[j].clone());
        let ea = bound.encode(tape, Modality::Audio, xa, true)?;
        let ev = bound.encode(tape, Modality::Video, xv, true)?;
        let eam = bound.encode(tape, Modality::Audio, xam, true)?;
        let evm = bound.encode(tape, Modality::Video, xvm, true)?;
        for (dst, src) in enc_pooled.iter_mut().zip([&ea.pooled, &ev.pooled]) {
            for (layer, &z) in dst.iter_mut().zip(src) {
                layer.push(z);
            }
        }

        let full = bound.fuse_and_classify(tape, ea.last(), ev.last())?;
        for (layer, &z) in joint_pooled.iter_mut().zip(&full.pooled) {
            layer.push(tape.value(z).clone());
        }
        logits.push(tape.value(full.logits).clone());

        let amv = bound.fuse_and_classify(tape, eam.last(), ev.last())?;
        y_amv.push(tape.softmax(amv.logits)?);
        let avm = bound.fuse_and_classify(tape, ea.last(), evm.last())?;
        y_avm.push(tape.softmax(avm.logits)?);

        za.push(bound.unimodal(tape, ea.last())?.last_pooled());
        zv.push(bound.unimodal(tape, ev.last())?.last_pooled());
    }

    let [audio_layers, video_layers] = enc_pooled;
    let (da, dv, pmgfa) = pmgfa_loss(tape, bank, &audio_layers, &video_layers)?;
    let logits = stack_rows(&logits)?;

    let detached = match pinned {
        Some(p) => p.clone(),
        None => {
            let target = joint_pooled.iter().map(|rows| batch_stats(&stack_rows(rows)?)).collect::<Result<Vec<_>>>()?;
            let disc_j = disc(&bank.joint, &target)?;
            let mut report =
                compute_disc_report(tape.item(da), tape.item(dv), disc_j, T::of(cfg.tau0), T::of(cfg.d0))?;
            if cfg.swap_lambda {
                report = report.swapped();
            }
            let pseudo = calibrated_pseudo_label(&logits, report.ada_tp)?;
            Detached { report, pseudo }
        }
    };

    let y_amv = tape.stack(&y_amv)?;
    let y_avm = tape.stack(&y_avm)?;
    let cmer = cmer_loss(tape, y_amv, y_avm, &detached.pseudo, &detached.report)?;
    let iicl = iicl_loss(tape, &za, &zv, T::of(cfg.tau))?;
    let (total, breakdown) = if cfg.weights == [1.0; 3] {
        total_loss(tape, pmgfa, cmer, iicl)?
    } else {
        let [wp, wc, wi] = cfg.weights.map(T::of);
        let terms = [tape.scale(pmgfa, wp)?, tape.scale(cmer, wc)?, tape.scale(iicl, wi)?];
        let (total, _) = total_loss(tape, terms[0], terms[1], terms[2])?;
        (total, LossBreakdown::new(tape.item(pmgfa), tape.item(cmer), tape.item(iicl)))
    };
    Ok(Objective { logits, detached, pmgfa, cmer, iicl, total, breakdown })
}
