use rand::seq::SliceRandom;
use rand::Rng;

use super::task::{LabeledSet, Task, TaskSpec};
use crate::adapt::{AdamConfig, AdamState};
use crate::error::{invalid, Error, Result};
use crate::grad::{Tape, Tensor};
use crate::losses::iicl_loss;
use crate::model::{argmax, Binding, Modality, ModelBundle, ModelConfig, PromptSet};
use crate::scalar::Scalar;
use crate::stats::{batch_stats, disc, stack_rows, BatchFeatures, SourceStatsBank, precompute_source_bank};

/// Supervised source-training settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Unlabeled held-out samples used for the source statistics bank.
    pub bank_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the cross-modal contrastive term on unimodal features
    /// (0 gives plain cross-entropy).
    pub contrastive_weight: f64,
    pub contrastive_tau: f64,
    /// Probability that a training sample is encoded with freshly drawn
    /// random prompts, so that the trained network tolerates prompt tokens.
    pub prompt_augment: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 12, train_samples: 1000, test_samples: 500, bank_samples: 32, batch_size: 32, lr: 3e-3, contrastive_weight: 1.0, contrastive_tau: 0.1, prompt_augment: 0.5 }
    }
}

/// A trained source model together with the data it was evaluated on.
#[derive(Clone, Debug)]
pub struct SourceModel<T> {
    pub model: ModelBundle<T>,
    pub bank: SourceStatsBank<T>,
    /// The samples the bank was computed from (labels unused).
    pub bank_set: LabeledSet<T>,
    pub test_set: LabeledSet<T>,
    pub epoch_loss: Vec<f64>,
    pub clean_test_acc: f64,
}

/// Fraction of `set` classified correctly.
pub fn accuracy<T: Scalar>(model: &ModelBundle<T>, set: &LabeledSet<T>, use_prompts: bool) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let logits = model.predict_logits(&set.audio, &set.video, use_prompts)?;
    let hits = logits.iter().zip(&set.labels).filter(|(l, &y)| argmax(l.data()) == y).count();
    Ok(hits as f64 / set.len() as f64)
}

fn minibatch_loss<T: Scalar>(
    model: &ModelBundle<T>,
    set: &LabeledSet<T>,
    idx: &[usize],
    prompted: &[bool],
    cfg: &PretrainConfig,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Binding::Weights);
    let c = model.config.classes;
    let contrastive = cfg.contrastive_weight > 0.0 && idx.len() > 1;
    let mut terms = Vec::with_capacity(idx.len());
    let (mut za, mut zv) = (Vec::new(), Vec::new());
    for (&i, &p) in idx.iter().zip(prompted) {
        let a = tape.constant(set.audio[i].clone());
        let v = tape.constant(set.video[i].clone());
        let ea = bound.encode(&mut tape, Modality::Audio, a, p)?;
        let ev = bound.encode(&mut tape, Modality::Video, v, p)?;
        let out = bound.fuse_and_classify(&mut tape, ea.last(), ev.last())?;
        let lp = tape.log_softmax(out.logits)?;
        let onehot = tape.constant(Tensor::from_fn(&[c], |k| if k == set.labels[i] { T::one() } else { T::zero() }));
        let picked = tape.mul(lp, onehot)?;
        terms.push(tape.sum(picked)?);
        if contrastive {
            za.push(bound.unimodal(&mut tape, ea.last())?.last_pooled());
            zv.push(bound.unimodal(&mut tape, ev.last())?.last_pooled());
        }
    }
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked)?;
    let mut loss = tape.scale(total, -T::one() / T::of_usize(idx.len()))?;
    if contrastive {
        let c = iicl_loss(&mut tape, &za, &zv, T::of(cfg.contrastive_tau))?;
        let c = tape.scale(c, T::of(cfg.contrastive_weight))?;
        loss = tape.add(loss, c)?;
    }
    let grads = tape.backward(loss)?;
    Ok((tape.item(loss), bound.frozen_vars().iter().map(|&v| grads.wrt(v).clone()).collect()))
}

/// Trains every frozen-model weight by cross-entropy on clean task data,
/// optionally together with a cross-modal contrastive term that aligns the
/// two unimodal representations of each sample and with random-prompt
/// augmentation, then draws fresh prompts and computes the source bank of the
/// deployed model (frozen weights plus those prompts) from held-out unlabeled
/// samples.
pub fn pretrain_source<T: Scalar, R: Rng + ?Sized>(
    model_cfg: ModelConfig,
    task_spec: &TaskSpec,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<SourceModel<T>> {
    task_spec.check_model(&model_cfg)?;
    if cfg.bank_samples < 2 || cfg.batch_size == 0 || cfg.train_samples == 0 {
        return Err(invalid(format!("pretraining needs bank_samples >= 2 and positive sizes, got {cfg:?}")));
    }
    if !(0.0..=1.0).contains(&cfg.prompt_augment) {
        return Err(invalid(format!("prompt_augment must lie in [0, 1], got {}", cfg.prompt_augment)));
    }
    let task = Task::new(*task_spec)?;
    let train = task.gen_labeled::<T, _>(cfg.train_samples, rng);
    let test_set = task.gen_labeled::<T, _>(cfg.test_samples, rng);
    let bank_set = task.gen_labeled::<T, _>(cfg.bank_samples, rng);

    let mut model = ModelBundle::<T>::init(model_cfg, rng)?;
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.frozen_named().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let prompted: Vec<bool> = chunk.iter().map(|_| rng.random_bool(cfg.prompt_augment)).collect();
            if prompted.iter().any(|&p| p) {
                model.prompts = PromptSet::init(&model_cfg, rng);
            }
            let (loss, grads) = match minibatch_loss(&model, &train, chunk, &prompted, cfg) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss.as_f64() });
            }
            if !adam.update(&mut model.frozen_mut(), &grads)? {
                return Err(Error::Diverged { epoch, loss: loss.as_f64() });
            }
            sum += loss.as_f64() * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_loss.push(sum / count as f64);
    }

    model.prompts = PromptSet::init(&model_cfg, rng);
    let bank = precompute_source_bank(&model, &bank_set.audio, &bank_set.video, true)?;
    let clean_test_acc = accuracy(&model, &test_set, true)?;
    Ok(SourceModel { model, bank, bank_set, test_set, epoch_loss, clean_test_acc })
}

/// Expected `[Disc_a, Disc_v]` of a batch of `batch` samples drawn without
/// replacement from the bank samples, against the bank itself, with the
/// model's current prompts in place.
///
/// This is the discrepancy that finite-sample noise alone produces.
pub fn noise_floor<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    bank: &SourceStatsBank<T>,
    bank_set: &LabeledSet<T>,
    batch: usize,
    draws: usize,
    rng: &mut R,
) -> Result<[f64; 2]> {
    if batch < 2 || batch > bank_set.len() || draws == 0 {
        return Err(invalid(format!("noise floor needs 2 <= batch <= {} and draws > 0", bank_set.len())));
    }
    let f = BatchFeatures::collect(model, &bank_set.audio, &bank_set.video, true)?;
    let mut acc = [0.0; 2];
    for _ in 0..draws {
        let idx = rand::seq::index::sample(rng, bank_set.len(), batch).into_vec();
        for (k, (layers, source)) in [(&f.audio, &bank.audio), (&f.video, &bank.video)].into_iter().enumerate() {
            let target = layers
                .iter()
                .map(|rows| batch_stats(&stack_rows(&idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())?))
                .collect::<Result<Vec<_>>>()?;
            acc[k] += disc(source, &target)?.as_f64();
        }
    }
    Ok(acc.map(|a| a / draws as f64))
}
