use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{objective, Batch, LossConfig, Objective};
use crate::error::{invalid, Error, Result};
use crate::grad::{analytic_gradients, check_against, GradCheck, Tape, Tensor, Var};
use crate::model::{mask_tokens, Binding, MaskSpec, Modality, ModelBundle, ModelConfig};
use crate::scalar::Scalar;
use crate::stats::{precompute_source_bank, SourceStatsBank};

/// Central-difference step used by the prompt gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One term of the adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Pmgfa,
    Cmer,
    Iicl,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Pmgfa, LossTerm::Cmer, LossTerm::Iicl, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Pmgfa => "pmgfa",
            LossTerm::Cmer => "cmer",
            LossTerm::Iicl => "iicl",
            LossTerm::Total => "total",
        }
    }

    fn pick(self, o: &Objective<impl Scalar>) -> Var {
        match self {
            LossTerm::Pmgfa => o.pmgfa,
            LossTerm::Cmer => o.cmer,
            LossTerm::Iicl => o.iicl,
            LossTerm::Total => o.total,
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| invalid(format!("unknown loss term {s:?}")))
    }
}

/// Result of checking one loss term against every prompt entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGradCheck {
    pub term: LossTerm,
    pub check: GradCheck,
}

/// Model, bank and a batch with its masked copy for gradient checks.
#[derive(Clone, Debug)]
pub struct GradFixture<T> {
    pub model: ModelBundle<T>,
    pub bank: SourceStatsBank<T>,
    pub batch: Batch<T>,
    pub masked: Batch<T>,
}

fn random_tokens<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(&[cfg.tokens, cfg.input_dim], |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Seeded fixture for `cfg`: random weights and prompts, a bank from 8 random
/// samples and a batch of `batch` further samples masked at ratio one half.
pub fn grad_fixture<T: Scalar>(cfg: ModelConfig, batch: usize, seed: u64) -> Result<GradFixture<T>> {
    if batch < 2 {
        return Err(invalid(format!("gradient fixture needs a batch of at least 2, got {batch}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelBundle::<T>::init(cfg, &mut rng)?;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Tensor<T>> { (0..n).map(|_| random_tokens(&cfg, rng)).collect() };
    let (sa, sv) = (draw(8, &mut rng), draw(8, &mut rng));
    let bank = precompute_source_bank(&model, &sa, &sv, true)?;
    let batch = Batch::new(draw(batch, &mut rng), draw(batch, &mut rng))?;
    let spec = MaskSpec { ratio: 0.5, seed };
    let mask = |xs: &[Tensor<T>], rng: &mut ChaCha8Rng| xs.iter().map(|x| mask_tokens(x, &spec, rng)).collect::<Result<Vec<_>>>();
    let masked = Batch::new(mask(&batch.audio, &mut rng)?, mask(&batch.video, &mut rng)?)?;
    Ok(GradFixture { model, bank, batch, masked })
}

/// Compares the analytic gradient of each objective term with respect to
/// every prompt entry against central differences of step `step`.
///
/// The detached report and pseudo-labels are computed once at the current
/// prompts and held fixed. `corrupt`, when given, is added to the first
/// analytic gradient entry before comparison, which lets callers confirm the
/// check is able to fail.
pub fn prompt_gradcheck<T: Scalar>(
    fx: &GradFixture<T>,
    cfg: &LossConfig,
    terms: &[LossTerm],
    step: T,
    corrupt: Option<f64>,
) -> Result<Vec<PromptGradCheck>> {
    let n = fx.model.config.layers;
    if fx.model.config.prompts == 0 {
        return Err(invalid("gradient check needs at least one prompt per layer"));
    }
    let pinned = {
        let mut tape = Tape::new();
        let bound = fx.model.bind(&mut tape, Binding::Frozen);
        objective(&mut tape, &bound, &fx.bank, &fx.batch, &fx.masked, cfg, None)?.detached
    };
    let params: Vec<Tensor<T>> = fx.model.prompts.get(Modality::Audio).iter().chain(fx.model.prompts.get(Modality::Video)).cloned().collect();

    terms
        .iter()
        .map(|&term| {
            let f = |tape: &mut Tape<T>, vars: &[Var]| -> Result<Var> {
                let mut bound = fx.model.bind(tape, Binding::Frozen);
                bound.audio.prompts = vars[..n].to_vec();
                bound.video.prompts = vars[n..].to_vec();
                let o = objective(tape, &bound, &fx.bank, &fx.batch, &fx.masked, cfg, Some(&pinned))?;
                Ok(term.pick(&o))
            };
            let mut analytic = analytic_gradients(&f, &params)?;
            if let Some(delta) = corrupt {
                analytic[0].data_mut()[0] += T::of(delta);
            }
            Ok(PromptGradCheck { term, check: check_against(f, &params, step, &analytic)? })
        })
        .collect()
}
