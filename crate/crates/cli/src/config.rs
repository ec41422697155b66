//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use brimpr_core::adapt::{AdamConfig, AdaptConfig, DetectorConfig, LossConfig};
use brimpr_core::model::ModelConfig;
use brimpr_core::synthdata::{PretrainConfig, Schedule, StreamConfig, TaskSpec};
use brimpr_core::Error;

/// One documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    /// Published reference setting, when there is one.
    pub reference: Option<&'static str>,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str, reference: Option<&'static str>) -> Key {
    Key { name, default, doc, reference }
}

pub const KEYS: &[Key] = &[
    key("seed", "0", "pretraining draws, masks and prompt re-initialization (falls back to BRIMPR_SEED)", None),
    key("input_dim", "16", "raw token width", None),
    key("dim", "32", "model width", None),
    key("heads", "2", "attention heads", None),
    key("layers", "2", "transformer layers per modality encoder", None),
    key("joint_layers", "2", "transformer layers in the joint module", None),
    key("tokens", "8", "tokens per modality per sample", None),
    key("prompts", "10", "prompt tokens per encoder layer", Some("10")),
    key("classes", "5", "number of classes", None),
    key("mlp_hidden", "64", "hidden width of the block MLP", None),
    key("task_seed", "1", "seed of the task prototypes and mixing matrices", None),
    key("separation", "0.7", "class-signal scale of the task", None),
    key("noise", "0.56", "nuisance scale of the task", None),
    key("epochs", "12", "pretraining epochs", None),
    key("train_samples", "1000", "pretraining samples", None),
    key("test_samples", "500", "clean held-out samples for the source accuracy", None),
    key("bank_samples", "32", "unlabeled source samples behind the statistics bank", Some("32")),
    key("pretrain_batch", "32", "pretraining minibatch", None),
    key("pretrain_lr", "3e-3", "pretraining learning rate", None),
    key("contrastive_weight", "1.0", "weight of the cross-modal contrastive term in pretraining", None),
    key("contrastive_tau", "0.1", "temperature of that term", None),
    key("prompt_augment", "0.5", "probability of random prompts per pretraining sample", None),
    key("lr", "1e-3", "prompt learning rate (desk scale)", Some("1e-4")),
    key("beta1", "0.9", "Adam first-moment decay", None),
    key("beta2", "0.999", "Adam second-moment decay", None),
    key("adam_eps", "1e-8", "Adam denominator floor", None),
    key("mask_ratio", "0.5", "fraction of tokens masked for the recombination views", Some("0.5")),
    key("tau0", "0.2", "AdaTp range", Some("0.2")),
    key("d0", "5", "AdaTp midpoint", Some("5")),
    key("tau", "0.07", "contrastive temperature", Some("0.07")),
    key("swap_lambda", "false", "exchange the two recombination weights (ablation)", None),
    key("loss_weights", "1,1,1", "multipliers on alignment, recombination and contrastive terms", Some("1,1,1")),
    key("window", "10", "detector window", Some("10")),
    key("threshold", "5", "detector z-score threshold", Some("5")),
    key("detector_eps", "1e-6", "floor on the window standard deviation", None),
    key("batch_size", "16", "test batch size (desk scale)", Some("64")),
    key("batches", "100", "test batches per stream", None),
    key("stream_seed", "100", "seed of the test stream draws and corruption noise", None),
    key("audio_schedule", "gaussian-noise:5", "corruption schedule of modality a", None),
    key("video_schedule", "clean", "corruption schedule of modality v", None),
    key("checkpoint", "source.bmpr", "checkpoint path", None),
    key("metrics", "", "metrics CSV path (empty: none)", None),
    key("data", "data.bmpr", "dataset dump path", None),
];

/// Every setting a command may need, with defaults from [`KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub pretrain: PretrainConfig,
    pub adam: AdamConfig,
    pub mask_ratio: f64,
    pub loss: LossConfig,
    pub detector: DetectorConfig,
    pub stream: StreamConfig,
    pub checkpoint: PathBuf,
    pub metrics: Option<PathBuf>,
    pub data: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value.parse().map_err(|_| config_err(format!("{key}: cannot parse {value:?}")))
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            adam: AdamConfig::default(),
            mask_ratio: 0.0,
            loss: LossConfig::default(),
            detector: DetectorConfig::default(),
            stream: StreamConfig::default(),
            checkpoint: PathBuf::new(),
            metrics: None,
            data: PathBuf::new(),
        };
        for k in KEYS {
            c.set(k.name, k.default).expect("documented default parses");
        }
        c
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and unparsable values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "input_dim" => self.model.input_dim = num(key, v)?,
            "dim" => self.model.dim = num(key, v)?,
            "heads" => self.model.heads = num(key, v)?,
            "layers" => self.model.layers = num(key, v)?,
            "joint_layers" => self.model.joint_layers = num(key, v)?,
            "tokens" => self.model.tokens = num(key, v)?,
            "prompts" => self.model.prompts = num(key, v)?,
            "classes" => self.model.classes = num(key, v)?,
            "mlp_hidden" => self.model.mlp_hidden = num(key, v)?,
            "task_seed" => self.task.seed = num(key, v)?,
            "separation" => self.task.separation = num(key, v)?,
            "noise" => self.task.noise = num(key, v)?,
            "epochs" => self.pretrain.epochs = num(key, v)?,
            "train_samples" => self.pretrain.train_samples = num(key, v)?,
            "test_samples" => self.pretrain.test_samples = num(key, v)?,
            "bank_samples" => self.pretrain.bank_samples = num(key, v)?,
            "pretrain_batch" => self.pretrain.batch_size = num(key, v)?,
            "pretrain_lr" => self.pretrain.lr = num(key, v)?,
            "contrastive_weight" => self.pretrain.contrastive_weight = num(key, v)?,
            "contrastive_tau" => self.pretrain.contrastive_tau = num(key, v)?,
            "prompt_augment" => self.pretrain.prompt_augment = num(key, v)?,
            "lr" => self.adam.lr = num(key, v)?,
            "beta1" => self.adam.beta1 = num(key, v)?,
            "beta2" => self.adam.beta2 = num(key, v)?,
            "adam_eps" => self.adam.eps = num(key, v)?,
            "mask_ratio" => self.mask_ratio = num(key, v)?,
            "tau0" => self.loss.tau0 = num(key, v)?,
            "d0" => self.loss.d0 = num(key, v)?,
            "tau" => self.loss.tau = num(key, v)?,
            "swap_lambda" => self.loss.swap_lambda = num(key, v)?,
            "loss_weights" => {
                let w: Vec<f64> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
                self.loss.weights = w.try_into().map_err(|_| config_err("loss_weights needs three comma-separated values"))?;
            }
            "window" => self.detector.window = num(key, v)?,
            "threshold" => self.detector.threshold = num(key, v)?,
            "detector_eps" => self.detector.eps = num(key, v)?,
            "batch_size" => self.stream.batch_size = num(key, v)?,
            "batches" => self.stream.batches = num(key, v)?,
            "stream_seed" => self.stream.seed = num(key, v)?,
            "audio_schedule" => self.stream.audio = parse_schedule(key, v)?,
            "video_schedule" => self.stream.video = parse_schedule(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "metrics" => self.metrics = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data" => self.data = PathBuf::from(v),
            _ => return Err(config_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text: one pair per line, `#` starts a comment.
    /// Returns the keys it set.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>, Error> {
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(config_err(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            self.set(k, v).map_err(|e| config_err(format!("line {}: {}", no + 1, strip(&e))))?;
            seen.push(k.to_string());
        }
        Ok(seen)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<Vec<String>, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), Error> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| config_err(format!("expected key=value, got {p:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig { adam: self.adam, loss: self.loss, mask_ratio: self.mask_ratio, seed: self.seed, ..AdaptConfig::default() }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec { classes: self.model.classes, tokens: self.model.tokens, input_dim: self.model.input_dim, ..self.task }
    }

    /// The configuration as a `key = value` text that [`Self::apply_text`] reads back.
    #[cfg(test)]
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name));
        }
        out
    }

    #[cfg(test)]
    fn get(&self, key: &str) -> String {
        let path = |p: &Path| p.display().to_string();
        match key {
            "seed" => self.seed.to_string(),
            "input_dim" => self.model.input_dim.to_string(),
            "dim" => self.model.dim.to_string(),
            "heads" => self.model.heads.to_string(),
            "layers" => self.model.layers.to_string(),
            "joint_layers" => self.model.joint_layers.to_string(),
            "tokens" => self.model.tokens.to_string(),
            "prompts" => self.model.prompts.to_string(),
            "classes" => self.model.classes.to_string(),
            "mlp_hidden" => self.model.mlp_hidden.to_string(),
            "task_seed" => self.task.seed.to_string(),
            "separation" => self.task.separation.to_string(),
            "noise" => self.task.noise.to_string(),
            "epochs" => self.pretrain.epochs.to_string(),
            "train_samples" => self.pretrain.train_samples.to_string(),
            "test_samples" => self.pretrain.test_samples.to_string(),
            "bank_samples" => self.pretrain.bank_samples.to_string(),
            "pretrain_batch" => self.pretrain.batch_size.to_string(),
            "pretrain_lr" => self.pretrain.lr.to_string(),
            "contrastive_weight" => self.pretrain.contrastive_weight.to_string(),
            "contrastive_tau" => self.pretrain.contrastive_tau.to_string(),
            "prompt_augment" => self.pretrain.prompt_augment.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "tau0" => self.loss.tau0.to_string(),
            "d0" => self.loss.d0.to_string(),
            "tau" => self.loss.tau.to_string(),
            "swap_lambda" => self.loss.swap_lambda.to_string(),
            "loss_weights" => self.loss.weights.map(|w| w.to_string()).join(","),
            "window" => self.detector.window.to_string(),
            "threshold" => self.detector.threshold.to_string(),
            "detector_eps" => self.detector.eps.to_string(),
            "batch_size" => self.stream.batch_size.to_string(),
            "batches" => self.stream.batches.to_string(),
            "stream_seed" => self.stream.seed.to_string(),
            "audio_schedule" => self.stream.audio.to_string(),
            "video_schedule" => self.stream.video.to_string(),
            "checkpoint" => path(&self.checkpoint),
            "metrics" => self.metrics.as_deref().map(path).unwrap_or_default(),
            "data" => path(&self.data),
            _ => unreachable!("every documented key is readable"),
        }
    }
}

fn parse_schedule(key: &str, v: &str) -> Result<Schedule, Error> {
    v.parse().map_err(|e: Error| config_err(format!("{key}: {}", strip(&e))))
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Table of every key with its default, for `--help`.
pub fn key_table() -> String {
    let mut out = String::from("Configuration keys (config file lines `key = value`, or --set key=value):\n");
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    for k in KEYS {
        let shown = if k.default.is_empty() { "\"\"" } else { k.default };
        let note = match k.reference {
            Some(p) if p == k.default => " [reference value]".to_string(),
            Some(p) => format!(" [reference value {p}]"),
            None => String::new(),
        };
        let _ = writeln!(out, "  {:width$}  {shown:<16} {}{note}", k.name, k.doc);
    }
    out
}
