use crate::error::{invalid, Result};

/// The two input modalities. `Audio` and `Video` name the two synthetic
/// streams; nothing about them is audio- or video-specific.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Video];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Video => "v",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "video" => Ok(Modality::Video),
            _ => Err(invalid(format!("unknown modality {s:?}"))),
        }
    }
}

/// Shape of one modality encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub prompts: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(invalid(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(invalid(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Full two-modality architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of raw input tokens before the embedding projection.
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    /// Transformer layers per modality encoder.
    pub layers: usize,
    /// Transformer layers in the joint module.
    pub joint_layers: usize,
    /// Tokens per modality per sample.
    pub tokens: usize,
    /// Prompt tokens inserted per encoder layer.
    pub prompts: usize,
    pub classes: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            dim: 32,
            heads: 2,
            layers: 2,
            joint_layers: 2,
            tokens: 8,
            prompts: 10,
            classes: 5,
            mlp_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_dim: 4,
            dim: 8,
            heads: 2,
            layers: 2,
            joint_layers: 2,
            tokens: 4,
            prompts: 2,
            classes: 3,
            mlp_hidden: 8,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            tokens: self.tokens,
            prompts: self.prompts,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.input_dim == 0 || self.joint_layers == 0 || self.mlp_hidden == 0 {
            return Err(invalid(format!("model sizes must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        Ok(())
    }

    pub(crate) fn to_values(self) -> Vec<f64> {
        [
            self.input_dim,
            self.dim,
            self.heads,
            self.layers,
            self.joint_layers,
            self.tokens,
            self.prompts,
            self.classes,
            self.mlp_hidden,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 9 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(invalid("malformed model config record"));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            input_dim: u(0),
            dim: u(1),
            heads: u(2),
            layers: u(3),
            joint_layers: u(4),
            tokens: u(5),
            prompts: u(6),
            classes: u(7),
            mlp_hidden: u(8),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
