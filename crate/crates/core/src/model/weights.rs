use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::{Modality, ModelConfig};
use crate::grad::Tensor;
use crate::scalar::Scalar;

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// One attention head's projections.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Pre-norm transformer block: attention then a tanh MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub heads: Vec<HeadWeights<T>>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, dh, hid) = (cfg.dim, cfg.head_dim(), cfg.mlp_hidden);
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights {
                wq: xavier(rng, d, dh),
                wk: xavier(rng, d, dh),
                wv: xavier(rng, d, dh),
                wo: xavier(rng, dh, d),
            })
            .collect();
        Self {
            ln1_g: Tensor::full(&[d], T::one()),
            ln1_b: Tensor::zeros(&[d]),
            heads,
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], T::one()),
            ln2_b: Tensor::zeros(&[d]),
            w1: xavier(rng, d, hid),
            b1: Tensor::zeros(&[hid]),
            w2: xavier(rng, hid, d),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}/ln1/g"), &self.ln1_g));
        out.push((format!("{prefix}/ln1/b"), &self.ln1_b));
        for (h, hw) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}/head{h}/wq"), &hw.wq));
            out.push((format!("{prefix}/head{h}/wk"), &hw.wk));
            out.push((format!("{prefix}/head{h}/wv"), &hw.wv));
            out.push((format!("{prefix}/head{h}/wo"), &hw.wo));
        }
        out.push((format!("{prefix}/bo"), &self.bo));
        out.push((format!("{prefix}/ln2/g"), &self.ln2_g));
        out.push((format!("{prefix}/ln2/b"), &self.ln2_b));
        out.push((format!("{prefix}/mlp/w1"), &self.w1));
        out.push((format!("{prefix}/mlp/b1"), &self.b1));
        out.push((format!("{prefix}/mlp/w2"), &self.w2));
        out.push((format!("{prefix}/mlp/b2"), &self.b2));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.ln1_g);
        out.push(&mut self.ln1_b);
        for hw in &mut self.heads {
            out.push(&mut hw.wq);
            out.push(&mut hw.wk);
            out.push(&mut hw.wv);
            out.push(&mut hw.wo);
        }
        out.push(&mut self.bo);
        out.push(&mut self.ln2_g);
        out.push(&mut self.ln2_b);
        out.push(&mut self.w1);
        out.push(&mut self.b1);
        out.push(&mut self.w2);
        out.push(&mut self.b2);
    }
}

/// Token embedding plus a stack of transformer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            embed_w: xavier(rng, cfg.input_dim, cfg.dim),
            embed_b: Tensor::zeros(&[cfg.dim]),
            blocks: (0..cfg.layers).map(|_| BlockWeights::init(cfg, rng)).collect(),
        }
    }
}

/// Joint fusion stack and classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct JointWeights<T> {
    pub blocks: Vec<BlockWeights<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> JointWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            blocks: (0..cfg.joint_layers).map(|_| BlockWeights::init(cfg, rng)).collect(),
            head_w: xavier(rng, cfg.dim, cfg.classes),
            head_b: Tensor::zeros(&[cfg.classes]),
        }
    }
}

/// Learnable prompt tokens, one `prompts × dim` matrix per encoder layer and
/// modality. With zero prompts per layer both lists are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet<T> {
    pub per_layer: usize,
    pub audio: Vec<Tensor<T>>,
    pub video: Vec<Tensor<T>>,
}

impl<T: Scalar> PromptSet<T> {
    /// Half-width of the uniform prompt initialization, `sqrt(6 / (d + d))`.
    pub fn init_bound(dim: usize) -> f64 {
        (6.0 / (2 * dim) as f64).sqrt()
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut set = Self { per_layer: cfg.prompts, audio: Vec::new(), video: Vec::new() };
        for m in Modality::BOTH {
            set.reinit(cfg, m, rng);
        }
        set
    }

    /// Redraws the prompts of one modality from the initialization distribution.
    pub fn reinit<R: Rng + ?Sized>(&mut self, cfg: &ModelConfig, modality: Modality, rng: &mut R) {
        let fresh = if cfg.prompts == 0 {
            Vec::new()
        } else {
            let b = Self::init_bound(cfg.dim);
            (0..cfg.layers).map(|_| uniform(rng, &[cfg.prompts, cfg.dim], b)).collect()
        };
        *self.get_mut(modality) = fresh;
    }

    pub fn get(&self, m: Modality) -> &[Tensor<T>] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Vec<Tensor<T>> {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Video => &mut self.video,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer == 0
    }
}

/// The frozen two-modality transformer plus its trainable prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub audio: EncoderWeights<T>,
    pub video: EncoderWeights<T>,
    pub joint: JointWeights<T>,
    pub prompts: PromptSet<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Fresh randomly initialized model (weights and prompts).
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> crate::Result<Self> {
        config.validate()?;
        let audio = EncoderWeights::init(&config, rng);
        let video = EncoderWeights::init(&config, rng);
        let joint = JointWeights::init(&config, rng);
        let prompts = PromptSet::init(&config, rng);
        Ok(Self { config, audio, video, joint, prompts })
    }

    pub fn encoder(&self, m: Modality) -> &EncoderWeights<T> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Every non-prompt tensor, with stable checkpoint names, in a fixed order.
    pub fn frozen_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for m in Modality::BOTH {
            let enc = self.encoder(m);
            let p = format!("model/{}", m.tag());
            out.push((format!("{p}/embed/w"), &enc.embed_w));
            out.push((format!("{p}/embed/b"), &enc.embed_b));
            for (i, b) in enc.blocks.iter().enumerate() {
                b.named(&format!("{p}/layer{i}"), &mut out);
            }
        }
        for (i, b) in self.joint.blocks.iter().enumerate() {
            b.named(&format!("model/j/layer{i}"), &mut out);
        }
        out.push(("model/head/w".into(), &self.joint.head_w));
        out.push(("model/head/b".into(), &self.joint.head_b));
        out
    }

    /// Mutable view of the same tensors as [`Self::frozen_named`], same order.
    pub fn frozen_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for enc in [&mut self.audio, &mut self.video] {
            out.push(&mut enc.embed_w);
            out.push(&mut enc.embed_b);
            for b in &mut enc.blocks {
                b.tensors_mut(&mut out);
            }
        }
        for b in &mut self.joint.blocks {
            b.tensors_mut(&mut out);
        }
        out.push(&mut self.joint.head_w);
        out.push(&mut self.joint.head_b);
        out
    }

    pub fn prompts_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for m in Modality::BOTH {
            for (i, p) in self.prompts.get(m).iter().enumerate() {
                out.push((format!("prompts/{}/layer{i}", m.tag()), p));
            }
        }
        out
    }

    /// SHA-256 over the names and little-endian `f64` bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.frozen_named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Same architecture and weights, no prompts.
    pub fn without_prompts(&self) -> Self {
        let mut m = self.clone();
        m.config.prompts = 0;
        m.prompts = PromptSet { per_layer: 0, audio: Vec::new(), video: Vec::new() };
        m
    }
}
