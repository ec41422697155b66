use super::config::{Modality, ModelConfig};
use super::weights::{BlockWeights, ModelBundle};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Which tensors of a bundle receive gradients when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Everything constant.
    Frozen,
    /// Only prompts are parameters (test-time adaptation).
    Prompts,
    /// Only frozen-model weights are parameters (source pretraining).
    Weights,
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub heads: Vec<BoundHead>,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub embed_w: Var,
    pub embed_b: Var,
    pub blocks: Vec<BoundBlock>,
    pub prompts: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundJoint {
    pub blocks: Vec<BoundBlock>,
    pub head_w: Var,
    pub head_b: Var,
}

/// A bundle's tensors placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub audio: BoundEncoder,
    pub video: BoundEncoder,
    pub joint: BoundJoint,
    frozen: Vec<Var>,
}

/// Per-layer outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Retained token outputs `E_1 … E_N` (prompt positions dropped).
    pub layers: Vec<Var>,
    /// Mean-pooled features `Z_1 … Z_N`.
    pub pooled: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }
}

/// Output of the joint module.
#[derive(Clone, Debug)]
pub struct JointOutput {
    /// Mean-pooled features after each joint layer.
    pub pooled: Vec<Var>,
    pub logits: Var,
}

impl JointOutput {
    pub fn last_pooled(&self) -> Var {
        *self.pooled.last().expect("joint module has at least one layer")
    }
}

struct Binder<'a, T> {
    tape: &'a mut Tape<T>,
    trainable: bool,
    vars: Vec<Var>,
}

impl<T: Scalar> Binder<'_, T> {
    fn put(&mut self, t: &Tensor<T>) -> Var {
        let v = if self.trainable { self.tape.param(t.clone()) } else { self.tape.constant(t.clone()) };
        self.vars.push(v);
        v
    }

    fn block(&mut self, b: &BlockWeights<T>) -> BoundBlock {
        let ln1_g = self.put(&b.ln1_g);
        let ln1_b = self.put(&b.ln1_b);
        let heads = b
            .heads
            .iter()
            .map(|h| BoundHead { wq: self.put(&h.wq), wk: self.put(&h.wk), wv: self.put(&h.wv), wo: self.put(&h.wo) })
            .collect();
        BoundBlock {
            ln1_g,
            ln1_b,
            heads,
            bo: self.put(&b.bo),
            ln2_g: self.put(&b.ln2_g),
            ln2_b: self.put(&b.ln2_b),
            w1: self.put(&b.w1),
            b1: self.put(&b.b1),
            w2: self.put(&b.w2),
            b2: self.put(&b.b2),
        }
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Places every tensor of the bundle on `tape`.
    ///
    /// The order of [`BoundModel::frozen_vars`] matches [`ModelBundle::frozen_mut`].
    pub fn bind(&self, tape: &mut Tape<T>, binding: Binding) -> BoundModel {
        let mut binder = Binder { tape, trainable: binding == Binding::Weights, vars: Vec::new() };
        let mut encoders = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let enc = self.encoder(m);
            let embed_w = binder.put(&enc.embed_w);
            let embed_b = binder.put(&enc.embed_b);
            let blocks = enc.blocks.iter().map(|b| binder.block(b)).collect();
            encoders.push(BoundEncoder { embed_w, embed_b, blocks, prompts: Vec::new() });
        }
        let blocks = self.joint.blocks.iter().map(|b| binder.block(b)).collect();
        let head_w = binder.put(&self.joint.head_w);
        let head_b = binder.put(&self.joint.head_b);
        let frozen = std::mem::take(&mut binder.vars);

        let tape = binder.tape;
        for (m, enc) in Modality::BOTH.into_iter().zip(encoders.iter_mut()) {
            enc.prompts = self
                .prompts
                .get(m)
                .iter()
                .map(|p| if binding == Binding::Prompts { tape.param(p.clone()) } else { tape.constant(p.clone()) })
                .collect();
        }
        let video = encoders.pop().unwrap();
        let audio = encoders.pop().unwrap();
        BoundModel { config: self.config, audio, video, joint: BoundJoint { blocks, head_w, head_b }, frozen }
    }
}

/// One pre-norm transformer block over a token matrix.
pub fn transformer_block<T: Scalar>(tape: &mut Tape<T>, b: &BoundBlock, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b)?;
    let dh = tape.shape(b.heads[0].wq)[1];
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut attn: Option<Var> = None;
    for head in &b.heads {
        let q = tape.matmul(h, head.wq)?;
        let k = tape.matmul(h, head.wk)?;
        let v = tape.matmul(h, head.wv)?;
        let s = tape.matmul_bt(q, k)?;
        let s = tape.scale(s, scale)?;
        let a = tape.softmax(s)?;
        let o = tape.matmul(a, v)?;
        let o = tape.matmul(o, head.wo)?;
        attn = Some(match attn {
            Some(acc) => tape.add(acc, o)?,
            None => o,
        });
    }
    let attn = tape.add_row(attn.expect("at least one head"), b.bo)?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, b.ln2_g, b.ln2_b)?;
    let h = tape.matmul(h, b.w1)?;
    let h = tape.add_row(h, b.b1)?;
    let h = tape.tanh(h)?;
    let h = tape.matmul(h, b.w2)?;
    let h = tape.add_row(h, b.b2)?;
    tape.add(x, h)
}

impl BoundModel {
    pub fn encoder(&self, m: Modality) -> &BoundEncoder {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Frozen-weight handles, in [`ModelBundle::frozen_mut`] order.
    pub fn frozen_vars(&self) -> &[Var] {
        &self.frozen
    }

    pub fn prompt_vars(&self, m: Modality) -> &[Var] {
        &self.encoder(m).prompts
    }

    /// Encodes a token matrix (`k × input_dim`, `k ≤ tokens`) of modality `m`.
    ///
    /// At every layer the prompts are prepended, the block runs over the
    /// joint sequence and the prompt positions of its output are dropped, so
    /// each layer returns exactly `k` tokens. With `use_prompts = false` (or
    /// an empty prompt set) the plain encoder runs.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, m: Modality, x: Var, use_prompts: bool) -> Result<EncoderOutput> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.input_dim || s[0] == 0 || s[0] > self.config.tokens {
            return Err(Error::Shape { op: "encode", shapes: vec![s.to_vec(), vec![self.config.tokens, self.config.input_dim]] });
        }
        let k = s[0];
        let enc = self.encoder(m);
        let mut e = tape.matmul(x, enc.embed_w)?;
        e = tape.add_row(e, enc.embed_b)?;

        let mut out = EncoderOutput { layers: Vec::with_capacity(enc.blocks.len()), pooled: Vec::with_capacity(enc.blocks.len()) };
        for (i, block) in enc.blocks.iter().enumerate() {
            e = match enc.prompts.get(i).filter(|_| use_prompts) {
                Some(&p) => {
                    let mp = tape.shape(p)[0];
                    let joined = tape.concat(&[p, e])?;
                    let y = transformer_block(tape, block, joined)?;
                    tape.slice_rows(y, mp, mp + k)?
                }
                None => transformer_block(tape, block, e)?,
            };
            out.layers.push(e);
            out.pooled.push(tape.mean(e, 0)?);
        }
        Ok(out)
    }

    /// Runs the joint module over the token-axis concatenation of `parts`
    /// and classifies the mean-pooled result.
    pub fn joint<T: Scalar>(&self, tape: &mut Tape<T>, parts: &[Var]) -> Result<JointOutput> {
        for &p in parts {
            let s = tape.shape(p);
            if s.len() != 2 || s[1] != self.config.dim {
                return Err(Error::Shape { op: "joint", shapes: vec![s.to_vec(), vec![self.config.dim]] });
            }
        }
        let mut z = if parts.len() == 1 { parts[0] } else { tape.concat(parts)? };
        let mut pooled = Vec::with_capacity(self.joint.blocks.len());
        for block in &self.joint.blocks {
            z = transformer_block(tape, block, z)?;
            pooled.push(tape.mean(z, 0)?);
        }
        let last = *pooled.last().expect("joint module has at least one layer");
        let logits = tape.matmul(last, self.joint.head_w)?;
        let logits = tape.add_row(logits, self.joint.head_b)?;
        Ok(JointOutput { pooled, logits })
    }

    /// Joint module over `[Ea; Ev]`.
    pub fn fuse_and_classify<T: Scalar>(&self, tape: &mut Tape<T>, ea: Var, ev: Var) -> Result<JointOutput> {
        self.joint(tape, &[ea, ev])
    }

    /// Joint module over one modality's tokens alone.
    pub fn unimodal<T: Scalar>(&self, tape: &mut Tape<T>, e: Var) -> Result<JointOutput> {
        self.joint(tape, &[e])
    }
}

/// Features of one complete sample pass.
#[derive(Clone, Debug)]
pub struct SampleFeatures<T> {
    pub audio: Vec<Tensor<T>>,
    pub video: Vec<Tensor<T>>,
    pub joint: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Full forward of one sample without gradient tracking.
    pub fn forward_sample(&self, xa: &Tensor<T>, xv: &Tensor<T>, use_prompts: bool) -> Result<SampleFeatures<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Binding::Frozen);
        let (a, v) = (tape.constant(xa.clone()), tape.constant(xv.clone()));
        let ea = bound.encode(&mut tape, Modality::Audio, a, use_prompts)?;
        let ev = bound.encode(&mut tape, Modality::Video, v, use_prompts)?;
        let j = bound.fuse_and_classify(&mut tape, ea.last(), ev.last())?;
        let grab = |vars: &[Var]| vars.iter().map(|&z| tape.value(z).clone()).collect::<Vec<_>>();
        Ok(SampleFeatures {
            audio: grab(&ea.pooled),
            video: grab(&ev.pooled),
            joint: grab(&j.pooled),
            logits: tape.value(j.logits).clone(),
        })
    }

    /// Class logits for a batch, one row per sample.
    pub fn predict_logits(&self, xa: &[Tensor<T>], xv: &[Tensor<T>], use_prompts: bool) -> Result<Vec<Tensor<T>>> {
        xa.iter().zip(xv).map(|(a, v)| self.forward_sample(a, v, use_prompts).map(|f| f.logits)).collect()
    }
}

pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
