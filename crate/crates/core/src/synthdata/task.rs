use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::grad::Tensor;
use crate::model::{Modality, ModelConfig};
use crate::scalar::Scalar;

/// Synthetic two-modality classification task.
///
/// Token `t` of modality `u` for a sample of class `y` is
/// `separation · A_u c_y + noise · B_u (z + ε_t)`, where `c_y` is a class
/// prototype shared by both modalities, `A_u`, `B_u` are fixed
/// modality-specific mixing matrices, `z` is a per-sample nuisance vector and
/// `ε_t` per-token noise, both standard normal. Prototypes have unit expected
/// norm and the mixing matrices preserve norms in expectation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub classes: usize,
    pub tokens: usize,
    pub input_dim: usize,
    /// Seed for prototypes and mixing matrices.
    pub seed: u64,
    pub separation: f64,
    pub noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { classes: 5, tokens: 8, input_dim: 16, seed: 1, separation: 0.7, noise: 0.56 }
    }
}

impl TaskSpec {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self { classes: cfg.classes, tokens: cfg.tokens, input_dim: cfg.input_dim, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.tokens == 0 || self.input_dim == 0 {
            return Err(invalid(format!("task needs classes >= 2 and positive sizes, got {self:?}")));
        }
        if !(self.noise >= 0.0) || !(self.separation > self.noise) {
            return Err(invalid(format!(
                "task needs 0 <= noise < separation, got noise {} and separation {}",
                self.noise, self.separation
            )));
        }
        Ok(())
    }

    /// Checks that a model's input geometry matches this task.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if (cfg.classes, cfg.tokens, cfg.input_dim) != (self.classes, self.tokens, self.input_dim) {
            return Err(invalid(format!(
                "task (C={}, m={}, d_in={}) does not match model (C={}, m={}, d_in={})",
                self.classes, self.tokens, self.input_dim, cfg.classes, cfg.tokens, cfg.input_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn to_values(self) -> Vec<f64> {
        vec![
            self.classes as f64,
            self.tokens as f64,
            self.input_dim as f64,
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            self.separation,
            self.noise,
        ]
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(invalid(format!("task record has {} values, expected 7", v.len())));
        }
        let spec = Self {
            classes: v[0] as usize,
            tokens: v[1] as usize,
            input_dim: v[2] as usize,
            seed: ((v[3] as u64) << 32) | v[4] as u64,
            separation: v[5],
            noise: v[6],
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed generative parameters derived from a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    /// `C × d_in` prototypes, entries `N(0, 1/d_in)`.
    prototypes: Vec<f64>,
    /// Per modality: class mixing and nuisance mixing, each `d_in × d_in`, row-major.
    mix: [(Vec<f64>, Vec<f64>); 2],
}

/// Labeled samples, one token matrix per modality per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet<T> {
    pub audio: Vec<Tensor<T>>,
    pub video: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &[Tensor<T>] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Samples `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            audio: self.audio[range.clone()].to_vec(),
            video: self.video[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let prototypes = normal_matrix(&mut rng, spec.classes, d, scale);
        let mut draw = || (normal_matrix(&mut rng, d, d, scale), normal_matrix(&mut rng, d, d, scale));
        let mix = [draw(), draw()];
        Ok(Self { spec, prototypes, mix })
    }

    fn apply(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
        (0..d).map(|i| m[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Draws one sample of class `y`.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> [Tensor<T>; 2] {
        let s = self.spec;
        let d = s.input_dim;
        let proto = &self.prototypes[y * d..(y + 1) * d];
        let mut out = Vec::with_capacity(2);
        for (a, b) in &self.mix {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let base = Self::apply(a, proto, d);
            let mut data = Vec::with_capacity(s.tokens * d);
            for _ in 0..s.tokens {
                let zt: Vec<f64> = z.iter().map(|&zi| zi + rng.sample::<f64, _>(StandardNormal)).collect();
                for (c, n) in base.iter().zip(Self::apply(b, &zt, d)) {
                    data.push(T::of(s.separation * c + s.noise * n));
                }
            }
            out.push(Tensor::from_parts(vec![s.tokens, d], data));
        }
        let v = out.pop().unwrap();
        let a = out.pop().unwrap();
        [a, v]
    }

    /// `n` samples with uniformly drawn labels.
    pub fn gen_labeled<T: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> LabeledSet<T> {
        let mut set = LabeledSet { audio: Vec::with_capacity(n), video: Vec::with_capacity(n), labels: Vec::with_capacity(n) };
        for _ in 0..n {
            let y = rng.random_range(0..self.spec.classes);
            let [a, v] = self.sample(y, rng);
            set.audio.push(a);
            set.video.push(v);
            set.labels.push(y);
        }
        set
    }
}

/// Convenience wrapper: builds the task and draws `n` samples.
pub fn gen_labeled<T: Scalar, R: Rng + ?Sized>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<LabeledSet<T>> {
    Ok(Task::new(*spec)?.gen_labeled(n, rng))
}
