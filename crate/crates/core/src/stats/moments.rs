use crate::error::{invalid, Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::model::{Modality, ModelBundle};
use crate::scalar::Scalar;

/// Per-dimension mean and (Bessel-corrected) standard deviation of a layer's
/// pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGaussianStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> LayerGaussianStats<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and `B - 1` standard deviations of a `B × d` feature matrix.
pub fn batch_stats<T: Scalar>(features: &Tensor<T>) -> Result<LayerGaussianStats<T>> {
    if features.rank() != 2 {
        return Err(Error::Shape { op: "batch_stats", shapes: vec![features.shape().to_vec()] });
    }
    let (b, d) = features.dims2();
    if b < 2 {
        return Err(invalid(format!("batch statistics need at least 2 samples, got {b}")));
    }
    let bf = T::of_usize(b);
    // shifted by the first row, so identical rows give an exactly zero spread
    let first = features.row(0);
    let mut shift = vec![T::zero(); d];
    for r in 1..b {
        for ((m, &v), &f) in shift.iter_mut().zip(features.row(r)).zip(first) {
            *m += v - f;
        }
    }
    let mean: Vec<T> = shift.into_iter().zip(first).map(|(s, &f)| f + s / bf).collect();
    let mut ss = vec![T::zero(); d];
    for r in 0..b {
        for ((s, &v), &m) in ss.iter_mut().zip(features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = T::of_usize(b - 1);
    let std = ss.into_iter().map(|s| (s / denom).sqrt()).collect();
    Ok(LayerGaussianStats { mean, std })
}

/// Stacks equal-length feature vectors into a `B × d` matrix.
pub fn stack_rows<T: Scalar>(rows: &[Tensor<T>]) -> Result<Tensor<T>> {
    let d = rows.first().map(Tensor::len).ok_or_else(|| invalid("no feature rows"))?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape { op: "stack_rows", shapes: vec![vec![d], r.shape().to_vec()] });
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

fn l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Layer-averaged discrepancy `(1/N) Σ_i (‖μ_t − μ_s‖₂ + ‖σ_t − σ_s‖₂)`.
pub fn disc<T: Scalar>(source: &[LayerGaussianStats<T>], target: &[LayerGaussianStats<T>]) -> Result<T> {
    if source.len() != target.len() || source.is_empty() {
        return Err(invalid(format!("layer count mismatch: {} source vs {} target", source.len(), target.len())));
    }
    let mut total = T::zero();
    for (s, t) in source.iter().zip(target) {
        if s.dim() != t.dim() {
            return Err(Error::Shape { op: "disc", shapes: vec![vec![s.dim()], vec![t.dim()]] });
        }
        total += l2(&t.mean, &s.mean) + l2(&t.std, &s.std);
    }
    Ok(total / T::of_usize(source.len()))
}

/// Batch mean and standard deviation of `B` feature vectors, on the tape.
pub fn batch_stats_on_tape<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<(Var, Var)> {
    let b = rows.len();
    if b < 2 {
        return Err(invalid(format!("batch statistics need at least 2 samples, got {b}")));
    }
    let x = tape.stack(rows)?;
    let mean = tape.mean(x, 0)?;
    let neg = tape.scale(mean, -T::one())?;
    let centered = tape.add_row(x, neg)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, 0)?;
    let var = tape.scale(var, T::of_usize(b) / T::of_usize(b - 1))?;
    let std = tape.sqrt(var)?;
    Ok((mean, std))
}

/// [`disc`] of per-layer target features (each a list of `B` vectors) against
/// fixed source statistics, differentiable with respect to the features.
pub fn disc_on_tape<T: Scalar>(tape: &mut Tape<T>, source: &[LayerGaussianStats<T>], layers: &[Vec<Var>]) -> Result<Var> {
    if source.len() != layers.len() || source.is_empty() {
        return Err(invalid(format!("layer count mismatch: {} source vs {} target", source.len(), layers.len())));
    }
    let mut terms = Vec::with_capacity(layers.len() * 2);
    for (s, rows) in source.iter().zip(layers) {
        let (mean, std) = batch_stats_on_tape(tape, rows)?;
        let sm = tape.constant(Tensor::vector(s.mean.clone())?);
        let ss = tape.constant(Tensor::vector(s.std.clone())?);
        let dm = tape.sub(mean, sm)?;
        let ds = tape.sub(std, ss)?;
        terms.push(tape.norm(dm)?);
        terms.push(tape.norm(ds)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, T::one() / T::of_usize(layers.len()))
}

/// Source-side statistics for every encoder layer and every joint layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceStatsBank<T> {
    pub audio: Vec<LayerGaussianStats<T>>,
    pub video: Vec<LayerGaussianStats<T>>,
    pub joint: Vec<LayerGaussianStats<T>>,
}

impl<T: Scalar> SourceStatsBank<T> {
    pub fn modality(&self, m: Modality) -> &[LayerGaussianStats<T>] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}

/// Per-layer pooled features of a batch, gathered from complete forwards.
#[derive(Clone, Debug)]
pub struct BatchFeatures<T> {
    pub audio: Vec<Vec<Tensor<T>>>,
    pub video: Vec<Vec<Tensor<T>>>,
    pub joint: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> BatchFeatures<T> {
    /// Runs complete forwards over a batch and regroups the pooled features by layer.
    pub fn collect(model: &ModelBundle<T>, xa: &[Tensor<T>], xv: &[Tensor<T>], use_prompts: bool) -> Result<Self> {
        let cfg = model.config;
        let mut out = Self {
            audio: vec![Vec::with_capacity(xa.len()); cfg.layers],
            video: vec![Vec::with_capacity(xa.len()); cfg.layers],
            joint: vec![Vec::with_capacity(xa.len()); cfg.joint_layers],
        };
        for (a, v) in xa.iter().zip(xv) {
            let f = model.forward_sample(a, v, use_prompts)?;
            for (dst, src) in [(&mut out.audio, f.audio), (&mut out.video, f.video), (&mut out.joint, f.joint)] {
                for (layer, z) in dst.iter_mut().zip(src) {
                    layer.push(z);
                }
            }
        }
        Ok(out)
    }

    pub fn stats(layers: &[Vec<Tensor<T>>]) -> Result<Vec<LayerGaussianStats<T>>> {
        layers.iter().map(|rows| batch_stats(&stack_rows(rows)?)).collect()
    }
}

/// Computes the source bank from clean unlabeled samples, with or without
/// the model's current prompts.
pub fn precompute_source_bank<T: Scalar>(
    model: &ModelBundle<T>,
    xa: &[Tensor<T>],
    xv: &[Tensor<T>],
    use_prompts: bool,
) -> Result<SourceStatsBank<T>> {
    if xa.len() != xv.len() {
        return Err(invalid("audio and video sample counts differ"));
    }
    if xa.len() < 2 {
        return Err(invalid(format!("source bank needs at least 2 samples, got {}", xa.len())));
    }
    let f = BatchFeatures::collect(model, xa, xv, use_prompts)?;
    Ok(SourceStatsBank {
        audio: BatchFeatures::stats(&f.audio)?,
        video: BatchFeatures::stats(&f.video)?,
        joint: BatchFeatures::stats(&f.joint)?,
    })
}

/// Plain `[Disc_a, Disc_v, Disc_J]` of a batch against a bank.
pub fn batch_disc<T: Scalar>(
    model: &ModelBundle<T>,
    bank: &SourceStatsBank<T>,
    xa: &[Tensor<T>],
    xv: &[Tensor<T>],
    use_prompts: bool,
) -> Result<[T; 3]> {
    let f = BatchFeatures::collect(model, xa, xv, use_prompts)?;
    Ok([
        disc(&bank.audio, &BatchFeatures::stats(&f.audio)?)?,
        disc(&bank.video, &BatchFeatures::stats(&f.video)?)?,
        disc(&bank.joint, &BatchFeatures::stats(&f.joint)?)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_formula() {
        let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let s = batch_stats(&x).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        let r2 = 2f64.sqrt();
        assert!((s.std[0] - r2).abs() < 1e-15 && (s.std[1] - r2).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_have_zero_std() {
        let x = Tensor::matrix(3, 2, vec![0.3, -1.7, 0.3, -1.7, 0.3, -1.7]).unwrap();
        assert_eq!(batch_stats(&x).unwrap().std, vec![0.0, 0.0]);
    }

    #[test]
    fn single_sample_rejected() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(batch_stats(&x).is_err());
    }

    #[test]
    fn scalar_disc() {
        let s = vec![LayerGaussianStats { mean: vec![1.0], std: vec![1.0] }];
        let t = vec![LayerGaussianStats { mean: vec![4.0], std: vec![5.0] }];
        assert_eq!(disc(&s, &t).unwrap(), 7.0);
        assert_eq!(disc(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn disc_layer_mismatch_rejected() {
        let s = vec![LayerGaussianStats { mean: vec![1.0], std: vec![1.0] }];
        assert!(disc(&s, &[s[0].clone(), s[0].clone()]).is_err());
    }

    #[test]
    fn tape_disc_matches_plain_disc() {
        let rows: Vec<Tensor<f64>> =
            (0..5).map(|i| Tensor::vector(vec![i as f64 * 0.3, (i as f64).sin(), 1.0 - i as f64]).unwrap()).collect();
        let target = batch_stats(&stack_rows(&rows).unwrap()).unwrap();
        let source = LayerGaussianStats { mean: vec![0.1, 0.2, -0.3], std: vec![1.0, 0.5, 2.0] };
        let plain = disc(&[source.clone()], &[target]).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = rows.iter().map(|r| tape.param(r.clone())).collect();
        let d = disc_on_tape(&mut tape, &[source], &[vars]).unwrap();
        assert!((tape.item(d) - plain).abs() < 1e-12);
    }
}
