use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::grad::Tensor;
use crate::scalar::Scalar;

/// Random token masking: a fraction `ratio` of tokens is dropped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { ratio: 0.5, seed: 0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(invalid(format!("mask ratio must lie in [0, 1), got {}", self.ratio)));
        }
        Ok(())
    }

    /// Number of tokens kept out of `m`: `ceil(m (1 - ratio))`, at least one.
    pub fn kept(&self, m: usize) -> usize {
        ((m as f64 * (1.0 - self.ratio)).ceil() as usize).clamp(1, m)
    }

    /// Generator seeded from `seed`, for callers that want the spec to own the stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Sorted positions of the tokens that survive masking.
pub fn mask_indices<R: Rng + ?Sized>(m: usize, spec: &MaskSpec, rng: &mut R) -> Result<Vec<usize>> {
    spec.validate()?;
    let keep = spec.kept(m);
    if keep == m {
        return Ok((0..m).collect());
    }
    let mut idx = index::sample(rng, m, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps a uniformly random subset of the rows of `x` (tokens), in order.
pub fn mask_tokens<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, spec: &MaskSpec, rng: &mut R) -> Result<Tensor<T>> {
    let (m, d) = x.dims2();
    let idx = mask_indices(m, spec, rng)?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in &idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(m: usize) -> Tensor<f64> {
        Tensor::from_fn(&[m, 3], |i| i as f64)
    }

    #[test]
    fn ratio_zero_is_identity() {
        let x = tokens(8);
        let spec = MaskSpec { ratio: 0.0, seed: 1 };
        assert_eq!(mask_tokens(&x, &spec, &mut spec.rng()).unwrap(), x);
    }

    #[test]
    fn half_ratio_keeps_half() {
        let spec = MaskSpec { ratio: 0.5, seed: 4 };
        let y = mask_tokens(&tokens(8), &spec, &mut spec.rng()).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
    }

    #[test]
    fn same_seed_same_indices() {
        let spec = MaskSpec { ratio: 0.5, seed: 99 };
        let a = mask_indices(8, &spec, &mut spec.rng()).unwrap();
        let b = mask_indices(8, &spec, &mut spec.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_ratio_rejected() {
        let spec = MaskSpec { ratio: 1.0, seed: 0 };
        assert!(mask_tokens(&tokens(4), &spec, &mut spec.rng()).is_err());
    }

    #[test]
    fn always_keeps_one_token() {
        let spec = MaskSpec { ratio: 0.99, seed: 0 };
        assert_eq!(spec.kept(8), 1);
        assert_eq!(MaskSpec { ratio: 0.3, seed: 0 }.kept(8), 6);
    }
}
