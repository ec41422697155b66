use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::grad::Tensor;
use crate::scalar::Scalar;

/// Gaussian noise standard deviation per severity level.
pub const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6];
/// Half-width of the uniform per-channel gain around 1.
pub const CHANNEL_SPREAD: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8];
/// Fraction of tokens zeroed.
pub const DROPOUT_FRACTION: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ChannelScale,
    TokenDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::GaussianNoise, Self::ChannelScale, Self::TokenDropout];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian-noise",
            Self::ChannelScale => "channel-scale",
            Self::TokenDropout => "token-dropout",
        }
    }

    /// Table value for a severity level.
    pub fn parameter(self, severity: u8) -> f64 {
        let table = match self {
            Self::GaussianNoise => &GAUSSIAN_SIGMA,
            Self::ChannelScale => &CHANNEL_SPREAD,
            Self::TokenDropout => &DROPOUT_FRACTION,
        };
        table[severity as usize]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown corruption kind {s:?} (expected gaussian-noise, channel-scale or token-dropout)")))
    }
}

/// A corruption family at one severity level; level 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub const CLEAN: Self = Self { kind: CorruptionKind::GaussianNoise, severity: 0 };

    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(invalid(format!("severity must be in 0..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    pub fn is_identity(&self) -> bool {
        self.severity == 0
    }

    pub fn parameter(&self) -> f64 {
        self.kind.parameter(self.severity)
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            f.write_str("clean")
        } else {
            write!(f, "{}:{}", self.kind, self.severity)
        }
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    /// `clean` or `<kind>:<severity>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "clean" {
            return Ok(Self::CLEAN);
        }
        let (kind, sev) = s.rsplit_once(':').ok_or_else(|| invalid(format!("expected <kind>:<severity>, got {s:?}")))?;
        let sev = sev.parse::<u8>().map_err(|_| invalid(format!("bad severity in {s:?}")))?;
        Self::new(kind.parse()?, sev)
    }
}

/// Applies a corruption to one `m × d_in` token matrix.
///
/// * gaussian-noise adds `N(0, σ²)` to every entry;
/// * channel-scale multiplies each feature channel by a gain drawn from
///   `U[1 − s, 1 + s]`;
/// * token-dropout zeroes `round(f · m)` randomly chosen tokens.
///
/// Severity 0 returns the input unchanged and draws nothing from `rng`.
pub fn corrupt<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, spec: &CorruptionSpec, rng: &mut R) -> Tensor<T> {
    if spec.is_identity() {
        return x.clone();
    }
    let p = spec.parameter();
    let (m, d) = x.dims2();
    let mut out = x.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in out.data_mut() {
                *v += T::of(p * rng.sample::<f64, _>(StandardNormal));
            }
        }
        CorruptionKind::ChannelScale => {
            let gains: Vec<T> = (0..d).map(|_| T::of(rng.random_range(1.0 - p..=1.0 + p))).collect();
            for row in out.data_mut().chunks_exact_mut(d) {
                for (v, &g) in row.iter_mut().zip(&gains) {
                    *v *= g;
                }
            }
        }
        CorruptionKind::TokenDropout => {
            let k = (p * m as f64).round() as usize;
            for t in sample(rng, m, k.min(m)) {
                out.data_mut()[t * d..(t + 1) * d].fill(T::zero());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_x() -> Tensor<f64> {
        Tensor::from_fn(&[8, 16], |k| (k as f64 * 0.37).sin())
    }

    #[test]
    fn severity_zero_is_bitwise_identity() {
        let x = sample_x();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in CorruptionKind::ALL {
            assert_eq!(corrupt(&x, &CorruptionSpec::new(kind, 0).unwrap(), &mut rng), x);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let x = sample_x();
        let s = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap();
        let a = corrupt(&x, &s, &mut ChaCha8Rng::seed_from_u64(1));
        let b = corrupt(&x, &s, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, b);
    }

    #[test]
    fn dropout_zeroes_expected_token_count() {
        let x = sample_x().map(|v| v + 3.0);
        let s = CorruptionSpec::new(CorruptionKind::TokenDropout, 5).unwrap();
        let y = corrupt(&x, &s, &mut ChaCha8Rng::seed_from_u64(4));
        let zero_rows = (0..8).filter(|&r| y.row(r).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 4);
    }

    #[test]
    fn channel_gains_within_spread() {
        let x = Tensor::full(&[4, 16], 1.0);
        let s = CorruptionSpec::new(CorruptionKind::ChannelScale, 3).unwrap();
        let y = corrupt(&x, &s, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(y.data().iter().all(|&g| (0.8..=1.2).contains(&g)));
        assert_eq!(y.row(0), y.row(3));
    }

    #[test]
    fn parse_and_display() {
        let s: CorruptionSpec = "channel-scale:4".parse().unwrap();
        assert_eq!(s, CorruptionSpec { kind: CorruptionKind::ChannelScale, severity: 4 });
        assert_eq!(s.to_string(), "channel-scale:4");
        assert_eq!("clean".parse::<CorruptionSpec>().unwrap(), CorruptionSpec::CLEAN);
        assert!("blur:3".parse::<CorruptionSpec>().is_err());
        assert!("gaussian-noise:6".parse::<CorruptionSpec>().is_err());
    }
}
