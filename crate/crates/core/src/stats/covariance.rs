use num_traits::{FromPrimitive, Num};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::grad::Tensor;
use crate::scalar::Scalar;

/// Tolerance on negative pivots when factorizing a covariance matrix.
pub const PSD_TOL: f64 = 1e-10;

/// Unbiased sample covariance and its diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CovEstimate<T> {
    /// `d × d`, row-major.
    pub full: Tensor<T>,
    pub diag: Vec<T>,
}

/// `Σ̂ = Σ_k (x_k − x̄)(x_k − x̄)ᵀ / (n − 1)` for an `n × d` sample matrix.
pub fn sample_covariance<T: Scalar>(x: &Tensor<T>) -> Result<CovEstimate<T>> {
    if x.rank() != 2 {
        return Err(Error::Shape { op: "sample_covariance", shapes: vec![x.shape().to_vec()] });
    }
    let (n, d) = x.dims2();
    if n < 2 {
        return Err(invalid(format!("sample covariance needs n >= 2, got {n}")));
    }
    let nf = T::of_usize(n);
    let mut mean = vec![T::zero(); d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut full = vec![T::zero(); d * d];
    let mut c = vec![T::zero(); d];
    for r in 0..n {
        for ((ci, &v), &m) in c.iter_mut().zip(x.row(r)).zip(&mean) {
            *ci = v - m;
        }
        for i in 0..d {
            for j in i..d {
                full[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = T::of_usize(n - 1);
    for i in 0..d {
        for j in i..d {
            let v = full[i * d + j] / denom;
            full[i * d + j] = v;
            full[j * d + i] = v;
        }
    }
    let diag = (0..d).map(|i| full[i * d + i]).collect();
    Ok(CovEstimate { full: Tensor::new(vec![d, d], full)?, diag })
}

/// Exact expected squared errors of the full and diagonal covariance
/// estimators under Gaussian sampling with `n` draws:
///
/// * full: `(‖Σ‖_F² + tr(Σ)²) / (n − 1)`
/// * diagonal: `2 Σ_i Σ_ii² / (n − 1)`
///
/// Generic over any numeric type, so rational matrices give exact results.
pub fn theorem1_closed_form<T>(sigma: &[T], d: usize, n: usize) -> Result<(T, T)>
where
    T: Num + Clone + PartialEq + FromPrimitive,
{
    if sigma.len() != d * d || d == 0 {
        return Err(Error::Shape { op: "theorem1_closed_form", shapes: vec![vec![sigma.len()], vec![d, d]] });
    }
    if n < 2 {
        return Err(invalid(format!("need n >= 2, got {n}")));
    }
    for i in 0..d {
        for j in 0..i {
            if sigma[i * d + j] != sigma[j * d + i] {
                return Err(invalid(format!("sigma is not symmetric at ({i}, {j})")));
            }
        }
    }
    let nm1 = T::from_usize(n - 1).ok_or_else(|| invalid("n - 1 not representable"))?;
    let two = T::one() + T::one();
    let mut frob = T::zero();
    let mut trace = T::zero();
    let mut diag_sq = T::zero();
    for i in 0..d {
        for j in 0..d {
            let s = sigma[i * d + j].clone();
            frob = frob + s.clone() * s;
        }
        let sii = sigma[i * d + i].clone();
        trace = trace + sii.clone();
        diag_sq = diag_sq + sii.clone() * sii;
    }
    Ok(((frob + trace.clone() * trace) / nm1.clone(), two * diag_sq / nm1))
}

/// Per-entry variance `(Σ_ij² + Σ_ii Σ_jj) / (n − 1)` of the sample covariance.
pub fn entry_variance<T: Scalar>(sigma: &Tensor<T>, n: usize) -> Vec<T> {
    let (d, _) = sigma.dims2();
    let nm1 = T::of_usize(n - 1);
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let sij = sigma.at(i, j);
            out.push((sij * sij + sigma.at(i, i) * sigma.at(j, j)) / nm1);
        }
    }
    out
}

/// Lower-triangular `L` with `L Lᵀ = Σ` for a positive semi-definite `Σ`.
///
/// Pivots within [`PSD_TOL`] of zero are treated as zero and their column is
/// left empty; a pivot below `-PSD_TOL` rejects the matrix.
pub fn cholesky_psd<T: Scalar>(sigma: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, c) = sigma.dims2();
    if d != c || sigma.rank() != 2 {
        return Err(Error::Shape { op: "cholesky", shapes: vec![sigma.shape().to_vec()] });
    }
    let tol = T::of(PSD_TOL);
    let mut l = vec![T::zero(); d * d];
    for j in 0..d {
        let mut pivot = sigma.at(j, j);
        for k in 0..j {
            pivot -= l[j * d + k] * l[j * d + k];
        }
        if pivot < -tol {
            return Err(Error::NotPsd { pivot: j, value: pivot.as_f64() });
        }
        if pivot <= tol {
            continue;
        }
        let ljj = pivot.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = sigma.at(i, j);
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    // verify the reconstruction for matrices whose zero pivots hid a negative direction
    for i in 0..d {
        for j in 0..=i {
            let r: T = (0..=j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if (r - sigma.at(i, j)).abs() > T::of(1e-8) * (T::one() + sigma.at(i, j).abs()) {
                return Err(Error::NotPsd { pivot: j, value: (r - sigma.at(i, j)).as_f64() });
            }
        }
    }
    Tensor::new(vec![d, d], l)
}

/// Empirical estimator errors over independent Gaussian resamples.
#[derive(Clone, Debug)]
pub struct MonteCarloReport<T> {
    /// Mean of `‖Σ̂ − Σ‖_F²`.
    pub frobenius_mse: T,
    /// Mean of `‖σ̂² − σ²‖₂²`.
    pub diag_mse: T,
    /// Mean of `Σ̂` (row-major `d × d`).
    pub mean_estimate: Vec<T>,
    /// Empirical variance of each `Σ̂_ij` (row-major `d × d`).
    pub entry_variance: Vec<T>,
    pub trials: usize,
}

/// Draws `trials` independent samples of size `n` from `N(0, Σ)` and
/// averages the squared errors of the full and diagonal covariance estimates.
pub fn theorem1_monte_carlo<T: Scalar, R: Rng + ?Sized>(
    sigma: &Tensor<T>,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<MonteCarloReport<T>> {
    if trials < 1000 {
        return Err(invalid(format!("need at least 1000 trials, got {trials}")));
    }
    if n < 2 {
        return Err(invalid(format!("need n >= 2, got {n}")));
    }
    let l = cholesky_psd(sigma)?;
    let (d, _) = sigma.dims2();
    let mut frob = 0.0f64;
    let mut diag = 0.0f64;
    let mut sum = vec![0.0f64; d * d];
    let mut sum_sq = vec![0.0f64; d * d];
    let mut buf = vec![T::zero(); n * d];
    let mut z = vec![T::zero(); d];
    for _ in 0..trials {
        for row in buf.chunks_exact_mut(d) {
            for zi in z.iter_mut() {
                *zi = T::of(rng.sample::<f64, _>(StandardNormal));
            }
            for (i, out) in row.iter_mut().enumerate() {
                *out = (0..=i).map(|k| l.at(i, k) * z[k]).sum();
            }
        }
        let est = sample_covariance(&Tensor::from_parts(vec![n, d], buf.clone()))?;
        for i in 0..d {
            for j in 0..d {
                let e = est.full.at(i, j).as_f64();
                let err = e - sigma.at(i, j).as_f64();
                frob += err * err;
                if i == j {
                    diag += err * err;
                }
                sum[i * d + j] += e;
                sum_sq[i * d + j] += e * e;
            }
        }
    }
    let t = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let var = sum_sq.iter().zip(&mean).map(|(sq, m)| (sq - t * m * m) / (t - 1.0)).collect::<Vec<_>>();
    Ok(MonteCarloReport {
        frobenius_mse: T::of(frob / t),
        diag_mse: T::of(diag / t),
        mean_estimate: mean.into_iter().map(T::of).collect(),
        entry_variance: var.into_iter().map(T::of).collect(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Vec<f64> {
        (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn two_point_variance() {
        let x = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(sample_covariance(&x).unwrap().full.data(), &[2.0]);
    }

    #[test]
    fn single_axis_support() {
        let x = Tensor::matrix(3, 2, vec![1.0, 0.0, -2.0, 0.0, 4.0, 0.0]).unwrap();
        let c = sample_covariance(&x).unwrap();
        assert!(c.full.at(0, 0) > 0.0);
        assert_eq!([c.full.at(0, 1), c.full.at(1, 0), c.full.at(1, 1)], [0.0; 3]);
    }

    #[test]
    fn closed_form_identity_four() {
        let (f, g) = theorem1_closed_form(&identity(4), 4, 11).unwrap();
        assert!((f - 2.0).abs() < 1e-15 && (g - 0.8).abs() < 1e-15);
    }

    #[test]
    fn closed_form_exact_over_rationals() {
        let one = Ratio::from_integer(1i64);
        let zero = Ratio::from_integer(0i64);
        let sigma: Vec<Ratio<i64>> = (0..16).map(|k| if k / 4 == k % 4 { one } else { zero }).collect();
        let (f, g) = theorem1_closed_form(&sigma, 4, 11).unwrap();
        assert_eq!(f, Ratio::from_integer(2));
        assert_eq!(g, Ratio::new(4, 5));
    }

    #[test]
    fn closed_form_zero_and_asymmetric() {
        assert_eq!(theorem1_closed_form(&[0.0; 9], 3, 5).unwrap(), (0.0, 0.0));
        assert!(theorem1_closed_form(&[1.0, 0.5, 0.0, 1.0], 2, 5).is_err());
    }

    #[test]
    fn non_psd_rejected() {
        let s = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky_psd(&s), Err(Error::NotPsd { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(theorem1_monte_carlo(&s, 5, 1000, &mut rng).is_err());
    }

    #[test]
    fn semidefinite_factorizes() {
        let s = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = cholesky_psd(&s).unwrap();
        assert_eq!(l.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn too_few_trials_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(theorem1_monte_carlo(&s, 5, 10, &mut rng).is_err());
    }
}
