//! Alignment, masked-recombination and contrastive objectives.

use crate::error::{invalid, Error, Result};
use crate::grad::{softmax_rows, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::stats::{disc_on_tape, SourceStatsBank};
use crate::model::Modality;

/// Guard inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Detached per-batch discrepancies and the coefficients derived from them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscReport<T> {
    pub disc_a: T,
    pub disc_v: T,
    pub disc_j: T,
    pub lambda_a: T,
    pub lambda_v: T,
    pub ada_tp: T,
}

impl<T: Scalar> DiscReport<T> {
    /// Same report with the two masked-recombination weights exchanged.
    pub fn swapped(mut self) -> Self {
        std::mem::swap(&mut self.lambda_a, &mut self.lambda_v);
        self
    }

    pub fn disc(&self, m: Modality) -> T {
        match m {
            Modality::Audio => self.disc_a,
            Modality::Video => self.disc_v,
        }
    }
}

/// Adaptive temperature `1 + τ0 / (1 + exp(D0 − Disc_J))`, kept strictly
/// inside `(1, 1 + τ0)` even where the sigmoid saturates in floating point.
pub fn ada_tp<T: Scalar>(disc_j: T, tau0: T, d0: T) -> T {
    let raw = T::one() + tau0 / (T::one() + (d0 - disc_j).exp());
    let hi = (T::one() + tau0) * (T::one() - T::epsilon());
    let lo = T::one() + T::epsilon();
    raw.max(lo).min(hi)
}

/// Builds the detached coefficient report for one batch.
///
/// `λ_u = 1 − Disc_u / (Disc_a + Disc_v)`; when both discrepancies are zero
/// the weights fall back to one half each.
pub fn compute_disc_report<T: Scalar>(disc_a: T, disc_v: T, disc_j: T, tau0: T, d0: T) -> Result<DiscReport<T>> {
    for (name, v) in [("disc_a", disc_a), ("disc_v", disc_v), ("disc_j", disc_j)] {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    if !(tau0 > T::zero()) {
        return Err(invalid(format!("tau0 must be positive, got {tau0}")));
    }
    let sum = disc_a + disc_v;
    let (lambda_a, lambda_v) = if sum > T::zero() {
        let la = T::one() - disc_a / sum;
        (la, T::one() - la)
    } else {
        (T::of(0.5), T::of(0.5))
    };
    Ok(DiscReport { disc_a, disc_v, disc_j, lambda_a, lambda_v, ada_tp: ada_tp(disc_j, tau0, d0) })
}

/// Temperature-scaled softmax of `logits` (vector or one row per sample),
/// returned as a plain tensor with no gradient path.
pub fn calibrated_pseudo_label<T: Scalar>(logits: &Tensor<T>, ada_tp: T) -> Result<Tensor<T>> {
    if !(ada_tp > T::zero()) || !ada_tp.is_finite() {
        return Err(invalid(format!("temperature must be positive and finite, got {ada_tp}")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("calibrated_pseudo_label"));
    }
    Ok(softmax_rows(&logits.map(|v| v / ada_tp)))
}

/// Alignment loss `Disc_a + Disc_v` from per-layer pooled features.
///
/// `audio[i]` and `video[i]` hold the `B` pooled vectors of encoder layer `i`.
/// Returns `(disc_a, disc_v, sum)`.
pub fn pmgfa_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &SourceStatsBank<T>,
    audio: &[Vec<Var>],
    video: &[Vec<Var>],
) -> Result<(Var, Var, Var)> {
    let b = audio.first().map_or(0, Vec::len);
    if b < 2 {
        return Err(invalid(format!("alignment loss needs a batch of at least 2, got {b}")));
    }
    let da = disc_on_tape(tape, &bank.audio, audio)?;
    let dv = disc_on_tape(tape, &bank.video, video)?;
    let total = tape.add(da, dv)?;
    Ok((da, dv, total))
}

/// Weighted cross-entropy between the calibrated pseudo-labels and the two
/// masked-recombination predictions, averaged over the batch.
///
/// `y_amv`, `y_avm` are `B × C` probability matrices on the tape; `pseudo`
/// is a detached `B × C` matrix whose rows sum to one.
pub fn cmer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_amv: Var,
    y_avm: Var,
    pseudo: &Tensor<T>,
    report: &DiscReport<T>,
) -> Result<Var> {
    let shape = tape.shape(y_amv).to_vec();
    if tape.shape(y_avm) != shape.as_slice() || pseudo.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "cmer_loss",
            shapes: vec![shape, tape.shape(y_avm).to_vec(), pseudo.shape().to_vec()],
        });
    }
    let (rows, _) = pseudo.dims2();
    for r in 0..rows {
        let s: T = pseudo.row(r).iter().copied().sum();
        if (s - T::one()).abs() > T::of(1e-6) {
            return Err(invalid(format!("pseudo-label row {r} sums to {s}")));
        }
    }
    let p = tape.constant(pseudo.clone());
    let term = |tape: &mut Tape<T>, y: Var, weight: T| -> Result<Var> {
        let g = tape.add_scalar(y, T::of(LOG_EPS))?;
        let l = tape.log(g)?;
        let pl = tape.mul(p, l)?;
        let s = tape.sum(pl)?;
        tape.scale(s, -weight / T::of_usize(rows))
    };
    let la = term(tape, y_amv, report.lambda_a)?;
    let lv = term(tape, y_avm, report.lambda_v)?;
    tape.add(la, lv)
}

/// Symmetric instance-wise InfoNCE over cosine similarities between the two
/// modalities' unimodal features (`B` vectors each), temperature `tau`.
pub fn iicl_loss<T: Scalar>(tape: &mut Tape<T>, za: &[Var], zv: &[Var], tau: T) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let b = za.len();
    if b == 0 || zv.len() != b {
        return Err(invalid(format!("contrastive loss needs equal non-empty batches, got {b} and {}", zv.len())));
    }
    let mut rows = Vec::with_capacity(b);
    for &a in za {
        let sims = zv.iter().map(|&v| tape.cosine(a, v)).collect::<Result<Vec<_>>>()?;
        let row = tape.stack(&sims)?;
        rows.push(tape.reshape(row, &[b])?);
    }
    let s = tape.stack(&rows)?;
    let s = tape.scale(s, T::one() / tau)?;
    let st = tape.transpose(s)?;
    let eye = tape.constant(Tensor::from_fn(&[b, b], |k| if k / b == k % b { T::one() } else { T::zero() }));
    let mut total: Option<Var> = None;
    for m in [s, st] {
        let lp = tape.log_softmax(m)?;
        let diag = tape.mul(lp, eye)?;
        let d = tape.sum(diag)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    tape.scale(total.unwrap(), -T::one() / T::of_usize(2 * b))
}

/// Values of the three objectives and their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub pmgfa: T,
    pub cmer: T,
    pub iicl: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(pmgfa: T, cmer: T, iicl: T) -> Self {
        Self { pmgfa, cmer, iicl, total: pmgfa + cmer + iicl }
    }
}

/// Sums the three objectives on the tape.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, pmgfa: Var, cmer: Var, iicl: Var) -> Result<(Var, LossBreakdown<T>)> {
    let s = tape.add(pmgfa, cmer)?;
    let total = tape.add(s, iicl)?;
    let mut breakdown = LossBreakdown::new(tape.item(pmgfa), tape.item(cmer), tape.item(iicl));
    breakdown.total = tape.item(total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ada_tp_midpoint_and_saturation() {
        let r = compute_disc_report(1.0f64, 1.0, 5.0, 0.2, 5.0).unwrap();
        assert!((r.ada_tp - 1.1).abs() < 1e-15);
        let hi = ada_tp(50.0f64, 0.2, 5.0);
        assert!(hi < 1.2 && 1.2 - hi < 1e-15);
        let lo = ada_tp(0.0f64, 0.2, 500.0);
        assert!(lo > 1.0);
    }

    #[test]
    fn lambda_formula_and_fallback() {
        let r = compute_disc_report(1.0, 3.0, 0.0, 0.2, 5.0).unwrap();
        assert_eq!((r.lambda_a, r.lambda_v), (0.75, 0.25));
        let z = compute_disc_report(0.0, 0.0, 0.0, 0.2, 5.0).unwrap();
        assert_eq!((z.lambda_a, z.lambda_v), (0.5, 0.5));
        assert!(compute_disc_report(-1.0, 0.0, 0.0, 0.2, 5.0).is_err());
        assert!(compute_disc_report(1.0, 0.0, 0.0, 0.0, 5.0).is_err());
    }

    #[test]
    fn pseudo_label_at_temperature_two() {
        let p = calibrated_pseudo_label(&Tensor::vector(vec![2.0, 0.0]).unwrap(), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(LossBreakdown::new(1.0, 2.0, 3.0).total, 6.0);
        assert_eq!(LossBreakdown::new(0.0, 0.0, 0.0).total, 0.0);
    }

    #[test]
    fn iicl_single_sample_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0, -0.5]).unwrap());
        let v = tape.param(Tensor::vector(vec![0.3, -1.0, 0.2]).unwrap());
        let l = iicl_loss(&mut tape, &[a], &[v], 0.07).unwrap();
        assert_eq!(tape.item(l), 0.0);
        assert!(iicl_loss(&mut tape, &[a], &[v], 0.0).is_err());
    }

    #[test]
    fn cmer_rejects_unnormalized_pseudo_labels() {
        let mut tape = Tape::new();
        let y = tape.param(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap();
        let r = compute_disc_report(1.0, 1.0, 1.0, 0.2, 5.0).unwrap();
        assert!(cmer_loss(&mut tape, y, y, &bad, &r).is_err());
    }

    #[test]
    fn cmer_perfect_match_is_zero() {
        let mut tape = Tape::new();
        let one_hot = Tensor::<f64>::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let y = tape.param(one_hot.clone());
        let r = compute_disc_report(1.0, 2.0, 1.0, 0.2, 5.0).unwrap();
        let l = cmer_loss(&mut tape, y, y, &one_hot, &r).unwrap();
        assert!(tape.item(l).abs() < 1e-11f64);
    }
}
