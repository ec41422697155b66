use brimpr_core::adapt::{grad_fixture, objective, prompt_gradcheck, LossConfig, LossTerm, GRADCHECK_STEP, GRADCHECK_TOL};
use brimpr_core::grad::{Tape, Tensor};
use brimpr_core::losses::{
    ada_tp, calibrated_pseudo_label, cmer_loss, compute_disc_report, iicl_loss, pmgfa_loss, total_loss, DiscReport,
};
use brimpr_core::model::{argmax, Binding, ModelConfig};
use brimpr_core::stats::{batch_disc, batch_stats, SourceStatsBank};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn hand_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn every_term_matches_central_differences_on_tiny_model() {
    let fx = grad_fixture::<f64>(ModelConfig::tiny(), 3, 7).unwrap();
    let checks = prompt_gradcheck(&fx, &LossConfig::default(), &LossTerm::ALL, GRADCHECK_STEP, None).unwrap();
    let entries = 2 * ModelConfig::tiny().layers * ModelConfig::tiny().prompts * ModelConfig::tiny().dim;
    for c in &checks {
        assert_eq!(c.check.entries, entries);
        assert!(c.check.passes(GRADCHECK_TOL), "{}: max rel err {:e} at {:?}", c.term, c.check.max_rel_error, c.check.worst);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let fx = grad_fixture::<f64>(ModelConfig::tiny(), 3, 7).unwrap();
    let checks = prompt_gradcheck(&fx, &LossConfig::default(), &[LossTerm::Total], GRADCHECK_STEP, Some(1e-2)).unwrap();
    assert!(!checks[0].check.passes(GRADCHECK_TOL));
    assert_eq!(checks[0].check.worst, (0, 0));
}

#[test]
fn objective_statistics_match_the_plain_feature_path() {
    let fx = grad_fixture::<f64>(ModelConfig::tiny(), 4, 11).unwrap();
    let mut tape = Tape::new();
    let bound = fx.model.bind(&mut tape, Binding::Frozen);
    let o = objective(&mut tape, &bound, &fx.bank, &fx.batch, &fx.masked, &LossConfig::default(), None).unwrap();
    let [da, dv, dj] = batch_disc(&fx.model, &fx.bank, &fx.batch.audio, &fx.batch.video, true).unwrap();
    let r = o.detached.report;
    assert!(close(r.disc_a, da, 1e-12) && close(r.disc_v, dv, 1e-12) && close(r.disc_j, dj, 1e-12));
    assert!(close(tape.item(o.pmgfa), da + dv, 1e-12));
    let logits = fx.model.predict_logits(&fx.batch.audio, &fx.batch.video, true).unwrap();
    for (i, l) in logits.iter().enumerate() {
        for (a, b) in o.logits.row(i).iter().zip(l.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }
    let b = o.breakdown;
    assert!(close(b.total, b.pmgfa + b.cmer + b.iicl, 1e-14));
}

#[test]
fn iicl_two_by_two_matches_enumeration() {
    let a = [[1.0, 2.0, -1.0], [0.5, -0.3, 0.8]];
    let v = [[0.9, 1.5, -0.2], [-1.0, 0.1, 0.4]];
    let tau = 0.25;
    let cos = |x: &[f64; 3], y: &[f64; 3]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (x.iter().map(|p| p * p).sum::<f64>().sqrt() * y.iter().map(|q| q * q).sum::<f64>().sqrt())
    };
    let s = [[cos(&a[0], &v[0]), cos(&a[0], &v[1])], [cos(&a[1], &v[0]), cos(&a[1], &v[1])]];
    let mut expected = 0.0;
    for i in 0..2 {
        let row = [s[i][0] / tau, s[i][1] / tau];
        let col = [s[0][i] / tau, s[1][i] / tau];
        let lse = |z: [f64; 2]| (z[0].exp() + z[1].exp()).ln();
        expected += (row[i] - lse(row)) + (col[i] - lse(col));
    }
    expected *= -1.0 / 4.0;

    let mut tape = Tape::new();
    let za: Vec<_> = a.iter().map(|x| tape.constant(Tensor::vector(x.to_vec()).unwrap())).collect();
    let zv: Vec<_> = v.iter().map(|x| tape.constant(Tensor::vector(x.to_vec()).unwrap())).collect();
    let l = iicl_loss(&mut tape, &za, &zv, tau).unwrap();
    assert!(close(tape.item(l), expected, 1e-13), "{} vs {expected}", tape.item(l));
}

#[test]
fn iicl_of_a_single_pair_is_zero() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap());
    let v = tape.param(Tensor::vector(vec![1.0, 1.0, 0.5]).unwrap());
    let l = iicl_loss(&mut tape, &[a], &[v], 0.07).unwrap();
    assert_eq!(tape.item(l), 0.0);
}

#[test]
fn cmer_matches_hand_cross_entropy() {
    let report = compute_disc_report(3.0f64, 1.0, 4.0, 0.2, 5.0).unwrap();
    assert_eq!((report.lambda_a, report.lambda_v), (0.25, 0.75));
    let logits = Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.2, 0.4, 2.0]).unwrap();
    let pseudo = calibrated_pseudo_label(&logits, report.ada_tp).unwrap();
    let ya = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]];
    let yv = [[0.5, 0.25, 0.25], [0.2, 0.2, 0.6]];
    let mut expected = 0.0;
    for r in 0..2 {
        for c in 0..3 {
            let p = pseudo.at(r, c);
            expected -= report.lambda_a * p * (ya[r][c] + 1e-12f64).ln() / 2.0;
            expected -= report.lambda_v * p * (yv[r][c] + 1e-12f64).ln() / 2.0;
        }
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 3, ya.concat()).unwrap());
    let v = tape.constant(Tensor::matrix(2, 3, yv.concat()).unwrap());
    let l = cmer_loss(&mut tape, a, v, &pseudo, &report).unwrap();
    assert!(close(tape.item(l), expected, 1e-14));
}

#[test]
fn alignment_vanishes_when_target_equals_source() {
    let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]];
    let stats = batch_stats(&Tensor::matrix(3, 2, rows.concat()).unwrap()).unwrap();
    let bank = SourceStatsBank { audio: vec![stats.clone()], video: vec![stats.clone()], joint: vec![stats] };
    let mut tape = Tape::new();
    let layer: Vec<_> = rows.iter().map(|r| tape.param(Tensor::vector(r.clone()).unwrap())).collect();
    let (da, dv, sum) = pmgfa_loss(&mut tape, &bank, &[layer.clone()], &[layer]).unwrap();
    assert!(tape.item(da).abs() < 1e-14 && tape.item(dv).abs() < 1e-14 && tape.item(sum).abs() < 1e-14);
}

#[test]
fn total_is_the_plain_sum() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(Tensor::scalar(1.5));
    let c = tape.param(Tensor::scalar(0.25));
    let i = tape.param(Tensor::scalar(-0.75));
    let (t, b) = total_loss(&mut tape, p, c, i).unwrap();
    assert_eq!(tape.item(t), 1.0);
    assert_eq!(b.total, 1.0);
    let g = tape.backward(t).unwrap();
    assert_eq!([g.wrt(p).item(), g.wrt(c).item(), g.wrt(i).item()], [1.0; 3]);
}

#[test]
fn ada_tp_midpoint() {
    for (tau0, d0) in [(0.2, 5.0), (1.0, 0.0), (0.05, 12.5)] {
        assert!(close(ada_tp(d0, tau0, d0), 1.0 + tau0 / 2.0, 1e-15));
    }
}

#[test]
fn swapped_report_exchanges_weights_only() {
    let r = compute_disc_report(2.0f64, 6.0, 1.0, 0.2, 5.0).unwrap();
    let s = r.swapped();
    assert_eq!((s.lambda_a, s.lambda_v), (r.lambda_v, r.lambda_a));
    assert_eq!(DiscReport { lambda_a: r.lambda_a, lambda_v: r.lambda_v, ..s }, r);
}

#[test]
fn invalid_report_inputs_rejected() {
    assert!(compute_disc_report(-1.0f64, 1.0, 1.0, 0.2, 5.0).is_err());
    assert!(compute_disc_report(f64::NAN, 1.0, 1.0, 0.2, 5.0).is_err());
    assert!(compute_disc_report(1.0f64, 1.0, 1.0, 0.0, 5.0).is_err());
}

proptest! {
    #[test]
    fn lambdas_sum_to_one_and_favor_the_aligned_modality(da in 0.0f64..100.0, dv in 0.0f64..100.0) {
        let r = compute_disc_report(da, dv, 1.0, 0.2, 5.0).unwrap();
        prop_assert!((r.lambda_a + r.lambda_v - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.lambda_a));
        if da > dv {
            prop_assert!(r.lambda_a < r.lambda_v);
        }
    }

    #[test]
    fn ada_tp_stays_inside_open_interval(dj in -1e3f64..1e3, tau0 in 1e-3f64..2.0, d0 in -10.0f64..10.0) {
        let t = ada_tp(dj, tau0, d0);
        prop_assert!(t > 1.0 && t < 1.0 + tau0, "AdaTp {t} outside (1, {})", 1.0 + tau0);
    }

    #[test]
    fn ada_tp_is_nondecreasing(a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ada_tp(lo, 0.2, 5.0) <= ada_tp(hi, 0.2, 5.0));
    }

    #[test]
    fn pseudo_labels_preserve_argmax(logits in prop::collection::vec(-20.0f64..20.0, 2..8), t in 1.0f64..3.0) {
        let x = Tensor::vector(logits.clone()).unwrap();
        let p = calibrated_pseudo_label(&x, t).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax(p.data()), argmax(&logits));
        let plain = calibrated_pseudo_label(&x, 1.0).unwrap();
        for (a, b) in plain.data().iter().zip(hand_softmax(&logits)) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }
}
