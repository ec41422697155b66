use brimpr_core::model::{ModelBundle, ModelConfig};
use brimpr_core::stats::{
    batch_disc, batch_stats, disc, entry_variance, precompute_source_bank, sample_covariance, theorem1_closed_form,
    theorem1_monte_carlo, BatchFeatures, LayerGaussianStats,
};
use brimpr_core::synthdata::{gen_labeled, TaskSpec};
use brimpr_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-3.0..3.0))
}

fn identity(d: usize) -> Tensor {
    Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 })
}

#[test]
fn batch_stats_match_two_pass_oracle() {
    let x = random_matrix(64, 8, &mut ChaCha8Rng::seed_from_u64(1));
    let s = batch_stats(&x).unwrap();
    for j in 0..8 {
        let col: Vec<f64> = (0..64).map(|i| x.at(i, j)).collect();
        let mu = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 63.0;
        assert!(close(s.mean[j], mu, 1e-12) && close(s.std[j], var.sqrt(), 1e-12));
    }
}

fn stats_strategy(layers: usize, d: usize) -> impl Strategy<Value = Vec<LayerGaussianStats<f64>>> {
    prop::collection::vec(
        (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(0.0f64..5.0, d))
            .prop_map(|(mean, std)| LayerGaussianStats { mean, std }),
        layers,
    )
}

proptest! {
    #[test]
    fn disc_matches_direct_formula(pair in (1usize..4, 1usize..6).prop_flat_map(|(l, d)| (stats_strategy(l, d), stats_strategy(l, d)))) {
        let (s, t) = pair;
        let mut expected = 0.0;
        for (a, b) in s.iter().zip(&t) {
            let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
            let ds: f64 = a.std.iter().zip(&b.std).map(|(x, y)| (x - y).powi(2)).sum();
            expected += dm.sqrt() + ds.sqrt();
        }
        expected /= s.len() as f64;
        let got = disc(&s, &t).unwrap();
        prop_assert!(close(got, expected, 1e-12));
        prop_assert!(got >= 0.0);
        prop_assert_eq!(disc(&s, &s).unwrap(), 0.0);
    }
}

#[test]
fn source_bank_shape_determinism_and_self_discrepancy() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ModelBundle::<f64>::init(cfg, &mut rng).unwrap();
    let src = gen_labeled::<f64, _>(&TaskSpec::for_model(&cfg), 32, &mut rng).unwrap();
    for prompts in [false, true] {
        let bank = precompute_source_bank(&model, &src.audio, &src.video, prompts).unwrap();
        assert_eq!((bank.audio.len(), bank.video.len(), bank.joint.len()), (cfg.layers, cfg.layers, cfg.joint_layers));
        assert!(bank.audio.iter().chain(&bank.video).chain(&bank.joint).all(|s| s.dim() == cfg.dim));
        assert_eq!(bank, precompute_source_bank(&model, &src.audio, &src.video, prompts).unwrap());
        let d = batch_disc(&model, &bank, &src.audio, &src.video, prompts).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-10), "self-discrepancy {d:?}");
    }
}

#[test]
fn identical_samples_have_zero_feature_spread() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ModelBundle::<f64>::init(cfg, &mut rng).unwrap();
    let one = gen_labeled::<f64, _>(&TaskSpec::for_model(&cfg), 1, &mut rng).unwrap();
    let xa = vec![one.audio[0].clone(); 5];
    let xv = vec![one.video[0].clone(); 5];
    let f = BatchFeatures::collect(&model, &xa, &xv, true).unwrap();
    for layers in [&f.audio, &f.video, &f.joint] {
        for s in BatchFeatures::stats(layers).unwrap() {
            assert!(s.std.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn sample_covariance_matches_double_loop_oracle() {
    let x = random_matrix(50, 4, &mut ChaCha8Rng::seed_from_u64(4));
    let est = sample_covariance(&x).unwrap();
    let mu: Vec<f64> = (0..4).map(|j| (0..50).map(|i| x.at(i, j)).sum::<f64>() / 50.0).collect();
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..50 {
                s += (x.at(k, i) - mu[i]) * (x.at(k, j) - mu[j]);
            }
            assert!(close(est.full.at(i, j), s / 49.0, 1e-12));
            assert_eq!(est.full.at(i, j), est.full.at(j, i));
        }
        assert_eq!(est.diag[i], est.full.at(i, i));
    }
}

#[test]
fn closed_form_scaling_in_dimension() {
    let n = 11;
    let forms: Vec<(f64, f64)> =
        [2usize, 4, 8].iter().map(|&d| theorem1_closed_form(identity(d).data(), d, n).unwrap()).collect();
    for (k, &d) in [2usize, 4, 8].iter().enumerate() {
        let d = d as f64;
        assert!(close(forms[k].0, (d + d * d) / 10.0, 1e-15));
        assert!(close(forms[k].1, 2.0 * d / 10.0, 1e-15));
    }
    assert!(close(forms[2].0 / forms[1].0, 72.0 / 20.0, 1e-15));
    assert!(close(forms[2].1 / forms[1].1, 2.0, 1e-15));
}

/// Random SPD matrix `G Gᵀ / d + 0.1 I`.
fn random_spd(d: usize, rng: &mut impl Rng) -> Tensor {
    let g = random_matrix(d, d, rng);
    Tensor::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        (0..d).map(|l| g.at(i, l) * g.at(j, l)).sum::<f64>() / d as f64 / 9.0 + if i == j { 0.1 } else { 0.0 }
    })
}

#[test]
fn monte_carlo_converges_on_random_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (d, n) in [(2, 5), (3, 20), (5, 64), (8, 12)] {
        let sigma = random_spd(d, &mut rng);
        let (cf, cd) = theorem1_closed_form(sigma.data(), d, n).unwrap();
        let mc = theorem1_monte_carlo(&sigma, n, 10_000, &mut rng).unwrap();
        assert!((mc.frobenius_mse / cf - 1.0).abs() < 0.05, "d={d} n={n}: {} vs {cf}", mc.frobenius_mse);
        assert!((mc.diag_mse / cd - 1.0).abs() < 0.05, "d={d} n={n}: {} vs {cd}", mc.diag_mse);
    }
}

#[test]
fn per_entry_variance_and_unbiasedness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 4;
    let n = 11;
    let sigma = random_spd(d, &mut rng);
    let mc = theorem1_monte_carlo(&sigma, n, 10_000, &mut rng).unwrap();
    for (k, (got, want)) in mc.entry_variance.iter().zip(entry_variance(&sigma, n)).enumerate() {
        assert!((got / want - 1.0).abs() < 0.1, "entry {k}: {got} vs {want}");
    }
    for (k, &m) in mc.mean_estimate.iter().enumerate() {
        let s = sigma.data()[k];
        if s.abs() >= 0.1 {
            assert!((m / s - 1.0).abs() < 0.02, "entry {k}: mean {m} vs {s}");
        }
    }
}

#[test]
fn full_estimate_errs_more_than_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in [2, 3, 6] {
        let sigma = Tensor::from_fn(&[d, d], |k| if k / d == k % d { 0.5 + (k / d) as f64 } else { 0.0 });
        let mc = theorem1_monte_carlo(&sigma, 9, 2000, &mut rng).unwrap();
        assert!(mc.frobenius_mse > mc.diag_mse);
    }
}

#[test]
fn degenerate_covariance_has_no_error() {
    let zero = Tensor::from_fn(&[3, 3], |_| 0.0);
    assert_eq!(theorem1_closed_form(zero.data(), 3, 5).unwrap(), (0.0, 0.0));
    let mc = theorem1_monte_carlo(&zero, 5, 1000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!((mc.frobenius_mse, mc.diag_mse), (0.0, 0.0));
}
