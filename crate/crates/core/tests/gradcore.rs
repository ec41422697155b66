use brimpr_core::grad::{finite_difference_check, Tape, Tensor, Var};
use brimpr_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn check(name: &str, params: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = finite_difference_check(f, params, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
}

/// Reduces any tensor to a scalar with non-uniform weights so that every
/// output entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.77).sin() + 0.3);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let mut naive = [[0.0f64; 2]; 2];
    for (i, row) in naive.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *out += a.at(i, k) * b.at(k, j);
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((tape.value(c).at(i, j) - naive[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m34 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let m45 = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let m54 = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let m34b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let pos34 = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let v4 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let v4b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let v16 = rand_tensor(&mut rng, &[16], -1.0, 1.0);
    let v16b = rand_tensor(&mut rng, &[16], -1.0, 1.0);

    check("matmul", &[m34.clone(), m45.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check("matmul vec", &[v4.clone(), m45.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check("matmul_bt", &[m34.clone(), m54.clone()], |t, v| {
        let y = t.matmul_bt(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check("transpose", &[m34.clone()], |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y)
    });
    check("add/sub/mul/div", &[m34.clone(), m34b.clone(), pos34.clone()], |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[2])?;
        let m = t.mul(s, v[1])?;
        let d = t.div(m, v[2])?;
        weighted_sum(t, d)
    });
    check("row broadcast", &[m34.clone(), v4.clone(), v4b.clone()], |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let m = t.mul_row(a, v[2])?;
        let s = t.scale(m, -1.7)?;
        let s = t.add_scalar(s, 0.3)?;
        weighted_sum(t, s)
    });
    check("exp/log/sqrt/tanh", &[pos34.clone()], |t, v| {
        let e = t.exp(v[0])?;
        let l = t.log(v[0])?;
        let s = t.sqrt(v[0])?;
        let h = t.tanh(v[0])?;
        let a = t.add(e, l)?;
        let b = t.add(s, h)?;
        let c = t.mul(a, b)?;
        weighted_sum(t, c)
    });
    check("softmax", &[m34.clone()], |t, v| {
        let y = t.softmax(v[0])?;
        weighted_sum(t, y)
    });
    check("log_softmax", &[m34.clone()], |t, v| {
        let y = t.log_softmax(v[0])?;
        weighted_sum(t, y)
    });
    check("layer_norm", &[m34.clone(), v4.clone(), v4b.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    });
    check("mean", &[m34.clone(), v16.clone()], |t, v| {
        let a = t.mean(v[0], 0)?;
        let b = t.mean(v[0], 1)?;
        let c = t.mean(v[1], 0)?;
        let wa = weighted_sum(t, a)?;
        let wb = weighted_sum(t, b)?;
        let s = t.add(wa, wb)?;
        t.add(s, c)
    });
    check("concat/slice/gather", &[m34.clone(), m34b.clone()], |t, v| {
        let c = t.concat(&[v[0], v[1]])?;
        let s = t.slice_rows(c, 2, 5)?;
        let g = t.gather_rows(c, &[5, 0, 0, 3])?;
        let ws = weighted_sum(t, s)?;
        let wg = weighted_sum(t, g)?;
        t.add(ws, wg)
    });
    check("row/stack/reshape", &[m34.clone()], |t, v| {
        let r0 = t.row(v[0], 0)?;
        let r2 = t.row(v[0], 2)?;
        let s = t.stack(&[r2, r0, r2])?;
        let r = t.reshape(s, &[2, 6])?;
        weighted_sum(t, r)
    });
    check("norm", &[v16.clone()], |t, v| t.norm(v[0]));
    check("cosine", &[v16.clone(), v16b.clone()], |t, v| t.cosine(v[0], v[1]));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 9], -20.0, 20.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = tape.softmax(v).unwrap();
    let y = tape.value(y);
    for r in 0..6 {
        assert!(y.row(r).iter().all(|&p| p >= 0.0));
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn loss_a(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let y = t.softmax(x)?;
    let z = t.mul(y, y)?;
    t.sum(z)
}

fn loss_b(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let n = t.norm(x)?;
    t.exp(n)
}

#[test]
fn backprop_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);

    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let out = match which {
            0 => loss_a(&mut t, v).unwrap(),
            1 => loss_b(&mut t, v).unwrap(),
            _ => {
                let a = loss_a(&mut t, v).unwrap();
                let b = loss_b(&mut t, v).unwrap();
                t.add(a, b).unwrap()
            }
        };
        t.backward(out).unwrap().wrt(v).clone()
    };
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..ga.len() {
        assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_layer_attention_block_gradients(seed in 0u64..10_000, rows in 1usize..6, cols in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[cols, cols], -0.5, 0.5);
        let g = rand_tensor(&mut rng, &[cols], 0.5, 1.5);
        let r = finite_difference_check(|t, v| {
            let b = t.constant(Tensor::zeros(&[cols]));
            let h = t.layer_norm(v[0], v[2], b)?;
            let q = t.matmul(h, v[1])?;
            let s = t.matmul_bt(q, h)?;
            let a = t.softmax(s)?;
            let o = t.matmul(a, h)?;
            let o = t.tanh(o)?;
            let p = t.mean(o, 0)?;
            weighted_sum(t, p)
        }, &[x, w, g], 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}
