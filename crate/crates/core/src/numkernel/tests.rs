use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f` (a scalar function of its leaves)
/// against the tape gradient. Returns the worst relative error.
fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.scalar(l)
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum so that every output element gets a distinct upstream grad.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut rng, &shape);
    let wv = tape.leaf(w);
    let p = tape.mul(x, wv).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t = Tape::new();
    let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = t.matmul(i, b).unwrap();
    assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.data(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match t.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let err = grad_check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, c, 7)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn matmul_nt_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[3, 5]);
    let b = random_tensor(&mut rng, &[4, 5]);
    let err = grad_check(&[a, b], |t, v| {
        let c = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, c, 8)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_known_rows() {
    let mut t = Tape::new();
    let x = t.constant(&[3, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = t.softmax_rows(x).unwrap();
    let d = t.data(y);
    for v in &d[0..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((d[3] - 1.0).abs() < 1e-15 && d[4] < 1e-300 && d[5] < 1e-300);
    // e^k / (e + e^2 + e^3), evaluated with mpmath at 50 digits
    let expected = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_64,
        0.665_240_955_774_821_9,
    ];
    for (v, e) in d[6..9].iter().zip(expected) {
        assert!((v - e).abs() < 1e-15, "{v} vs {e}");
    }
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[3, 4]);
    let err = grad_check(std::slice::from_ref(&x), |t, v| {
        let y = t.softmax_rows(v[0]).unwrap();
        weighted_sum(t, y, 9)
    });
    assert!(err < 1e-4, "softmax rel err {err}");
    let err = grad_check(&[x], |t, v| {
        let y = t.log_softmax_rows(v[0]).unwrap();
        weighted_sum(t, y, 10)
    });
    assert!(err < 1e-4, "log_softmax rel err {err}");
}

#[test]
fn masked_softmax_zeros_masked_entries_and_rejects_full_rows() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
    let mask = [false, true, false, false, false, false];
    let y = t.softmax_rows_masked(x, Some(&mask)).unwrap();
    assert_eq!(t.data(y)[1], 0.0);
    assert!((t.data(y)[0] + t.data(y)[2] - 1.0).abs() < 1e-15);
    let full = [true, true, true, false, false, false];
    assert!(matches!(
        t.softmax_rows_masked(x, Some(&full)),
        Err(Error::DegenerateMask { row: 0 })
    ));
}

#[test]
fn attention_single_key_and_symmetry() {
    let mut t = Tape::new();
    let q = t.constant(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
    let k = t.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
    let v = t.constant(&[1, 2], vec![5.0, 6.0]).unwrap();
    let (out, w) = t.scaled_dot_attention(q, k, v, None).unwrap();
    assert!(t.data(w).iter().all(|&x| x == 1.0));
    assert_eq!(t.data(out), &[5.0, 6.0, 5.0, 6.0, 5.0, 6.0]);

    // q orthogonal to keys of equal norm
    let q = t.constant(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap();
    let k = t.constant(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let v = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
    let (out, w) = t.scaled_dot_attention(q, k, v, None).unwrap();
    assert_eq!(t.data(w), &[0.5, 0.5]);
    assert_eq!(t.data(out), &[2.0, 2.0, 2.0]);
}

#[test]
fn attention_two_by_two_hand_computation() {
    // q = [[1,0],[0,1]], k = [[1,1],[0,2]], v = [[1,2],[3,4]], d = 2
    // logits row0 = [1, 0]/√2, row1 = [1, 2]/√2
    let mut t = Tape::new();
    let q = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let k = t.constant(&[2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
    let v = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (out, w) = t.scaled_dot_attention(q, k, v, None).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let w0 = [s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0)];
    let w1 = [s.exp() / (s.exp() + (2.0 * s).exp()), (2.0 * s).exp() / (s.exp() + (2.0 * s).exp())];
    let expect_w = [w0[0], w0[1], w1[0], w1[1]];
    let expect_out = [
        w0[0] + 3.0 * w0[1],
        2.0 * w0[0] + 4.0 * w0[1],
        w1[0] + 3.0 * w1[1],
        2.0 * w1[0] + 4.0 * w1[1],
    ];
    for (a, b) in t.data(w).iter().zip(expect_w) {
        assert!((a - b).abs() < 1e-14);
    }
    for (a, b) in t.data(out).iter().zip(expect_out) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_gradient_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_tensor(&mut rng, &[3, 4]);
    let k = random_tensor(&mut rng, &[3, 4]);
    let v = random_tensor(&mut rng, &[3, 4]);
    let mask = [false, true, true, false, false, true, false, false, false];
    let err = grad_check(&[q, k, v], |t, vs| {
        let (o, _) = t.scaled_dot_attention(vs[0], vs[1], vs[2], Some(&mask)).unwrap();
        weighted_sum(t, o, 11)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn layer_norm_cases() {
    let mut t = Tape::new();
    let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
    let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let x = t.constant(&[2, 2], vec![5.0, 5.0, 1.0, 3.0]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(&t.data(y)[0..2], &[0.0, 0.0]);
    // mean 2, var 1: (x - 2)/sqrt(1 + 1e-5)
    let v = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((t.data(y)[2] + v).abs() < 1e-15);
    assert!((t.data(y)[3] - v).abs() < 1e-15);
    assert!(1.0 - v > 0.0);
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[4, 16]);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let g = t.constant(&[16], vec![1.0; 16]).unwrap();
    let b = t.constant(&[16], vec![0.0; 16]).unwrap();
    let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
    for row in t.data(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // eps shrinks the variance slightly for unit-scale rows
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[3, 5]);
    let g = random_tensor(&mut rng, &[5]);
    let b = random_tensor(&mut rng, &[5]);
    let err = grad_check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(t, y, 12)
    });
    assert!(err < 1e-4, "rel err {err}");
}

fn naive_conv(x: &[f64], w: &[f64], t: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        for c in 0..d {
            let mut acc = 0.0;
            for ki in 0..k {
                let s = ti as i64 + ki as i64 - (k / 2) as i64;
                if (0..t as i64).contains(&s) {
                    acc += x[s as usize * d + c] * w[ki * d + c];
                }
            }
            out[ti * d + c] = acc;
        }
    }
    out
}

#[test]
fn depthwise_conv_cases() {
    let mut t = Tape::new();
    let x = t.constant(&[3, 1], vec![0.0, 3.0, 0.0]).unwrap();
    let avg = t.constant(&[3, 1], vec![1.0 / 3.0; 3]).unwrap();
    let y = t.depthwise_conv1d(x, avg).unwrap();
    for v in t.data(y) {
        assert!((v - 1.0).abs() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xr = random_tensor(&mut rng, &[6, 3]);
    let delta = Tensor::new(vec![5, 3], {
        let mut d = vec![0.0; 15];
        d[6..9].copy_from_slice(&[1.0, 1.0, 1.0]);
        d
    })
    .unwrap();
    let xv = t.leaf(xr.clone());
    let dv = t.leaf(delta);
    let y = t.depthwise_conv1d(xv, dv).unwrap();
    assert_eq!(t.data(y), xr.data());

    let wr = random_tensor(&mut rng, &[5, 3]);
    let wv = t.leaf(wr.clone());
    let y = t.depthwise_conv1d(xv, wv).unwrap();
    let naive = naive_conv(xr.data(), wr.data(), 6, 3, 5);
    for (a, b) in t.data(y).iter().zip(&naive) {
        assert!((a - b).abs() < 1e-12);
    }

    let even = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(t.depthwise_conv1d(xv, even), Err(Error::Config(_))));
}

#[test]
fn depthwise_conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[5, 3]);
    let w = random_tensor(&mut rng, &[3, 3]);
    let err = grad_check(&[x, w], |t, v| {
        let y = t.depthwise_conv1d(v[0], v[1]).unwrap();
        weighted_sum(t, y, 13)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn backward_simple_cases_and_accumulation() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    t.zero_grads();

    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(t.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn elementwise_activation_and_misc_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 4]);
    let bias = random_tensor(&mut rng, &[4]);
    let err = grad_check(&[a, b, bias], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let m = t.mul(s, v[1]).unwrap();
        let sw = t.swish(m);
        let ge = t.gelu(sw);
        let bb = t.add_bias(ge, v[2]).unwrap();
        let sc = t.scale(bb, 0.7);
        let gl = t.glu(sc).unwrap();
        let cat = t.concat_cols(&[gl, v[0]]).unwrap();
        let sl = t.slice_cols(cat, 1, 4).unwrap();
        let mean = t.mean_of(&[sl, v[1]]).unwrap();
        weighted_sum(t, mean, 14)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn embedding_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = random_tensor(&mut rng, &[5, 3]);
    let w = random_tensor(&mut rng, &[3, 4]);
    let err = grad_check(&[table, w], |t, v| {
        let e = t.embedding(v[0], &[1, 3, 1, 0]).unwrap();
        let logits = t.matmul(e, v[1]).unwrap();
        t.cross_entropy(logits, &[0, 3, 2, 1], 0.1).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn cross_entropy_value() {
    let mut t = Tape::new();
    let x = t.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let l = t.cross_entropy(x, &[1], 0.0).unwrap();
    assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
    // smoothing toward uniform on a uniform prediction leaves the loss at ln C
    let l = t.cross_entropy(x, &[1], 0.2).unwrap();
    assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn dropout_is_seeded_and_identity_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[4, 4]);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let same = t.dropout(xv, 0.0, &mut rng).unwrap();
    assert_eq!(same, xv);
    let a = t.dropout(xv, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = t.dropout(xv, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(t.data(a), t.data(b));
    assert!(t.data(a).contains(&0.0));
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_tensor(&mut rng, &[4, 8]);
        let mut t = Tape::new();
        let qv = t.leaf(q);
        let (o, w) = t.scaled_dot_attention(qv, qv, qv, None).unwrap();
        let y = t.gelu(o);
        (t.data(y).to_vec(), t.data(w).to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_counter_tracks_score_products() {
    reset_attention_score_madds();
    let mut t = Tape::new();
    let q = t.constant(&[3, 4], vec![0.1; 12]).unwrap();
    let k = t.constant(&[5, 4], vec![0.2; 20]).unwrap();
    t.scaled_dot_attention(q, k, k, None).unwrap();
    assert_eq!(attention_score_madds(), 3 * 5 * 4);
}

proptest! {
    #[test]
    fn concat_then_split_is_identity(r1 in 0usize..5, r2 in 0usize..5, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[r1, c]);
        let b = random_tensor(&mut rng, &[r2, c]);
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let cat = t.concat_rows(&[av, bv]).unwrap();
        let (x, y) = t.split_rows(cat, r1).unwrap();
        prop_assert_eq!(t.data(x), a.data());
        prop_assert_eq!(t.data(y), b.data());
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
        let mut t = Tape::new();
        let x = t.constant(&[3, 4], vals).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for row in t.data(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn random_shapes_pass_gradient_check(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let g = random_tensor(&mut rng, &[n]);
        let bias = random_tensor(&mut rng, &[n]);
        let err = grad_check(&[a, b, g, bias], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let ln = t.layer_norm(c, v[2], v[3], 1e-5).unwrap();
            let s = t.swish(ln);
            let sm = t.softmax_rows(s).unwrap();
            weighted_sum(t, sm, seed)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }
}
