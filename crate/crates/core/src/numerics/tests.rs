use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    entries.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

fn check<F>(params: &ParamStore<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var, NumericsError>,
{
    let report = finite_difference_check(f, params, EPS, 0).unwrap();
    assert!(report.passes(TOL), "gradient check failed: {report:?}");
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element receives a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, x: Var) -> Result<Var, NumericsError> {
    let n = g.value(x).numel();
    let w = randn(&[n], 999);
    let flat = g.reshape(x, &[n])?;
    let wv = g.constant(w);
    let p = g.mul(flat, wv)?;
    Ok(g.sum(p))
}

#[test]
fn linear_grad_example() {
    let p = store(&[("w", Tensor::new(&[1], vec![2.0]).unwrap())]);
    let (loss, grads) = forward_backward(&p, |g, v| {
        let x = g.constant(Tensor::new(&[1], vec![3.0]).unwrap());
        let wx = g.mul(v.get("w")?, x)?;
        Ok(g.sum(wx))
    })
    .unwrap();
    assert_eq!(loss, 6.0);
    assert_eq!(grads.get("w").unwrap().data(), &[3.0]);
}

#[test]
fn cosine_with_itself_has_zero_gradient() {
    let p = store(&[("v", Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap())]);
    let (loss, grads) = forward_backward(&p, |g, v| {
        let x = v.get("v")?;
        let c = g.cosine_rows(x, x)?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!((loss - 1.0).abs() < 1e-12);
    assert!(grads.get("v").unwrap().data().iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn identity_loss_check_is_exact() {
    let p = store(&[("x", Tensor::new(&[1], vec![0.7]).unwrap())]);
    let r = finite_difference_check(|g, v| Ok(g.sum(v.get("x")?)), &p, EPS, 0).unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let p = store(&[
        ("w1", randn(&[1, 2], 1)),
        ("b1", randn(&[2], 2)),
        ("w2", randn(&[2, 1], 3)),
        ("b2", randn(&[1], 4)),
        ("w3", randn(&[1, 3], 5)),
    ]);
    assert_eq!(p.numel(), 10);
    let x = randn(&[4, 1], 7);
    check(&p, |g, v| {
        let xin = g.constant(x.clone());
        let h = g.matmul(xin, v.get("w1")?)?;
        let h = g.add_row(h, v.get("b1")?)?;
        let h = g.gelu(h);
        let h = g.matmul(h, v.get("w2")?)?;
        let h = g.add_row(h, v.get("b2")?)?;
        let h = g.gelu(h);
        let h = g.matmul(h, v.get("w3")?)?;
        probe(g, h)
    });
}

#[test]
fn matmul_transpose_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { randn(&[4, 3], 11) } else { randn(&[3, 4], 11) };
        let b = if tb { randn(&[5, 4], 12) } else { randn(&[4, 5], 12) };
        let p = store(&[("a", a), ("b", b)]);
        check(&p, |g, v| {
            let c = g.matmul_t(v.get("a")?, v.get("b")?, ta, tb)?;
            probe(g, c)
        });
    }
}

#[test]
fn bmm_transpose_variants() {
    for (ta, tb) in [(false, false), (false, true), (true, false)] {
        let a = if ta { randn(&[2, 4, 3], 13) } else { randn(&[2, 3, 4], 13) };
        let b = if tb { randn(&[2, 5, 4], 14) } else { randn(&[2, 4, 5], 14) };
        let p = store(&[("a", a), ("b", b)]);
        check(&p, |g, v| {
            let c = g.bmm(v.get("a")?, v.get("b")?, ta, tb)?;
            probe(g, c)
        });
    }
}

#[test]
fn elementwise_primitives() {
    let p = store(&[("a", randn(&[3, 4], 21)), ("b", randn(&[3, 4], 22)), ("s", randn(&[1], 23))]);
    check(&p, |g, v| {
        let (a, b) = (v.get("a")?, v.get("b")?);
        let x = g.add(a, b)?;
        let y = g.sub(x, b)?;
        let z = g.mul(y, b)?;
        let z = g.scale(z, 0.7);
        let z = g.scale_by(z, v.get("s")?)?;
        let e = g.scale(a, 0.3);
        let e = g.exp(e);
        let z = g.add(z, e)?;
        probe(g, z)
    });
}

#[test]
fn softmax_and_layer_norm() {
    let p = store(&[("x", randn(&[3, 5], 31)), ("g", randn(&[5], 32)), ("b", randn(&[5], 33))]);
    check(&p, |g, v| {
        let s = g.softmax(v.get("x")?)?;
        probe(g, s)
    });
    check(&p, |g, v| {
        let y = g.layer_norm(v.get("x")?, v.get("g")?, v.get("b")?, 1e-5)?;
        probe(g, y)
    });
}

#[test]
fn attention_softmax_with_masks() {
    let p = store(&[("x", randn(&[4, 3, 3], 34))]);
    let pad = [false, false, true, false, true, false];
    check(&p, |g, v| {
        let s = g.attention_softmax(v.get("x")?, true, Some((&pad, 2)))?;
        probe(g, s)
    });
}

#[test]
fn embedding_gather_and_reductions() {
    let p = store(&[("t", randn(&[5, 3], 41))]);
    check(&p, |g, v| {
        let r = g.gather_rows(v.get("t")?, &[4, 0, 4, 2])?;
        let r3 = g.reshape(r, &[2, 2, 3])?;
        let m = g.mean_rows(r3)?;
        let s = g.sum(m);
        let r2 = g.gather_rows(v.get("t")?, &[1])?;
        let mm = g.mean(r2);
        let a = g.add(s, mm)?;
        probe(g, a)
    });
}

#[test]
fn cross_entropy_logsumexp_weighted_mean() {
    let p = store(&[("l", randn(&[4, 4], 51))]);
    check(&p, |g, v| g.cross_entropy(v.get("l")?, &[0, 3, 1, 2], &[1.0, 0.0, 2.0, 1.0]));
    check(&p, |g, v| {
        let z = g.logsumexp_rows(v.get("l")?)?;
        let z2 = g.mul(z, z)?;
        g.weighted_mean(z2, &[1.0, 1.0, 0.0, 1.0])
    });
}

#[test]
fn cosine_normalize_concat_maxpool() {
    let p = store(&[("a", randn(&[3, 4], 61)), ("b", randn(&[3, 4], 62))]);
    check(&p, |g, v| {
        let c = g.cosine_rows(v.get("a")?, v.get("b")?)?;
        probe(g, c)
    });
    check(&p, |g, v| {
        let n = g.normalize_rows(v.get("a")?)?;
        let c = g.concat_cols(n, v.get("b")?)?;
        let m = g.max_pool_cols(c, 2)?;
        probe(g, m)
    });
}

#[test]
fn patchify_round_trip_and_grads() {
    let img = randn(&[2, 4, 6, 3], 71);
    let p = store(&[("x", img.clone())]);
    check(&p, |g, v| {
        let pt = g.patchify(v.get("x")?, 2)?;
        let back = g.unpatchify(pt, 2, 4, 6, 3, 2)?;
        let s = g.swap_axes12(back)?;
        probe(g, s)
    });
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let pt = g.patchify(x, 2).unwrap();
    assert_eq!(g.shape(pt), &[2 * 2 * 3, 12]);
    let back = g.unpatchify(pt, 2, 4, 6, 3, 2).unwrap();
    assert_eq!(g.value(back), &img);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.constant(Tensor::randn(&[16, 33], 3.0, &mut rng));
    let s = g.softmax(x).unwrap();
    for r in 0..16 {
        let sum: f32 = g.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_decreases_with_certainty() {
    let mut prev = f64::INFINITY;
    for scale in [1.0, 5.0, 25.0] {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(&[1, 3], vec![scale, 0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(l, &[0], &[1.0]).unwrap();
        let v = g.value(ce).item();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-10);
}

#[test]
fn straight_through_quantization() {
    let codebook = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
    let p = store(&[("z", Tensor::new(&[2, 2], vec![0.9, 1.2, -0.8, 1.7]).unwrap())]);
    let mut g = Graph::new();
    let vars = p.attach(&mut g);
    let z = vars.get("z").unwrap();
    let (q, idx) = g.quantize_st(z, &codebook).unwrap();
    assert_eq!(idx, vec![1, 2]);
    assert_eq!(g.value(q).data(), &[1.0, 1.0, -1.0, 2.0]);
    let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let prod = g.mul(q, w).unwrap();
    let s = g.sum(prod);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(z).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shape_errors_name_both_operands() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(NumericsError::ShapeMismatch { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
    }
}

#[test]
fn deterministic_in_f32() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: ParamStore<f32> = [("w".to_string(), Tensor::randn(&[64, 64], 0.1, &mut rng))].into_iter().collect();
        let x = Tensor::<f32>::randn(&[32, 64], 1.0, &mut rng);
        forward_backward(&p, |g, v| {
            let xin = g.constant(x.clone());
            let h = g.matmul(xin, v.get("w")?)?;
            let h = g.gelu(h);
            let s = g.softmax(h)?;
            Ok(g.mean(s))
        })
        .unwrap()
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn quantizer_is_lowest_index_nearest(seed in 0u64..1000, k in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Tensor::<f64>::randn(&[k, 3], 1.0, &mut rng);
            let x = Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng);
            let idx = nearest_codes(x.data(), 3, cb.data());
            for (r, &i) in idx.iter().enumerate() {
                let d = |c: usize| -> f64 { (0..3).map(|j| (x.row(r)[j] - cb.row(c)[j]).powi(2)).sum() };
                for c in 0..k {
                    prop_assert!(d(i) < d(c) || (d(i) == d(c) && i <= c));
                }
            }
        }
    }
}
