use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, rel_err};
use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k) = a.dims2();
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * m + j] = s;
        }
    }
    out
}

#[test]
fn linear_identity_rows_return_weight() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let w = g.constant(Tensor::from_rows(&[&[0.3, -2.0, 5.0], &[7.0, 0.5, -1.0]]));
    let b = g.constant(Tensor::row_vector(vec![0.0; 3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), g.value(w).data());
}

#[test]
fn linear_identity_weight_plus_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
    let w = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(Tensor::row_vector(vec![3.0, 4.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
    let want = triple_loop(&a, &b);
    let mut g = Graph::new();
    let (x, w) = (g.constant(a), g.constant(b));
    let y = g.linear(x, w, None).unwrap();
    for (got, want) in g.value(y).data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn linear_rejects_mismatched_inner_dims() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(2, 3));
    let w = g.constant(Tensor::zeros(2, 3));
    assert!(matches!(g.linear(x, w, None), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_uniform_limit_and_oracle() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
    let s = g.softmax_rows(x).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::from_rows(&[&[5.0, 5.0 + 800.0]]));
    let s = g.softmax_rows(x).unwrap();
    assert!(g.value(s).data()[1] > 1.0 - 1e-12 && g.value(s).data()[0] < 1e-300);

    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
    let s = g.softmax_rows(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in g.value(s).data().iter().enumerate() {
        assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(1, 4, 1.0));
    let zeros = g.constant(Tensor::zeros(1, 4));
    let x = g.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0, 5.0]]));
    let y = g.layer_norm(x, ones, zeros, tol::LN_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let one2 = g.constant(Tensor::full(1, 2, 1.0));
    let zero2 = g.constant(Tensor::zeros(1, 2));
    let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]));
    let y = g.layer_norm(x, one2, zero2, 1e-300).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -1.0]);

    // two-pass statistics oracle
    let row = [1.0, 2.0, 3.0, 4.0];
    let mean = row.iter().sum::<f64>() / 4.0;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    let x = g.constant(Tensor::from_rows(&[&row]));
    let y = g.layer_norm(x, ones, zeros, tol::LN_EPS).unwrap();
    for (got, v) in g.value(y).data().iter().zip(row) {
        assert!((got - (v - mean) / (var + tol::LN_EPS).sqrt()).abs() < 1e-12);
    }
    let out = g.value(y).data();
    let m = out.iter().sum::<f64>() / 4.0;
    let s = out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
    assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_rejects_single_column() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(3, 1));
    let a = g.constant(Tensor::full(1, 1, 1.0));
    let b = g.constant(Tensor::zeros(1, 1));
    assert!(matches!(g.layer_norm(x, a, b, tol::LN_EPS), Err(Error::Degenerate { .. })));
}

#[test]
fn residual_enhance_examples() {
    let mut g = Graph::new();
    let aux = g.constant(Tensor::from_rows(&[&[2.0, 4.0]]));
    let zero = g.constant(Tensor::zeros(1, 2));
    let y = g.residual_enhance(zero, aux, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);

    let base = g.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
    let y = g.residual_enhance(base, aux, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0]);

    let y = g.residual_enhance(base, aux, 0.1).unwrap();
    let want = [1.0 + 0.1 * 2.0, 1.0 + 0.1 * 4.0];
    assert_eq!(g.value(y).data(), &want);
    assert!((g.value(y).data()[0] - 1.2).abs() < 1e-12 && (g.value(y).data()[1] - 1.4).abs() < 1e-12);

    let wide = g.constant(Tensor::zeros(1, 3));
    assert!(matches!(g.residual_enhance(base, wide, 1.0), Err(Error::Dimension { .. })));
}

#[test]
fn backward_of_sum_is_ones_and_of_zero_scale_is_zero() {
    let mut store = ParamStore::new();
    let p = store.add_xavier("p", 3, 2, 1);
    let mut g = Graph::with_params(&store);
    let pv = g.param(p);
    let s = g.sum(pv).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.params().get(p).unwrap(), &[1.0; 6]);

    let mut g = Graph::with_params(&store);
    let pv = g.param(p);
    let z = g.scale(pv, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap().into_params();
    drop(g);
    store.zero_grad();
    store.accumulate(&grads);
    assert!(store.get(p).gradient().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(2, 2), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[&[1.0]]));
    let z = g.constant(Tensor::from_rows(&[&[0.0]]));
    assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
}

#[test]
fn multilabel_bce_toy_gradient_matches_central_differences() {
    let logits = Tensor::row_vector(vec![0.7, -1.3]);
    let targets = [1.0, 0.0];
    let r = check(&[logits], tol::FD_STEP, |g, v| {
        let l = g.bce_with_logits(v[0], &targets)?;
        g.mean(l)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

type Prim = fn(&mut Graph, &[Var]) -> crate::error::Result<Var>;

/// Each primitive wrapped so the output is reduced to a scalar through a
/// fixed random projection (so every output entry gets a distinct weight).
fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, Prim)> {
    fn proj(g: &mut Graph, y: Var) -> crate::error::Result<Var> {
        let (r, c) = g.value(y).dims2();
        let w = Tensor::matrix(r, c, (0..r * c).map(|k| ((k * 37 % 11) as f64 - 5.0) / 4.0).collect());
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            proj(g, y)
        }),
        ("matmul_nt", vec![(3, 4), (5, 4)], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            proj(g, y)
        }),
        ("linear", vec![(2, 3), (3, 4), (1, 4)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            proj(g, y)
        }),
        ("add", vec![(2, 3), (2, 3)], |g, v| {
            let y = g.add(v[0], v[1])?;
            proj(g, y)
        }),
        ("sub", vec![(2, 3), (2, 3)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            proj(g, y)
        }),
        ("mul", vec![(2, 3), (2, 3)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        }),
        ("div", vec![(2, 3), (2, 3)], |g, v| {
            let d = g.add_scalar(v[1], 3.0)?;
            let y = g.div(v[0], d)?;
            proj(g, y)
        }),
        ("minimum", vec![(3, 3), (3, 3)], |g, v| {
            let y = g.minimum(v[0], v[1])?;
            proj(g, y)
        }),
        ("maximum", vec![(3, 3), (3, 3)], |g, v| {
            let y = g.maximum(v[0], v[1])?;
            proj(g, y)
        }),
        ("scale", vec![(2, 2)], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            proj(g, y)
        }),
        ("residual_enhance", vec![(3, 2), (3, 2)], |g, v| {
            let y = g.residual_enhance(v[0], v[1], 0.37)?;
            proj(g, y)
        }),
        ("relu", vec![(4, 4)], |g, v| {
            let y = g.relu(v[0])?;
            proj(g, y)
        }),
        ("sigmoid", vec![(3, 3)], |g, v| {
            let y = g.sigmoid(v[0])?;
            proj(g, y)
        }),
        ("abs", vec![(3, 3)], |g, v| {
            let y = g.abs(v[0])?;
            proj(g, y)
        }),
        ("bce_with_logits", vec![(2, 3)], |g, v| {
            let y = g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
            proj(g, y)
        }),
        ("softmax_rows", vec![(3, 5)], |g, v| {
            let y = g.softmax_rows(v[0])?;
            proj(g, y)
        }),
        ("log_softmax_rows", vec![(3, 5)], |g, v| {
            let y = g.log_softmax_rows(v[0])?;
            proj(g, y)
        }),
        ("layer_norm", vec![(3, 5), (1, 5), (1, 5)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], tol::LN_EPS)?;
            proj(g, y)
        }),
        ("l2_normalize_rows", vec![(3, 4)], |g, v| {
            let y = g.l2_normalize_rows(v[0])?;
            proj(g, y)
        }),
        ("mean_rows", vec![(4, 3)], |g, v| {
            let y = g.mean_rows(v[0])?;
            proj(g, y)
        }),
        ("mean", vec![(4, 3)], |g, v| g.mean(v[0])),
        ("repeat_rows", vec![(1, 3)], |g, v| {
            let y = g.repeat_rows(v[0], 4)?;
            proj(g, y)
        }),
        ("concat_rows", vec![(2, 3), (1, 3)], |g, v| {
            let y = g.concat_rows(&[v[0], v[1], v[0]])?;
            proj(g, y)
        }),
        ("slice_rows", vec![(5, 3)], |g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            proj(g, y)
        }),
        ("slice_cols", vec![(3, 5)], |g, v| {
            let y = g.slice_cols(v[0], 2, 2)?;
            proj(g, y)
        }),
        ("select_rows", vec![(4, 3)], |g, v| {
            let y = g.select_rows(v[0], &[3, 0, 3])?;
            proj(g, y)
        }),
        ("pick", vec![(3, 3)], |g, v| {
            let y = g.pick(v[0], &[(0, 1), (2, 2), (0, 1)])?;
            proj(g, y)
        }),
    ]
}

#[test]
fn every_primitive_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, f) in primitive_cases() {
        for _ in 0..3 {
            let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
            let r = check(&inputs, tol::FD_STEP, f).unwrap();
            assert!(r.passes(), "{name}: {r:?}");
        }
    }
}

#[test]
fn rel_err_floors_tiny_gradients() {
    assert!(rel_err(1e-9, 0.0) < 1e-5);
    assert!(rel_err(1.0, 1.1) > 0.05);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(row));
        let s = g.softmax_rows(x).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < tol::ROW_SUM);
        prop_assert!(g.value(s).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn residual_enhance_inverts(base in prop::collection::vec(-10f64..10.0, 6), aux in prop::collection::vec(-10f64..10.0, 6), w in -3f64..3.0) {
        let mut g = Graph::new();
        let b = g.constant(Tensor::matrix(2, 3, base.clone()));
        let a = g.constant(Tensor::matrix(2, 3, aux));
        let up = g.residual_enhance(b, a, w).unwrap();
        let back = g.residual_enhance(up, a, -w).unwrap();
        for (x, y) in g.value(back).data().iter().zip(&base) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
