use pnp_core::tensor::{finite_diff_gradient, max_relative_error, relative_error, Graph, Tensor, Var};
use pnp_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Builds a graph from a single input, returning the analytic gradient of the
/// scalar output and the same function as a closure for finite differences.
fn gradient_pair(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = build(&mut g, xv);
    let analytic = g.backward(loss).unwrap().get(xv);
    let numeric = finite_diff_gradient(
        |t| {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let out = build(&mut g, v);
            Ok(g.value(out).item())
        },
        x,
        1e-5,
    )
    .unwrap();
    (analytic, numeric)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::matrix(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let p = g.matmul(i, b).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
    let c = g.constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
    let p = g.matmul(a, c).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).item(), 11.0);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(e @ Error::Dimension { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let (an, nu) = gradient_pair(&a, |g, x| {
        let bv = g.constant(b.clone());
        let wv = g.constant(w.clone());
        let p = g.matmul(x, bv).unwrap();
        let p = g.mul(p, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(max_relative_error(&an, &nu) < 1e-6);
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
}

#[test]
fn softmax_invalid_axis_is_dimension_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.softmax(x, 3), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_jacobian_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[7], 1.0, &mut rng);
    let w = Tensor::randn(&[7], 1.0, &mut rng);
    let (an, nu) = gradient_pair(&x, |g, v| {
        let s = g.softmax(v, 0).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(s, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(max_relative_error(&an, &nu) < 1e-6);
}

#[test]
fn layer_norm_two_elements_and_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 3.0]));
    let y = g.layer_norm(x, 1e-5).unwrap();
    let v = g.value(y).data();
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(v, &[-expected, expected], 1e-12));
    assert!(close(v, &[-1.0, 1.0], 1e-5));

    let x = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let y = g.layer_norm(x, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[8], 1.0, &mut rng);
    let w = Tensor::randn(&[8], 1.0, &mut rng);
    let (an, nu) = gradient_pair(&x, |g, v| {
        let y = g.layer_norm(v, 1e-5).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(max_relative_error(&an, &nu) < 1e-6);
}

#[test]
fn backward_hand_cases() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.0, 2.0, 7.0]));
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn composed_matmul_softmax_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let t = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let (an, nu) = gradient_pair(&x, |g, v| {
        let wv = g.constant(w.clone());
        let tv = g.constant(t.clone());
        let p = g.matmul(v, wv).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let s = g.mul(s, tv).unwrap();
        g.mean(s).unwrap()
    });
    assert!(max_relative_error(&an, &nu) < 1e-5);
}

#[test]
fn finite_difference_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[3, 4], 2.0, &mut rng);
    let grad = finite_diff_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
    assert!(grad.data().iter().all(|g| (g - 1.0).abs() < 1e-9));

    let grad = finite_diff_gradient(|t| Ok(t.item() * t.item()), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!((grad.item() - 6.0).abs() < 1e-8);
}

#[test]
fn finite_difference_propagates_non_finite_values() {
    let x = Tensor::vector(vec![0.0, 1.0]);
    let out = finite_diff_gradient(|t| Ok((t.data()[0] - 1e-5).ln()), &x, 1e-5);
    assert!(matches!(out, Err(Error::Evaluation(_))));
}

#[test]
fn finite_difference_agrees_with_backward_on_three_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let w1 = Tensor::randn(&[5, 6], 0.5, &mut rng);
    let w2 = Tensor::randn(&[6, 4], 0.5, &mut rng);
    let w3 = Tensor::randn(&[4, 2], 0.5, &mut rng);
    let (an, nu) = gradient_pair(&x, |g, v| {
        let mut h = v;
        for w in [&w1, &w2, &w3] {
            let wv = g.constant(w.clone());
            h = g.matmul(h, wv).unwrap();
            h = g.sigmoid(h).unwrap();
        }
        g.sum(h).unwrap()
    });
    assert!(max_relative_error(&an, &nu) < 1e-5);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let w = g.param(Tensor::randn(&[3, 3], 1.0, &mut rng));
    let h = g.matmul(x, w).unwrap();
    let h = g.layer_norm(h, 1e-5).unwrap();
    let h = g.softmax(h, 1).unwrap();
    let s = g.sum(h).unwrap();
    let replayed = g.replay().unwrap();
    assert_eq!(replayed.len(), g.len());
    assert_eq!(replayed[s.index()].data()[0].to_bits(), g.value(s).item().to_bits());
    assert_eq!(replayed, g.replay().unwrap());
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
}

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(1..40)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(data));
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_has_zero_mean(data in finite_vec(1..40)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(data));
        let y = g.layer_norm(x, 1e-5).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn elementwise_gradients_match_finite_difference(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let (an, nu) = gradient_pair(&x, |g, v| {
            let wv = g.constant(w.clone());
            let s = g.sigmoid(v).unwrap();
            let p = g.mul(s, wv).unwrap();
            let q = g.mul(p, v).unwrap();
            g.sum(q).unwrap()
        });
        prop_assert!(max_relative_error(&an, &nu) < 1e-5);
    }
}
