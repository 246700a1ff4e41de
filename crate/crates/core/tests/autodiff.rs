//! Reverse-mode gradients: hand values, composition oracles and
//! central-difference checks over every primitive, block and toy network.

use lgd_core::autodiff::{softmax, softmax_cross_entropy, Graph};
use lgd_core::checks::{self, NETWORK_THRESHOLD, OPS_THRESHOLD};
use lgd_core::ops::{self, ConvSpec};
use lgd_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn relu_forward_and_backward() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![-2.0, 3.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 3.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x);
    let s = g.sum(r);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&[3, 4], 1));
    let s = g.sum(x);
    assert!(g.backward(s).unwrap().get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn constant_graph_yields_constant() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(vec![1.5, -2.0]).unwrap());
    let d = g.scale(c, 2.0);
    assert_eq!(g.value(d).data(), &[3.0, -4.0]);
}

#[test]
fn backward_before_forward_rejected() {
    let g = Graph::new();
    let mut other = Graph::new();
    let v = other.leaf(Tensor::scalar(1.0));
    assert_eq!(g.backward(v).unwrap_err(), Error::BackwardBeforeForward);
}

#[test]
fn composite_matches_manual_composition() {
    let x = rand_tensor(&[2, 3, 2, 5, 5], 2);
    let spec = ConvSpec::new(3, 4, [1, 3, 3]).same_pad();
    let w = rand_tensor(&spec.weight_shape(), 3);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let c = g.conv(xv, wv, spec).unwrap();
    let r = g.relu(c);
    let p = g.global_avg_pool(r).unwrap();
    let manual = ops::global_avg_pool(&ops::relu(&ops::conv(&x, &w, &spec).unwrap())).unwrap();
    assert!(g.value(p).bit_eq(&manual));
}

#[test]
fn cross_entropy_examples() {
    let (l, _) = softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let (l, _) = softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!(l.is_finite() && l.abs() < 1e-12);
    let err = softmax_cross_entropy(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[2]).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
}

#[test]
fn cross_entropy_matches_explicit_softmax_log() {
    let logits = rand_tensor(&[5, 4], 4);
    let labels = [0, 3, 1, 2, 3];
    let (l, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    let mut expect = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * 4..(b + 1) * 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[y].exp() / z).ln();
    }
    assert!((l - expect / 5.0).abs() < 1e-10);
    let p = softmax(&logits).unwrap();
    for row in p.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let x = rand_tensor(&[3, 4], 5);
    let wa = rand_tensor(&[3, 4], 6);
    let wb = rand_tensor(&[3, 4], 7);
    let grad = |both: bool, first: bool| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let s = g.sigmoid(xv);
        let a = g.dot_const(s, wa.clone()).unwrap();
        let r = g.relu(xv);
        let b = g.dot_const(r, wb.clone()).unwrap();
        let out = if both { g.add(a, b).unwrap() } else if first { a } else { b };
        g.backward(out).unwrap().get(xv).unwrap().clone()
    };
    let total = grad(true, true);
    let parts = ops::elementwise_add(&grad(false, true), &grad(false, false)).unwrap();
    assert!(total.bit_eq(&parts));
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&[2, 3, 1, 4, 4], 8));
    let spec = ConvSpec::new(3, 2, [1, 3, 3]).same_pad();
    let w = g.leaf(rand_tensor(&spec.weight_shape(), 9));
    let c = g.conv(x, w, spec).unwrap();
    let p = g.global_avg_pool(c).unwrap();
    let l = g.softmax_cross_entropy(p, &[0, 1]).unwrap();
    let a = g.backward(l).unwrap();
    let b = g.backward(l).unwrap();
    assert!(a.get(x).unwrap().bit_eq(b.get(x).unwrap()));
    assert!(a.get(w).unwrap().bit_eq(b.get(w).unwrap()));
}

#[test]
fn every_primitive_passes_central_differences() {
    let suite = checks::op_checks(17).unwrap();
    assert!(suite.len() >= 15);
    for e in &suite {
        assert!(e.report.max_rel_err() < OPS_THRESHOLD, "{}: {:e}", e.target, e.max_rel_err);
        assert!(e.report.entries.iter().all(|p| p.checked > 0), "{}", e.target);
    }
}

#[test]
fn every_block_variant_passes_central_differences() {
    for e in checks::block_checks(18).unwrap() {
        assert!(e.report.max_rel_err() < NETWORK_THRESHOLD, "{}: {:e}", e.target, e.max_rel_err);
    }
}

#[test]
fn toy_networks_pass_central_differences() {
    let suite = checks::network_checks(19).unwrap();
    assert_eq!(suite.len(), 2);
    for e in &suite {
        assert!(e.report.max_rel_err() < NETWORK_THRESHOLD, "{}: {:e}", e.target, e.max_rel_err);
        let checked: usize = e.report.entries.iter().map(|p| p.checked).sum();
        assert!(checked > 100, "{}", e.target);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_gradient_is_outer_product(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        // d/dW of Σ R ⊙ (x Wᵀ) is Rᵀ x.
        let x = rand_tensor(&[m, k], seed);
        let w = rand_tensor(&[n, k], seed ^ 1);
        let r = rand_tensor(&[m, n], seed ^ 2);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w);
        let y = g.linear(xv, wv).unwrap();
        let l = g.dot_const(y, r.clone()).unwrap();
        let gw = g.backward(l).unwrap().get(wv).unwrap().clone();
        for j in 0..n {
            for kk in 0..k {
                let e: f64 = (0..m).map(|i| r.at(&[i, j]) * x.at(&[i, kk])).sum();
                prop_assert!((gw.at(&[j, kk]) - e).abs() < 1e-12);
            }
        }
    }
}
