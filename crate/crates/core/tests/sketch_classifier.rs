//! Tensor sketch against the explicit outer-product count sketch, kernel
//! estimation statistics, and the combined feature and heads.

use std::sync::Arc;

use lgd_core::autodiff::Graph;
use lgd_core::checks::sketch_bench;
use lgd_core::classifier::{argmax, classify, combined_feature, combined_feature_values, Head};
use lgd_core::lgd::PairVars;
use lgd_core::nn::{Ctx, Mode, ParamStore};
use lgd_core::sketch::{count_sketch, polynomial_kernel, sketch_kernel_estimate, tensor_sketch, SketchConfig};
use lgd_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tables drawn here, independently of `SketchConfig::new`.
fn random_tables(c: usize, d: usize, rng: &mut ChaCha8Rng) -> SketchConfig {
    let hash = |rng: &mut ChaCha8Rng| (0..c).map(|_| rng.gen_range(0..d)).collect::<Vec<_>>();
    let sign = |rng: &mut ChaCha8Rng| (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect::<Vec<_>>();
    let h1 = hash(rng);
    let h2 = hash(rng);
    let s1 = sign(rng);
    let s2 = sign(rng);
    SketchConfig { input_dim: c, sketch_dim: d, seed: 0, h1, h2, s1, s2 }
}

/// Count sketch of the flattened outer product `x xᵀ` under the pair hash
/// `(h1(i) + h2(j)) mod d` and the pair sign `s1(i) s2(j)`.
fn outer_product_oracle(x: &[f64], cfg: &SketchConfig) -> Vec<f64> {
    let c = x.len();
    let flat: Vec<(usize, f64)> = (0..c * c)
        .map(|ij| {
            let (i, j) = (ij / c, ij % c);
            ((cfg.h1[i] + cfg.h2[j]) % cfg.sketch_dim, cfg.s1[i] * cfg.s2[j] * x[i] * x[j])
        })
        .collect();
    let mut out = vec![0.0; cfg.sketch_dim];
    for (k, v) in flat {
        out[k] += v;
    }
    out
}

#[test]
fn count_sketch_examples() {
    let out = count_sketch(&[1.0, 2.0, 3.0, 4.0], &[0, 1, 2, 3], &[1.0, -1.0, 1.0, -1.0], 4).unwrap();
    assert_eq!(out, vec![1.0, -2.0, 3.0, -4.0]);
    assert_eq!(count_sketch(&[0.0; 3], &[0, 2, 2], &[1.0, 1.0, -1.0], 3).unwrap(), vec![0.0; 3]);
    assert!(count_sketch(&[1.0; 3], &[0, 1], &[1.0, 1.0], 2).is_err());
}

#[test]
fn count_sketch_matches_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let c = rng.gen_range(1..12);
        let d = rng.gen_range(2..20);
        let cfg = random_tables(c, d, &mut rng);
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expect = vec![0.0; d];
        for i in 0..c {
            expect[cfg.h1[i]] += cfg.s1[i] * x[i];
        }
        assert_eq!(count_sketch(&x, &cfg.h1, &cfg.s1, d).unwrap(), expect);
    }
}

#[test]
fn fft_sketch_equals_outer_product_sketch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=32);
        let cfg = random_tables(c, d, &mut rng);
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fast = tensor_sketch(&x, &cfg).unwrap();
        for (a, b) in fast.iter().zip(outer_product_oracle(&x, &cfg)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "max abs diff {worst:e}");
}

#[test]
fn zero_input_sketches_to_zero() {
    let cfg = SketchConfig::new(8, 32, 3).unwrap();
    assert!(tensor_sketch(&[0.0; 8], &cfg).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(sketch_kernel_estimate(&[0.0; 8], &[0.0; 8], &cfg).unwrap(), 0.0);
}

#[test]
fn kernel_estimate_is_unbiased_and_tightens_with_width() {
    let c = 16;
    let trials = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.gen_range(-0.5..0.5)).collect();
    let exact = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().powi(2);
    let mut rmse = Vec::new();
    for d in [64, 1024] {
        let est: Vec<f64> = (0..trials)
            .map(|t| sketch_kernel_estimate(&x, &y, &SketchConfig::new(c, d, 1000 * d as u64 + t).unwrap()).unwrap())
            .collect();
        let n = trials as f64;
        let mean = est.iter().sum::<f64>() / n;
        let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - exact).abs() < 3.0 * sd / n.sqrt(), "d={d}: mean {mean} exact {exact} sd {sd}");
        rmse.push((est.iter().map(|e| (e - exact).powi(2)).sum::<f64>() / n).sqrt());
    }
    assert!(rmse[1] < rmse[0], "{rmse:?}");
}

#[test]
fn bench_report_sweeps_width() {
    let r = sketch_bench(16, &[64, 256, 1024], 200, 5).unwrap();
    assert!(r.oracle_pass);
    assert_eq!(r.zero_estimate, 0.0);
    assert!(r.rows.windows(2).all(|w| w[1].rmse < w[0].rmse), "{r:?}");
    assert!(r.rows.iter().all(|row| row.z_score < 3.0), "{r:?}");
    assert!(sketch_bench(16, &[64], 49, 5).is_err());
}

fn pair_graph(x: &Tensor, g: &Tensor, cfg: &Arc<SketchConfig>) -> Tensor {
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let gv = graph.constant(g.clone());
    let f = combined_feature(&mut graph, PairVars { x: xv, g: gv }, cfg).unwrap();
    graph.value(f).clone()
}

#[test]
fn combined_feature_matches_location_loop() {
    let cfg = Arc::new(SketchConfig::new(6, 24, 6).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[3, 6, 2, 3, 2], 1.0, &mut rng).unwrap();
    let g = Tensor::randn(&[3, 6], 1.0, &mut rng).unwrap();
    let fast = pair_graph(&x, &g, &cfg);
    assert_eq!(fast.shape(), &[3, 48]);
    // Independent loop: sketch every location and average.
    for b in 0..3 {
        let mut acc = vec![0.0; 24];
        for t in 0..2 {
            for h in 0..3 {
                for w in 0..2 {
                    let v: Vec<f64> = (0..6).map(|c| x.at(&[b, c, t, h, w])).collect();
                    for (a, s) in acc.iter_mut().zip(tensor_sketch(&v, &cfg).unwrap()) {
                        *a += s;
                    }
                }
            }
        }
        let gs = tensor_sketch(&g.data()[b * 6..(b + 1) * 6], &cfg).unwrap();
        for k in 0..24 {
            assert!((fast.at(&[b, k]) - acc[k] / 12.0).abs() < 1e-10);
            assert!((fast.at(&[b, 24 + k]) - gs[k]).abs() < 1e-10);
        }
    }
    assert!(fast.max_abs_diff(&combined_feature_values(&x, &g, &cfg).unwrap()) < 1e-10);
}

#[test]
fn combined_feature_special_cases() {
    let cfg = Arc::new(SketchConfig::new(4, 16, 8).unwrap());
    let v = [0.3, -1.2, 2.0, 0.7];
    let x = Tensor::new(vec![1, 4, 2, 2, 2], v.iter().flat_map(|&a| [a; 8]).collect()).unwrap();
    let f = pair_graph(&x, &Tensor::zeros(&[1, 4]).unwrap(), &cfg);
    let phi = tensor_sketch(&v, &cfg).unwrap();
    assert!(f.data()[..16].iter().zip(&phi).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(f.data()[16..].iter().all(|&z| z == 0.0));
    let mut graph = Graph::new();
    let xv = graph.constant(Tensor::zeros(&[1, 5, 1, 1, 1]).unwrap());
    let gv = graph.constant(Tensor::zeros(&[1, 5]).unwrap());
    assert!(combined_feature(&mut graph, PairVars { x: xv, g: gv }, &cfg).is_err());
}

fn head_store(head: &str, w: Tensor, b: Tensor) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(format!("head.{head}.weight"), w);
    p.insert(format!("head.{head}.bias"), b);
    p
}

#[test]
fn zero_head_ties_to_class_zero() {
    let params = head_store("combined", Tensor::zeros(&[3, 8]).unwrap(), Tensor::zeros(&[3]).unwrap());
    let buffers = ParamStore::new();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &buffers, Mode::Eval);
    let f = ctx.graph.constant(Tensor::zeros(&[1, 8]).unwrap());
    let logits = classify(&mut ctx, f, Head::Combined).unwrap();
    let z = ctx.graph.value(logits).data().to_vec();
    assert_eq!(z, vec![0.0; 3]);
    assert_eq!(argmax(&z), 0);
    let wrong = ctx.graph.constant(Tensor::zeros(&[1, 7]).unwrap());
    assert!(classify(&mut ctx, wrong, Head::Combined).is_err());
}

#[test]
fn identity_head_logit_gap_is_feature_gap() {
    let params = head_store("global", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2]).unwrap());
    let buffers = ParamStore::new();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &buffers, Mode::Eval);
    let f = ctx.graph.constant(Tensor::new(vec![1, 2], vec![0.25, 1.5]).unwrap());
    let logits = classify(&mut ctx, f, Head::Global).unwrap();
    let z = ctx.graph.value(logits).data();
    assert_eq!(z[1] - z[0], 1.5 - 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sketch_is_quadratic_and_kernel_is_symmetric(seed in any::<u64>(), c in 1usize..10, d in 2usize..40, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_tables(c, d, &mut rng);
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let px = tensor_sketch(&x, &cfg).unwrap();
        for (s, t) in tensor_sketch(&ax, &cfg).unwrap().iter().zip(&px) {
            prop_assert!((s - a * a * t).abs() < 1e-9);
        }
        let kxy = sketch_kernel_estimate(&x, &y, &cfg).unwrap();
        let kyx = sketch_kernel_estimate(&y, &x, &cfg).unwrap();
        prop_assert!((kxy - kyx).abs() < 1e-12);
        prop_assert!(polynomial_kernel(&x, &y) >= 0.0);
    }
}
