//! The diffusion block and its two ablation variants against dense and
//! elementwise references.

use lgd_core::autodiff::{grad_check, GradCheckOptions, Graph, Var};
use lgd_core::backbone::ResidualUnit;
use lgd_core::lgd::{count_extra_params, reduced_rank, BlockVariant, DiffusionBlock, LocalTransform, PairVars, Projection};
use lgd_core::nn::{Ctx, Mode, ParamStore};
use lgd_core::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Identity;

impl LocalTransform for Identity {
    fn apply(&self, _ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn unit(c_in: usize, c_out: usize) -> ResidualUnit {
    ResidualUnit { prefix: "u".into(), c_in, mid: 4, c_out, spatial_stride: 1, temporal: Some(3) }
}

/// Evaluates `block` on `(x, g)` with transform `f`; returns `(x_l, g_l)`.
fn run<F: LocalTransform>(block: &DiffusionBlock, f: &F, params: &ParamStore, buffers: &ParamStore, x: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, params, buffers, Mode::Eval);
    let xv = ctx.graph.constant(x.clone());
    let gv = ctx.graph.constant(g.clone());
    let out = block.forward(&mut ctx, f, PairVars { x: xv, g: gv }).unwrap();
    (ctx.graph.value(out.x).clone(), ctx.graph.value(out.g).clone())
}

fn transform_only<F: LocalTransform>(f: &F, params: &ParamStore, buffers: &ParamStore, x: &Tensor) -> Tensor {
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, params, buffers, Mode::Eval);
    let xv = ctx.graph.constant(x.clone());
    let y = f.apply(&mut ctx, xv).unwrap();
    ctx.graph.value(y).clone()
}

/// `W₁ (W₂ v)` per batch row, by explicit dense product `W = W₁ W₂`.
fn dense_apply(w1: &Tensor, w2: &Tensor, v: &Tensor) -> Tensor {
    let (co, r) = (w1.shape()[0], w1.shape()[1]);
    let ci = w2.shape()[1];
    let mut w = vec![0.0; co * ci];
    for i in 0..co {
        for j in 0..ci {
            w[i * ci + j] = (0..r).map(|k| w1.at(&[i, k]) * w2.at(&[k, j])).sum();
        }
    }
    let b = v.shape()[0];
    let mut out = Tensor::zeros(&[b, co]).unwrap();
    for bi in 0..b {
        for i in 0..co {
            out.set(&[bi, i], (0..ci).map(|j| w[i * ci + j] * v.at(&[bi, j])).sum());
        }
    }
    out
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn init(block: &DiffusionBlock, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    block.init(&mut p, seed, false).unwrap();
    p
}

fn zero_projections(params: &mut ParamStore, block: &DiffusionBlock) {
    for name in block.param_names() {
        let t = params.get_mut(&name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_global_residual_reduces_to_plain_transform() {
    for variant in [BlockVariant::Lgd, BlockVariant::V1] {
        let f = unit(16, 16);
        let block = DiffusionBlock::new("d", variant, 16, 16);
        let mut params = init(&block, 1);
        let mut buffers = ParamStore::new();
        f.init(&mut params, &mut buffers, 1, false).unwrap();
        for suffix in ["w1", "w2"] {
            params.get_mut(&format!("d.xg.{suffix}")).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = rand_tensor(&[2, 16, 3, 4, 4], 2);
        let g = rand_tensor(&[2, 16], 3);
        let (xl, _) = run(&block, &f, &params, &buffers, &x, &g);
        let expect = transform_only(&f, &params, &buffers, &x).map(relu);
        assert!(xl.bit_eq(&expect), "{variant:?}");
    }
}

#[test]
fn local_update_matches_dense_composition() {
    for variant in [BlockVariant::Lgd, BlockVariant::V1, BlockVariant::V2] {
        let block = DiffusionBlock::new("d", variant, 16, 16);
        let params = init(&block, 4);
        let buffers = ParamStore::new();
        let x = rand_tensor(&[1, 16, 2, 4, 4], 5);
        let g = rand_tensor(&[1, 16], 6);
        let (xl, _) = run(&block, &Identity, &params, &buffers, &x, &g);
        let r = dense_apply(params.get("d.xg.w1").unwrap(), params.get("d.xg.w2").unwrap(), &g);
        let mut expect = x.clone();
        for c in 0..16 {
            for i in 0..32 {
                let v = x.data()[c * 32 + i];
                expect.data_mut()[c * 32 + i] = match variant {
                    BlockVariant::V2 => relu(v * sigmoid(r.at(&[0, c]))),
                    _ => relu(v + r.at(&[0, c])),
                };
            }
        }
        assert!(xl.max_abs_diff(&expect) < 1e-10, "{variant:?}");
    }
}

#[test]
fn gate_limits_of_channel_multiplication() {
    let block = DiffusionBlock { projection: Projection::Dense, ..DiffusionBlock::new("d", BlockVariant::V2, 4, 4) };
    let mut params = init(&block, 7);
    let buffers = ParamStore::new();
    let x = rand_tensor(&[1, 4, 2, 3, 3], 8);
    let g = Tensor::full(&[1, 4], 1.0).unwrap();

    params.insert("d.xg.w", Tensor::zeros(&[4, 4]).unwrap());
    let (xl, _) = run(&block, &Identity, &params, &buffers, &x, &g);
    assert!(xl.bit_eq(&x.map(|v| relu(0.5 * v))));

    params.insert("d.xg.w", Tensor::full(&[4, 4], 1e3).unwrap());
    let (xl, _) = run(&block, &Identity, &params, &buffers, &x, &g);
    assert!(xl.bit_eq(&x.map(relu)));
}

#[test]
fn global_update_examples() {
    let v1 = DiffusionBlock::new("d", BlockVariant::V1, 3, 3);
    let params = init(&v1, 9);
    let buffers = ParamStore::new();
    let levels = [0.5, 2.0, 3.5];
    let x = Tensor::new(vec![1, 3, 2, 2, 2], levels.iter().flat_map(|&v| [v; 8]).collect()).unwrap();
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &params, &buffers, Mode::Eval);
    let xv = ctx.graph.constant(x.clone());
    let gv = ctx.graph.constant(rand_tensor(&[1, 3], 10));
    let out = v1.global_update(&mut ctx, xv, gv).unwrap();
    assert_eq!(ctx.graph.value(out).data(), &levels);

    let dense = DiffusionBlock { projection: Projection::Dense, ..DiffusionBlock::new("d", BlockVariant::Lgd, 3, 3) };
    let mut params = ParamStore::new();
    params.insert("d.gx.w", Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    params.insert("d.gg.w", Tensor::zeros(&[3, 3]).unwrap());
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &params, &buffers, Mode::Eval);
    let xv = ctx.graph.constant(x);
    let gv = ctx.graph.constant(rand_tensor(&[1, 3], 11));
    let out = dense.global_update(&mut ctx, xv, gv).unwrap();
    assert_eq!(ctx.graph.value(out).data(), &levels);
}

#[test]
fn global_update_matches_dense_composition() {
    for variant in [BlockVariant::Lgd, BlockVariant::V2] {
        let block = DiffusionBlock::new("d", variant, 16, 32);
        let params = init(&block, 12);
        let buffers = ParamStore::new();
        let xl = rand_tensor(&[2, 32, 2, 3, 3], 13);
        let g = rand_tensor(&[2, 16], 14);
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &params, &buffers, Mode::Eval);
        let xv = ctx.graph.constant(xl.clone());
        let gv = ctx.graph.constant(g.clone());
        let out = block.global_update(&mut ctx, xv, gv).unwrap();
        let got = ctx.graph.value(out).clone();
        let pooled = lgd_core::ops::global_avg_pool(&xl).unwrap();
        let a = dense_apply(params.get("d.gx.w1").unwrap(), params.get("d.gx.w2").unwrap(), &pooled);
        let b = dense_apply(params.get("d.gg.w1").unwrap(), params.get("d.gg.w2").unwrap(), &g);
        let expect = lgd_core::ops::elementwise_add(&a, &b).unwrap().map(relu);
        assert_eq!(got.shape(), &[2, 32]);
        assert!(got.max_abs_diff(&expect) < 1e-10);
    }
}

#[test]
fn all_zero_diffusion_is_a_plain_residual_block() {
    let f = unit(16, 16);
    let block = DiffusionBlock::new("d", BlockVariant::Lgd, 16, 16);
    let mut params = init(&block, 15);
    zero_projections(&mut params, &block);
    let mut buffers = ParamStore::new();
    f.init(&mut params, &mut buffers, 15, false).unwrap();
    let x = rand_tensor(&[2, 16, 2, 4, 4], 16);
    let (xl, gl) = run(&block, &f, &params, &buffers, &x, &rand_tensor(&[2, 16], 17));
    assert!(xl.bit_eq(&transform_only(&f, &params, &buffers, &x).map(relu)));
    assert!(gl.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_block_passes_central_differences() {
    for variant in [BlockVariant::Lgd, BlockVariant::V1, BlockVariant::V2] {
        let f = ResidualUnit { prefix: "u".into(), c_in: 16, mid: 4, c_out: 16, spatial_stride: 1, temporal: Some(3) };
        let block = DiffusionBlock::new("d", variant, 16, 16);
        let mut params = init(&block, 18);
        let mut buffers = ParamStore::new();
        f.init(&mut params, &mut buffers, 18, false).unwrap();
        let mut list: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let n = list.len();
        list.push(("x".into(), rand_tensor(&[1, 16, 2, 4, 4], 19)));
        list.push(("g".into(), rand_tensor(&[1, 16], 20)));
        let rx = rand_tensor(&[1, 16, 2, 4, 4], 21);
        let rg = rand_tensor(&[1, 16], 22);
        let names: Vec<String> = list[..n].iter().map(|(s, _)| s.clone()).collect();
        let report = grad_check(
            |graph, v| {
                let mut ctx = Ctx::new(graph, &params, &buffers, Mode::Train);
                for (name, &leaf) in names.iter().zip(v) {
                    ctx.bind(name.clone(), leaf);
                }
                let out = block.forward(&mut ctx, &f, PairVars { x: v[n], g: v[n + 1] })?;
                let a = ctx.graph.dot_const(out.x, rx.clone())?;
                let b = ctx.graph.dot_const(out.g, rg.clone())?;
                ctx.graph.add(a, b)
            },
            &list,
            &GradCheckOptions { coords_per_param: 32, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{variant:?}: {:e}", report.max_rel_err());
    }
}

#[test]
fn parameter_reduction_at_resnet_widths() {
    assert_eq!(count_extra_params(256), 24576);
    assert_eq!(count_extra_params(256), 3 * 256 * 256 / 8);
    assert_eq!(count_extra_params(64), 3 * 64 * 64 / 8);
    let block = DiffusionBlock::new("d", BlockVariant::Lgd, 256, 256);
    let params = init(&block, 23);
    assert_eq!(params.scalar_count(), 24576);
}

#[test]
fn mismatched_widths_rejected() {
    let block = DiffusionBlock::new("d", BlockVariant::Lgd, 8, 8);
    let params = init(&block, 24);
    let buffers = ParamStore::new();
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &params, &buffers, Mode::Eval);
    let x = ctx.graph.constant(Tensor::zeros(&[1, 8, 1, 2, 2]).unwrap());
    let g = ctx.graph.constant(Tensor::zeros(&[1, 7]).unwrap());
    assert!(block.forward(&mut ctx, &Identity, PairVars { x, g }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extra_parameters_are_six_c_times_rank(k in 1usize..40) {
        let c = 16 * k;
        prop_assert_eq!(count_extra_params(c), 6 * c * (c / 16));
        prop_assert_eq!(8 * count_extra_params(c), 3 * c * c);
        prop_assert_eq!(reduced_rank(c), k);
    }

    #[test]
    fn low_rank_equals_dense_product(seed in any::<u64>(), c_in in 1usize..40, c_out in 1usize..40) {
        let low = DiffusionBlock::new("d", BlockVariant::Lgd, c_in, c_out);
        let params = init(&low, seed);
        let mut dense_params = ParamStore::new();
        for p in ["xg", "gx", "gg"] {
            let w1 = params.get(&format!("d.{p}.w1")).unwrap();
            let w2 = params.get(&format!("d.{p}.w2")).unwrap();
            let (co, r, ci) = (w1.shape()[0], w1.shape()[1], w2.shape()[1]);
            let mut w = Tensor::zeros(&[co, ci]).unwrap();
            for i in 0..co {
                for j in 0..ci {
                    w.set(&[i, j], (0..r).map(|k| w1.at(&[i, k]) * w2.at(&[k, j])).sum());
                }
            }
            dense_params.insert(format!("d.{p}.w"), w);
        }
        let dense = DiffusionBlock { projection: Projection::Dense, ..low.clone() };
        let buffers = ParamStore::new();
        let x = rand_tensor(&[2, c_out, 1, 2, 2], seed ^ 3);
        let g = rand_tensor(&[2, c_in], seed ^ 4);
        let (xa, ga) = run(&low, &Identity, &params, &buffers, &x, &g);
        let (xb, gb) = run(&dense, &Identity, &dense_params, &buffers, &x, &g);
        prop_assert!(xa.max_abs_diff(&xb) < 1e-10);
        prop_assert!(ga.max_abs_diff(&gb) < 1e-10);
    }
}
