//! Verification suites shared by the command line and the test targets:
//! central-difference gradient checks over ops, blocks and networks, and
//! Monte Carlo statistics of the tensor sketch.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckOptions, GradReport, Graph, Var};
use crate::backbone::{Network, NetworkSpec, ResidualUnit};
use crate::error::{Error, Result};
use crate::lgd::{BlockVariant, DiffusionBlock, PairVars};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::ops::ConvSpec;
use crate::sketch::{outer_product_sketch, polynomial_kernel, sketch_kernel_estimate, tensor_sketch, SketchConfig};
use crate::tensor::Tensor;
use crate::train::{stage1_loss, stage2_loss};

/// Threshold for smooth primitive ops.
pub const OPS_THRESHOLD: f64 = 1e-5;
/// Threshold for composed blocks and networks.
pub const NETWORK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Block,
    Network,
}

impl Scope {
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Ops => OPS_THRESHOLD,
            Scope::Block | Scope::Network => NETWORK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub target: String,
    pub scope: Scope,
    pub threshold: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub report: GradReport,
}

fn entry(target: &str, scope: Scope, report: GradReport) -> SuiteEntry {
    let threshold = scope.threshold();
    SuiteEntry {
        target: target.to_string(),
        scope,
        threshold,
        max_rel_err: report.max_rel_err(),
        passed: report.passes(threshold),
        report,
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries of magnitude in `[0.5, 2]` with random signs; keeps square
/// roots away from their singularity.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut t = Tensor::uniform(shape, 0.5, 2.0, rng)?;
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    Ok(t)
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Every primitive differentiable op, each reduced to a scalar through a
/// fixed random projection.
pub fn op_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { coords_per_param: 24, seed, ..Default::default() };
    let mut cases: Vec<(&str, Vec<(String, Tensor)>, Objective)> = Vec::new();
    let named = |items: Vec<(&str, Tensor)>| -> Vec<(String, Tensor)> {
        items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };

    let spec = ConvSpec::new(3, 4, [3, 3, 3]).same_pad().with_stride([1, 2, 2]);
    let proj = randn(&[2, 4, 4, 3, 3], &mut rng)?;
    cases.push((
        "conv",
        named(vec![("x", randn(&[2, 3, 4, 5, 5], &mut rng)?), ("w", randn(&spec.weight_shape(), &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.conv(v[0], v[1], spec)?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[2, 3, 2, 3, 3], &mut rng)?;
    cases.push((
        "max_pool",
        named(vec![("x", randn(&[2, 3, 4, 3, 3], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.max_pool(v[0], [2, 1, 1], [2, 1, 1])?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[2, 3], &mut rng)?;
    cases.push((
        "global_avg_pool",
        named(vec![("x", randn(&[2, 3, 2, 3, 3], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[2, 3, 2, 2, 2], &mut rng)?;
    cases.push((
        "broadcast_over_locations",
        named(vec![("v", randn(&[2, 3], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.broadcast_over_locations(v[0], &[2, 3, 2, 2, 2])?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[3, 4], &mut rng)?;
    cases.push((
        "linear_add_bias",
        named(vec![
            ("x", randn(&[3, 5], &mut rng)?),
            ("w", randn(&[4, 5], &mut rng)?),
            ("b", randn(&[4], &mut rng)?),
        ]),
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[2, 6], &mut rng)?;
    cases.push((
        "add_mul_scale",
        named(vec![("a", randn(&[2, 6], &mut rng)?), ("b", randn(&[2, 6], &mut rng)?)]),
        Box::new(move |g, v| {
            let s = g.add(v[0], v[1])?;
            let p = g.mul(s, v[1])?;
            let y = g.scale(p, -1.5);
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[4, 5], &mut rng)?;
    cases.push((
        "relu",
        named(vec![("x", randn(&[4, 5], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[4, 5], &mut rng)?;
    cases.push((
        "sigmoid",
        named(vec![("x", randn(&[4, 5], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[3, 2, 2, 2, 2], &mut rng)?;
    cases.push((
        "batch_norm_train",
        named(vec![
            ("x", randn(&[3, 2, 2, 2, 2], &mut rng)?),
            ("gamma", randn(&[2], &mut rng)?),
            ("beta", randn(&[2], &mut rng)?),
        ]),
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            g.dot_const(y, proj.clone())
        }),
    ));

    let proj = randn(&[3, 2, 1, 2, 2], &mut rng)?;
    let mean = randn(&[2], &mut rng)?.into_data();
    let var: Vec<f64> = Tensor::uniform(&[2], 0.5, 2.0, &mut rng)?.into_data();
    cases.push((
        "batch_norm_eval",
        named(vec![
            ("x", randn(&[3, 2, 1, 2, 2], &mut rng)?),
            ("gamma", randn(&[2], &mut rng)?),
            ("beta", randn(&[2], &mut rng)?),
        ]),
        Box::new(move |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            g.dot_const(y, proj.clone())
        }),
    ));

    cases.push((
        "softmax_cross_entropy",
        named(vec![("logits", randn(&[4, 3], &mut rng)?)]),
        Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
    ));

    cases.push(("sum", named(vec![("x", randn(&[3, 4], &mut rng)?)]), Box::new(|g, v| Ok(g.sum(v[0])))));

    let proj = randn(&[4, 6], &mut rng)?;
    cases.push((
        "to_rows_reshape",
        named(vec![("x", randn(&[2, 3, 1, 2, 2], &mut rng)?)]),
        Box::new(move |g, v| {
            let r = g.reshape(v[0], &[2, 3, 2, 2])?;
            let r = g.reshape(r, &[2, 3, 1, 2, 2])?;
            let rows = g.to_rows(r)?;
            let rows = g.reshape(rows, &[4, 6])?;
            g.dot_const(rows, proj.clone())
        }),
    ));

    let cfg = Arc::new(SketchConfig::new(5, 16, seed ^ 0x5ce7)?);
    let proj = randn(&[2, 32], &mut rng)?;
    cases.push((
        "tensor_sketch_group_mean_concat",
        named(vec![("rows", randn(&[6, 5], &mut rng)?), ("g", randn(&[2, 5], &mut rng)?)]),
        Box::new(move |g, v| {
            let a = g.tensor_sketch(v[0], cfg.clone())?;
            let a = g.group_mean(a, 2)?;
            let b = g.tensor_sketch(v[1], cfg.clone())?;
            let f = g.concat_cols(a, b)?;
            g.dot_const(f, proj.clone())
        }),
    ));

    let proj = randn(&[3, 7], &mut rng)?;
    cases.push((
        "power_normalize",
        named(vec![("x", away_from_zero(&[3, 7], &mut rng)?)]),
        Box::new(move |g, v| {
            let y = g.power_normalize(v[0])?;
            g.dot_const(y, proj.clone())
        }),
    ));

    cases
        .into_iter()
        .map(|(name, params, f)| Ok(entry(name, Scope::Ops, grad_check(f, &params, &opts)?)))
        .collect()
}

/// Runs `f` with every named parameter pre-bound to the matching leaf; the
/// trailing leaves (beyond the store) are passed through as inputs.
fn with_bound<'a>(
    g: &'a mut Graph,
    leaves: &[Var],
    names: &[String],
    params: &'a ParamStore,
    buffers: &'a ParamStore,
) -> Ctx<'a> {
    let mut ctx = Ctx::new(g, params, buffers, Mode::Train);
    for (n, &v) in names.iter().zip(leaves) {
        ctx.bind(n.clone(), v);
    }
    ctx
}

/// One diffusion block of each variant around a bottleneck unit with a
/// temporal cascade and a projection shortcut; inputs are checked too.
pub fn block_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { coords_per_param: 12, seed, ..Default::default() };
    let mut out = Vec::new();
    for variant in [BlockVariant::Lgd, BlockVariant::V1, BlockVariant::V2] {
        let unit = ResidualUnit {
            prefix: "blk".into(),
            c_in: 8,
            mid: 4,
            c_out: 16,
            spatial_stride: 2,
            temporal: Some(3),
        };
        let block = DiffusionBlock::new("blk.diffusion", variant, 8, 16);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        unit.init(&mut params, &mut buffers, seed, false)?;
        block.init(&mut params, seed, false)?;
        let mut list: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
        list.push(("input.x".into(), randn(&[2, 8, 3, 4, 4], &mut rng)?));
        list.push(("input.g".into(), randn(&[2, 8], &mut rng)?));
        let wx = randn(&[2, 16, 3, 2, 2], &mut rng)?;
        let wg = randn(&[2, 16], &mut rng)?;
        let n = names.len();
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let mut ctx = with_bound(g, v, &names, &params, &buffers);
            let pair = block.forward(&mut ctx, &unit, PairVars { x: v[n], g: v[n + 1] })?;
            let a = ctx.graph.dot_const(pair.x, wx.clone())?;
            let b = ctx.graph.dot_const(pair.g, wg.clone())?;
            ctx.graph.add(a, b)
        };
        let name = format!("block_{}", variant_name(variant));
        out.push(entry(&name, Scope::Block, grad_check(f, &list, &opts)?));
    }
    Ok(out)
}

fn variant_name(v: BlockVariant) -> &'static str {
    match v {
        BlockVariant::Lgd => "lgd",
        BlockVariant::V1 => "v1",
        BlockVariant::V2 => "v2",
    }
}

/// Reduced-resolution toy networks used for end-to-end checks.
pub fn gradcheck_specs() -> Vec<(&'static str, NetworkSpec)> {
    let mut two = NetworkSpec::toy_2d(3);
    two.input_shape = [3, 16, 16];
    let mut three = NetworkSpec::toy_3d(3);
    three.input_shape = [4, 16, 16];
    vec![("network_lgd_2d", two), ("network_lgd_3d", three)]
}

/// Stage-1 plus stage-2 objective of a whole network, so that the stem,
/// every block, all three heads and the sketch are on the gradient path.
pub fn network_check(spec: &NetworkSpec, seed: u64, coords_per_param: usize) -> Result<GradReport> {
    let net = Network::build(spec, seed, seed ^ 0xabc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [t, h, w] = spec.input_shape;
    let input = randn(&[2, spec.in_channels, t, h, w], &mut rng)?;
    let labels = [0usize, spec.num_classes - 1];
    let list: Vec<(String, Tensor)> = net.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut ctx = with_bound(g, v, &names, &net.params, &net.buffers);
        let x = ctx.graph.constant(input.clone());
        let out = net.forward(&mut ctx, x)?;
        let l1 = stage1_loss(&mut ctx, out.pair, &labels, &net.sketch)?;
        let l2 = stage2_loss(&mut ctx, out.pair, &labels, &net.sketch, false)?;
        ctx.graph.add(l1.total, l2.total)
    };
    let opts = GradCheckOptions { coords_per_param, seed, ..Default::default() };
    grad_check(f, &list, &opts)
}

pub fn network_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    gradcheck_specs()
        .into_iter()
        .map(|(name, spec)| Ok(entry(name, Scope::Network, network_check(&spec, seed, 6)?)))
        .collect()
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<SuiteEntry>> {
    match scope {
        Scope::Ops => op_checks(seed),
        Scope::Block => block_checks(seed),
        Scope::Network => network_checks(seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchBenchRow {
    pub sketch_dim: usize,
    pub mean_estimate: f64,
    pub standard_error: f64,
    pub rmse: f64,
    /// |mean − exact| in standard errors.
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchBenchReport {
    pub input_dim: usize,
    pub trials: usize,
    pub exact: f64,
    pub rows: Vec<SketchBenchRow>,
    pub oracle_max_abs_diff: f64,
    pub oracle_pass: bool,
    pub zero_estimate: f64,
}

/// Tolerance of the FFT sketch against the outer-product reference.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// Estimates `⟨x, y⟩²` by `⟨ϕ(x), ϕ(y)⟩` over `trials` independent table
/// draws for each sketch width, for one fixed correlated pair `(x, y)` of unit expected norm.
pub fn sketch_bench(input_dim: usize, dims: &[usize], trials: usize, seed: u64) -> Result<SketchBenchReport> {
    if trials < 50 {
        return Err(Error::invalid("sketch_bench", format!("need at least 50 trials, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (input_dim as f64).sqrt();
    let x = Tensor::randn(&[input_dim], scale, &mut rng)?.into_data();
    let noise = Tensor::randn(&[input_dim], scale, &mut rng)?.into_data();
    // Correlated pair, so the exact kernel is well away from zero.
    let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| 0.6 * a + 0.8 * n).collect();
    let exact = polynomial_kernel(&x, &y);
    let mut rows = Vec::new();
    for (di, &d) in dims.iter().enumerate() {
        let estimates = (0..trials)
            .map(|t| {
                let cfg = SketchConfig::new(input_dim, d, crate::seed::derive_index(seed, (di * trials + t) as u64))?;
                sketch_kernel_estimate(&x, &y, &cfg)
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = trials as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let rmse = (estimates.iter().map(|e| (e - exact).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(SketchBenchRow {
            sketch_dim: d,
            mean_estimate: mean,
            standard_error: se,
            rmse,
            z_score: if se > 0.0 { (mean - exact).abs() / se } else { 0.0 },
        });
    }

    let oc = input_dim.min(8);
    let cfg = SketchConfig::new(oc, 32, seed ^ 0x0c)?;
    let probe = Tensor::randn(&[oc], 1.0, &mut rng)?.into_data();
    let fast = tensor_sketch(&probe, &cfg)?;
    let slow = outer_product_sketch(&probe, &cfg)?;
    let diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let zcfg = SketchConfig::new(input_dim, dims.first().copied().unwrap_or(64), seed)?;
    let zero = vec![0.0; input_dim];
    Ok(SketchBenchReport {
        input_dim,
        trials,
        exact,
        rows,
        oracle_max_abs_diff: diff,
        oracle_pass: diff < ORACLE_TOLERANCE,
        zero_estimate: sketch_kernel_estimate(&zero, &zero, &zcfg)?,
    })
}
