//! Local and global combination classifier and the stage-1 heads.
//!
//! The combined feature of a final pair `(x, g)` is
//! `[ mean_i ϕ(x_i), ϕ(g) ]`, where `x_i` ranges over all `N = T·H·W`
//! locations of the local map and `ϕ` is one shared tensor sketch.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lgd::PairVars;
use crate::nn::Ctx;
use crate::sketch::{tensor_sketch, SketchConfig};
use crate::tensor::Tensor;

/// Which classification head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Global,
    Local,
    Combined,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Global => "global",
            Head::Local => "local",
            Head::Combined => "combined",
        }
    }
}

/// `[B, 2d]` combined feature of a batch of final pairs.
pub fn combined_feature(graph: &mut Graph, pair: PairVars, cfg: &Arc<SketchConfig>) -> Result<Var> {
    let xs = graph.value(pair.x).shape().to_vec();
    let gs = graph.value(pair.g).shape().to_vec();
    if xs.len() < 3 || xs[1] != cfg.input_dim || gs != [xs[0], cfg.input_dim] {
        return Err(Error::shape(
            "combined_feature",
            format!("pair {xs:?} / {gs:?} does not match sketch input width {}", cfg.input_dim),
        ));
    }
    let rows = graph.to_rows(pair.x)?;
    let local = graph.tensor_sketch(rows, cfg.clone())?;
    let local = graph.group_mean(local, xs[0])?;
    let global = graph.tensor_sketch(pair.g, cfg.clone())?;
    graph.concat_cols(local, global)
}

/// Same mapping evaluated directly, one location at a time.
pub fn combined_feature_values(x: &Tensor, g: &Tensor, cfg: &SketchConfig) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() < 3 || xs[1] != cfg.input_dim || g.shape() != [xs[0], cfg.input_dim] {
        return Err(Error::shape("combined_feature", format!("pair {xs:?} / {:?}", g.shape())));
    }
    let (b, c) = (xs[0], xs[1]);
    let n: usize = xs[2..].iter().product();
    let d = cfg.sketch_dim;
    let mut out = Vec::with_capacity(b * 2 * d);
    for bi in 0..b {
        let mut acc = vec![0.0; d];
        for p in 0..n {
            let v: Vec<f64> = (0..c).map(|ci| x.data()[(bi * c + ci) * n + p]).collect();
            for (a, s) in acc.iter_mut().zip(tensor_sketch(&v, cfg)?) {
                *a += s;
            }
        }
        out.extend(acc.iter().map(|a| a / n as f64));
        out.extend(tensor_sketch(&g.data()[bi * c..(bi + 1) * c], cfg)?);
    }
    Tensor::new(vec![b, 2 * d], out)
}

/// `logits = feat · Wᵀ + bias` with the head's parameters from the context.
pub fn classify(ctx: &mut Ctx<'_>, feat: Var, head: Head) -> Result<Var> {
    let w = ctx.param(&format!("head.{}.weight", head.name()))?;
    let b = ctx.param(&format!("head.{}.bias", head.name()))?;
    let k = ctx.graph.value(w).shape()[1];
    let width = ctx.graph.value(feat).shape().get(1).copied();
    if width != Some(k) {
        return Err(Error::shape(
            "classify",
            format!("{} head expects width {k}, feature has {:?}", head.name(), ctx.graph.value(feat).shape()),
        ));
    }
    let z = ctx.graph.linear(feat, w)?;
    ctx.graph.add_bias(z, b)
}

/// Logits of the requested head for a final pair.
pub fn head_logits(ctx: &mut Ctx<'_>, pair: PairVars, head: Head, cfg: &Arc<SketchConfig>, power_norm: bool) -> Result<Var> {
    let feat = match head {
        Head::Global => pair.g,
        Head::Local => ctx.graph.global_avg_pool(pair.x)?,
        Head::Combined => {
            let f = combined_feature(ctx.graph, pair, cfg)?;
            if power_norm {
                ctx.graph.power_normalize(f)?
            } else {
                f
            }
        }
    };
    classify(ctx, feat, head)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
