//! The local/global diffusion block.
//!
//! A block maps a pair `(x, g)` of a local feature map `[B, C, T, H, W]` and
//! a global vector `[B, C]` to a new pair:
//!
//! ```text
//! x' = ReLU( F(x) + broadcast(W_xg g) )          (lgd, v1)
//! x' = ReLU( F(x) ⊙ broadcast(σ(W_xg g)) )       (v2)
//! g' = ReLU( W_gx GAP(x') + W_gg g )             (lgd, v2)
//! g' = GAP(x')                                   (v1)
//! ```
//!
//! Each projection `W` is stored as low-rank factors `W1 [C_out, r]` and
//! `W2 [r, C_in]` with `r = max(1, C_out / 16)`, applied as `W1 (W2 v)`
//! without any intermediate nonlinearity and without biases.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{xavier, Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    #[default]
    Lgd,
    V1,
    V2,
}

/// Rank of the factored projections for an output width of `c`.
pub fn reduced_rank(c: usize) -> usize {
    (c / 16).max(1)
}

/// Local transformation applied to the incoming feature map.
pub trait LocalTransform {
    fn apply(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var>;
}

/// Graph handles of a local/global pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairVars {
    pub x: Var,
    pub g: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    LowRank,
    /// Full `C_out × C_in` matrix; used by tests that need exact dense maps.
    Dense,
}

#[derive(Debug, Clone)]
pub struct DiffusionBlock {
    pub prefix: String,
    pub variant: BlockVariant,
    pub c_in: usize,
    pub c_out: usize,
    pub projection: Projection,
}

/// Which projections a variant owns: (W_xg, W_gx, W_gg).
fn projections(variant: BlockVariant) -> &'static [&'static str] {
    match variant {
        BlockVariant::Lgd | BlockVariant::V2 => &["xg", "gx", "gg"],
        BlockVariant::V1 => &["xg"],
    }
}

impl DiffusionBlock {
    pub fn new(prefix: impl Into<String>, variant: BlockVariant, c_in: usize, c_out: usize) -> Self {
        DiffusionBlock { prefix: prefix.into(), variant, c_in, c_out, projection: Projection::LowRank }
    }

    pub fn rank(&self) -> usize {
        reduced_rank(self.c_out)
    }

    /// Input width of projection `name`.
    fn proj_in(&self, name: &str) -> usize {
        if name == "gx" {
            self.c_out
        } else {
            self.c_in
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for p in projections(self.variant) {
            match self.projection {
                Projection::LowRank => {
                    names.push(format!("{}.{p}.w1", self.prefix));
                    names.push(format!("{}.{p}.w2", self.prefix));
                }
                Projection::Dense => names.push(format!("{}.{p}.w", self.prefix)),
            }
        }
        names
    }

    /// Registers Xavier-initialized projections. With `zero_global_residual`
    /// the outer factor of `W_xg` is zero, so the global residual vanishes
    /// while its inner factor still receives gradients.
    pub fn init(&self, params: &mut ParamStore, master: u64, zero_global_residual: bool) -> Result<()> {
        let r = self.rank();
        for p in projections(self.variant) {
            let c_in = self.proj_in(p);
            match self.projection {
                Projection::LowRank => {
                    let n1 = format!("{}.{p}.w1", self.prefix);
                    let n2 = format!("{}.{p}.w2", self.prefix);
                    let w1 = if *p == "xg" && zero_global_residual {
                        Tensor::zeros(&[self.c_out, r])?
                    } else {
                        xavier(&[self.c_out, r], r, self.c_out, master, &n1)?
                    };
                    params.insert(n2.clone(), xavier(&[r, c_in], c_in, r, master, &n2)?);
                    params.insert(n1, w1);
                }
                Projection::Dense => {
                    let n = format!("{}.{p}.w", self.prefix);
                    let w = if *p == "xg" && zero_global_residual {
                        Tensor::zeros(&[self.c_out, c_in])?
                    } else {
                        xavier(&[self.c_out, c_in], c_in, self.c_out, master, &n)?
                    };
                    params.insert(n, w);
                }
            }
        }
        Ok(())
    }

    /// Number of scalars the diffusion projections add to the block.
    pub fn extra_param_count(&self) -> usize {
        projections(self.variant)
            .iter()
            .map(|p| match self.projection {
                Projection::LowRank => self.rank() * (self.c_out + self.proj_in(p)),
                Projection::Dense => self.c_out * self.proj_in(p),
            })
            .sum()
    }

    fn project(&self, ctx: &mut Ctx<'_>, name: &str, v: Var) -> Result<Var> {
        match self.projection {
            Projection::LowRank => {
                let w2 = ctx.param(&format!("{}.{name}.w2", self.prefix))?;
                let w1 = ctx.param(&format!("{}.{name}.w1", self.prefix))?;
                let inner = ctx.graph.linear(v, w2)?;
                ctx.graph.linear(inner, w1)
            }
            Projection::Dense => {
                let w = ctx.param(&format!("{}.{name}.w", self.prefix))?;
                ctx.graph.linear(v, w)
            }
        }
    }

    fn check_global(&self, ctx: &Ctx<'_>, g: Var) -> Result<()> {
        let s = ctx.graph.value(g).shape();
        if s.len() != 2 || s[1] != self.c_in {
            return Err(Error::shape(
                "diffusion block",
                format!("{}: global vector {s:?} has wrong width, expected {}", self.prefix, self.c_in),
            ));
        }
        Ok(())
    }

    fn check_local(&self, ctx: &Ctx<'_>, x: Var, what: &str) -> Result<()> {
        let s = ctx.graph.value(x).shape();
        if s.len() < 3 || s[1] != self.c_out {
            return Err(Error::shape(
                "diffusion block",
                format!("{}: {what} {s:?} does not have {} channels", self.prefix, self.c_out),
            ));
        }
        Ok(())
    }

    /// Global-to-local diffusion applied to an already transformed map `fx = F(x)`.
    pub fn diffuse_local(&self, ctx: &mut Ctx<'_>, fx: Var, g_prev: Var) -> Result<Var> {
        self.check_global(ctx, g_prev)?;
        self.check_local(ctx, fx, "transformed map")?;
        let like = ctx.graph.value(fx).shape().to_vec();
        if like[0] != ctx.graph.value(g_prev).shape()[0] {
            return Err(Error::shape("diffusion block", format!("{}: batch sizes differ", self.prefix)));
        }
        let r = self.project(ctx, "xg", g_prev)?;
        match self.variant {
            BlockVariant::Lgd | BlockVariant::V1 => {
                let up = ctx.graph.broadcast_over_locations(r, &like)?;
                let s = ctx.graph.add(fx, up)?;
                Ok(ctx.graph.relu(s))
            }
            BlockVariant::V2 => {
                let gate = ctx.graph.sigmoid(r);
                let up = ctx.graph.broadcast_over_locations(gate, &like)?;
                let s = ctx.graph.mul(fx, up)?;
                Ok(ctx.graph.relu(s))
            }
        }
    }

    /// Local path update: `F` followed by global-to-local diffusion.
    pub fn local_update<F: LocalTransform + ?Sized>(&self, ctx: &mut Ctx<'_>, f: &F, pair: PairVars) -> Result<Var> {
        self.check_global(ctx, pair.g)?;
        let fx = f.apply(ctx, pair.x)?;
        self.diffuse_local(ctx, fx, pair.g)
    }

    /// Local-to-global diffusion from the updated local map.
    pub fn global_update(&self, ctx: &mut Ctx<'_>, x_l: Var, g_prev: Var) -> Result<Var> {
        self.check_local(ctx, x_l, "local map")?;
        self.check_global(ctx, g_prev)?;
        let pooled = ctx.graph.global_avg_pool(x_l)?;
        match self.variant {
            BlockVariant::V1 => Ok(pooled),
            BlockVariant::Lgd | BlockVariant::V2 => {
                let a = self.project(ctx, "gx", pooled)?;
                let b = self.project(ctx, "gg", g_prev)?;
                let s = ctx.graph.add(a, b)?;
                Ok(ctx.graph.relu(s))
            }
        }
    }

    /// Full block: the local map is updated first and the global vector is
    /// then computed from the updated map.
    pub fn forward<F: LocalTransform + ?Sized>(&self, ctx: &mut Ctx<'_>, f: &F, pair: PairVars) -> Result<PairVars> {
        let x = self.local_update(ctx, f, pair)?;
        let g = self.global_update(ctx, x, pair.g)?;
        Ok(PairVars { x, g })
    }
}

/// Diffusion parameters added to one block of width `c` (equal input and
/// output width): three factored `c × c` projections, `6 · c · max(1, c/16)`.
pub fn count_extra_params(c: usize) -> usize {
    DiffusionBlock::new("", BlockVariant::Lgd, c, c).extra_param_count()
}
