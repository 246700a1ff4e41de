//! LGD-2D / LGD-3D backbones built from diffusion blocks.
//!
//! The local transformation of every block is a bottleneck residual unit:
//!
//! ```text
//! 1×1×1 → BN → ReLU → 1×3×3 (spatial stride) [→ kt×1×1] → BN → ReLU → 1×1×1 → BN  (+ shortcut)
//! ```
//!
//! In 3D networks the spatial and temporal convolutions form a P3D-A
//! cascade that shares one normalization, so an identity temporal kernel is
//! an exact no-op. 2D networks omit the temporal convolution entirely and
//! never mix frames in the local path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lgd::{BlockVariant, DiffusionBlock, LocalTransform, PairVars};
use crate::nn::{identity_temporal_kernel, init_batch_norm, xavier, xavier_conv, Ctx, Mode, ParamStore};
use crate::ops::{window_extent, ConvSpec};
use crate::sketch::SketchConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Lgd2d,
    Lgd3d,
    Baseline2d,
    Baseline3d,
}

impl NetworkKind {
    pub fn is_3d(self) -> bool {
        matches!(self, NetworkKind::Lgd3d | NetworkKind::Baseline3d)
    }

    pub fn has_diffusion(self) -> bool {
        matches!(self, NetworkKind::Lgd2d | NetworkKind::Lgd3d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Scratch,
    /// Zero global residual and identity temporal kernels at step 0.
    PretrainedStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Separate softmax heads on the global vector and the pooled local map.
    #[default]
    SeparateHeads,
    /// Tensor-sketch combination of the final pair.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub spatial_kernel: usize,
    pub spatial_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    /// Output width of every block in the stage.
    pub channels: usize,
    /// Bottleneck width; defaults to `channels / 4`.
    #[serde(default)]
    pub mid_channels: Option<usize>,
    /// Spatial stride applied by the stage's first block.
    #[serde(default = "one")]
    pub spatial_stride: usize,
}

fn one() -> usize {
    1
}

impl StageSpec {
    pub fn mid(&self) -> usize {
        self.mid_channels.unwrap_or((self.channels / 4).max(1))
    }
}

/// Where a temporal max-pool sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSite {
    Stem,
    Stage(usize),
}

/// Temporal max-pool with window `stride × 1 × 1` and stride `(stride, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalPool {
    pub after: PoolSite,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub stem: StemSpec,
    /// Temporal kernel of the factorized convolutions (3D only); 1 disables them.
    #[serde(default = "three")]
    pub temporal_kernel: usize,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub temporal_pools: Vec<TemporalPool>,
    #[serde(default)]
    pub block_variant: BlockVariant,
    /// `[T, H, W]` of the network input.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub init: InitStrategy,
    #[serde(default)]
    pub classifier: ClassifierKind,
    pub num_classes: usize,
    /// Tensor-sketch dimension; defaults to four times the final width.
    #[serde(default)]
    pub sketch_dim: Option<usize>,
}

fn three() -> usize {
    3
}

impl NetworkSpec {
    /// ResNet-50 LGD-3D schedule on 16×112×112 clips.
    pub fn resnet50_3d(num_classes: usize) -> Self {
        let stage = |blocks, channels, spatial_stride| StageSpec {
            blocks,
            channels,
            mid_channels: Some(channels / 4),
            spatial_stride,
        };
        NetworkSpec {
            kind: NetworkKind::Lgd3d,
            in_channels: 3,
            stem: StemSpec { channels: 64, spatial_kernel: 7, spatial_stride: 2 },
            temporal_kernel: 3,
            stages: vec![stage(3, 256, 1), stage(4, 512, 2), stage(6, 1024, 2), stage(3, 2048, 2)],
            temporal_pools: vec![
                TemporalPool { after: PoolSite::Stem, stride: 2 },
                TemporalPool { after: PoolSite::Stage(0), stride: 2 },
            ],
            block_variant: BlockVariant::Lgd,
            input_shape: [16, 112, 112],
            init: InitStrategy::Scratch,
            classifier: ClassifierKind::SeparateHeads,
            num_classes,
            sketch_dim: None,
        }
    }

    /// Desk-scale LGD-2D: three frames of 32×32, two stages of two blocks.
    pub fn toy_2d(num_classes: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::Lgd2d,
            in_channels: 3,
            stem: StemSpec { channels: 16, spatial_kernel: 3, spatial_stride: 2 },
            temporal_kernel: 1,
            stages: vec![
                StageSpec { blocks: 2, channels: 16, mid_channels: Some(8), spatial_stride: 1 },
                StageSpec { blocks: 2, channels: 32, mid_channels: Some(8), spatial_stride: 2 },
            ],
            temporal_pools: vec![],
            block_variant: BlockVariant::Lgd,
            input_shape: [3, 32, 32],
            init: InitStrategy::Scratch,
            classifier: ClassifierKind::SeparateHeads,
            num_classes,
            sketch_dim: None,
        }
    }

    /// Desk-scale LGD-3D keeping the stem/first-stage temporal pooling pattern.
    pub fn toy_3d(num_classes: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::Lgd3d,
            temporal_kernel: 3,
            temporal_pools: vec![
                TemporalPool { after: PoolSite::Stem, stride: 2 },
                TemporalPool { after: PoolSite::Stage(0), stride: 2 },
            ],
            input_shape: [8, 32, 32],
            ..Self::toy_2d(num_classes)
        }
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_dim.unwrap_or(4 * self.final_channels())
    }

    fn has_temporal_conv(&self) -> bool {
        self.kind.is_3d() && self.temporal_kernel > 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("network spec", d));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.stem.channels == 0 || self.stem.spatial_kernel == 0 || self.stem.spatial_stride == 0 {
            return bad("stem and input widths must be positive".into());
        }
        if self.input_shape.iter().any(|&e| e == 0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.kind.is_3d() && self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel {} must be odd", self.temporal_kernel));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.mid() == 0 || s.spatial_stride == 0 {
                return bad(format!("stage {i} has a zero field"));
            }
        }
        for p in &self.temporal_pools {
            if !self.kind.is_3d() {
                return bad("2D networks do not pool across frames".into());
            }
            if p.stride == 0 {
                return bad("temporal pool stride must be positive".into());
            }
            if let PoolSite::Stage(i) = p.after {
                if i >= self.stages.len() {
                    return bad(format!("temporal pool after missing stage {i}"));
                }
            }
        }
        if self.sketch_dim() < 2 {
            return bad("sketch dimension must be at least 2".into());
        }
        Ok(())
    }

    fn stem_spatial(&self) -> ConvSpec {
        let k = self.stem.spatial_kernel;
        let s = self.stem.spatial_stride;
        ConvSpec::new(self.in_channels, self.stem.channels, [1, k, k])
            .with_stride([1, s, s])
            .with_pad([0, k / 2, k / 2])
    }

    fn temporal_conv(&self, c: usize) -> ConvSpec {
        let kt = self.temporal_kernel;
        ConvSpec::new(c, c, [kt, 1, 1]).with_pad([kt / 2, 0, 0])
    }

    fn pools_after(&self, site: PoolSite) -> impl Iterator<Item = &TemporalPool> {
        self.temporal_pools.iter().filter(move |p| p.after == site)
    }
}

/// One row of the shape schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub layer: String,
    pub operation: String,
    pub channels: usize,
    /// Local path `[T, H, W]` after the layer.
    pub shape: [usize; 3],
}

fn underflow(stage: &str, detail: String) -> Error {
    Error::Underflow { stage: stage.to_string(), detail }
}

fn conv_extents(stage: &str, spec: &ConvSpec, input: [usize; 3]) -> Result<[usize; 3]> {
    spec.output_extents(input).map_err(|e| underflow(stage, e.to_string()))
}

/// Pure shape inference over the local path.
pub fn shape_schedule(spec: &NetworkSpec) -> Result<Vec<LayerShape>> {
    spec.validate()?;
    let mut rows = Vec::new();
    let stem = spec.stem_spatial();
    let k = spec.stem.spatial_kernel;
    let mut shape = conv_extents("conv1", &stem, spec.input_shape)?;
    let mut op = format!("1×{k}×{k}, {}", spec.stem.channels);
    if spec.has_temporal_conv() {
        shape = conv_extents("conv1", &spec.temporal_conv(spec.stem.channels), shape)?;
        op.push_str(&format!(" + {}×1×1, {}", spec.temporal_kernel, spec.stem.channels));
    }
    op.push_str(&format!(", stride 1, {s}, {s}", s = spec.stem.spatial_stride));
    rows.push(LayerShape { layer: "conv1".into(), operation: op, channels: spec.stem.channels, shape });
    let mut pool_no = 1;
    let mut push_pools = |site: PoolSite, shape: &mut [usize; 3], channels: usize, rows: &mut Vec<LayerShape>| -> Result<()> {
        for p in spec.pools_after(site) {
            let name = format!("pool{pool_no}");
            shape[0] = window_extent(shape[0], p.stride, p.stride)
                .ok_or_else(|| underflow(&name, format!("temporal window {} exceeds length {}", p.stride, shape[0])))?;
            rows.push(LayerShape {
                layer: name,
                operation: format!("{}×1×1, max, stride {}, 1, 1", p.stride, p.stride),
                channels,
                shape: *shape,
            });
            pool_no += 1;
        }
        Ok(())
    };
    push_pools(PoolSite::Stem, &mut shape, spec.stem.channels, &mut rows)?;
    for (i, stage) in spec.stages.iter().enumerate() {
        let name = format!("res{}", i + 2);
        let s = stage.spatial_stride;
        let spatial = ConvSpec::new(stage.mid(), stage.mid(), [1, 3, 3]).with_stride([1, s, s]).with_pad([0, 1, 1]);
        shape = conv_extents(&name, &spatial, shape)?;
        let tag = match (spec.kind.has_diffusion(), spec.has_temporal_conv()) {
            (true, true) => format!("[1×1×1, 1×3×3, {}×1×1, 1×1×1]_LGD", spec.temporal_kernel),
            (true, false) => "[1×1×1, 1×3×3, 1×1×1]_LGD".to_string(),
            (false, true) => format!("[1×1×1, 1×3×3, {}×1×1, 1×1×1]", spec.temporal_kernel),
            (false, false) => "[1×1×1, 1×3×3, 1×1×1]".to_string(),
        };
        rows.push(LayerShape {
            layer: name,
            operation: format!("{tag} ×{}, {}", stage.blocks, stage.channels),
            channels: stage.channels,
            shape,
        });
        push_pools(PoolSite::Stage(i), &mut shape, stage.channels, &mut rows)?;
    }
    Ok(rows)
}

/// Bottleneck residual unit used as the local transformation.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub prefix: String,
    pub c_in: usize,
    pub mid: usize,
    pub c_out: usize,
    pub spatial_stride: usize,
    /// Temporal kernel of the P3D-A cascade, if any.
    pub temporal: Option<usize>,
}

impl ResidualUnit {
    fn reduce(&self) -> ConvSpec {
        ConvSpec::new(self.c_in, self.mid, [1, 1, 1])
    }

    fn spatial(&self) -> ConvSpec {
        let s = self.spatial_stride;
        ConvSpec::new(self.mid, self.mid, [1, 3, 3]).with_stride([1, s, s]).with_pad([0, 1, 1])
    }

    fn temporal_spec(&self, kt: usize) -> ConvSpec {
        ConvSpec::new(self.mid, self.mid, [kt, 1, 1]).with_pad([kt / 2, 0, 0])
    }

    fn expand(&self) -> ConvSpec {
        ConvSpec::new(self.mid, self.c_out, [1, 1, 1])
    }

    fn projection_shortcut(&self) -> Option<ConvSpec> {
        let s = self.spatial_stride;
        (self.c_in != self.c_out || s != 1).then(|| ConvSpec::new(self.c_in, self.c_out, [1, 1, 1]).with_stride([1, s, s]))
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamStore, buffers: &mut ParamStore, master: u64, identity_temporal: bool) -> Result<()> {
        let p = |n: &str| self.name(n);
        params.insert(p("conv_a.weight"), xavier_conv(&self.reduce(), master, &p("conv_a.weight"))?);
        init_batch_norm(params, buffers, &p("bn_a"), self.mid)?;
        params.insert(p("conv_s.weight"), xavier_conv(&self.spatial(), master, &p("conv_s.weight"))?);
        if let Some(kt) = self.temporal {
            let w = if identity_temporal {
                identity_temporal_kernel(self.mid, kt)?
            } else {
                xavier_conv(&self.temporal_spec(kt), master, &p("conv_t.weight"))?
            };
            params.insert(p("conv_t.weight"), w);
        }
        init_batch_norm(params, buffers, &p("bn_b"), self.mid)?;
        params.insert(p("conv_c.weight"), xavier_conv(&self.expand(), master, &p("conv_c.weight"))?);
        init_batch_norm(params, buffers, &p("bn_c"), self.c_out)?;
        if let Some(sc) = self.projection_shortcut() {
            params.insert(p("shortcut.weight"), xavier_conv(&sc, master, &p("shortcut.weight"))?);
            init_batch_norm(params, buffers, &p("bn_shortcut"), self.c_out)?;
        }
        Ok(())
    }
}

impl LocalTransform for ResidualUnit {
    fn apply(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = |n: &str| self.name(n);
        let a = ctx.conv(x, &p("conv_a.weight"), self.reduce())?;
        let a = ctx.batch_norm(a, &p("bn_a"))?;
        let a = ctx.graph.relu(a);
        let mut b = ctx.conv(a, &p("conv_s.weight"), self.spatial())?;
        if let Some(kt) = self.temporal {
            b = ctx.conv(b, &p("conv_t.weight"), self.temporal_spec(kt))?;
        }
        let b = ctx.batch_norm(b, &p("bn_b"))?;
        let b = ctx.graph.relu(b);
        let c = ctx.conv(b, &p("conv_c.weight"), self.expand())?;
        let c = ctx.batch_norm(c, &p("bn_c"))?;
        let short = match self.projection_shortcut() {
            Some(sc) => {
                let s = ctx.conv(x, &p("shortcut.weight"), sc)?;
                ctx.batch_norm(s, &p("bn_shortcut"))?
            }
            None => x,
        };
        ctx.graph.add(c, short)
    }
}

/// One block position: its residual unit and, for LGD kinds, its diffusion.
#[derive(Debug, Clone)]
pub struct BlockSlot {
    pub unit: ResidualUnit,
    pub diffusion: Option<DiffusionBlock>,
    pub stage: usize,
}

/// A built network: spec, parameters, batch-norm buffers and sketch tables.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub sketch: Arc<SketchConfig>,
    blocks: Vec<BlockSlot>,
}

/// Final pair and classifier inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub pair: PairVars,
    /// The stem output pair `(x₁, g₁)`.
    pub initial: PairVars,
}

fn layout(spec: &NetworkSpec) -> Vec<BlockSlot> {
    let mut slots = Vec::new();
    let mut c_in = spec.stem.channels;
    let temporal = spec.has_temporal_conv().then_some(spec.temporal_kernel);
    for (si, stage) in spec.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let prefix = format!("res{}.{bi}", si + 2);
            let unit = ResidualUnit {
                prefix: prefix.clone(),
                c_in,
                mid: stage.mid(),
                c_out: stage.channels,
                spatial_stride: if bi == 0 { stage.spatial_stride } else { 1 },
                temporal,
            };
            let diffusion = spec.kind.has_diffusion().then(|| {
                DiffusionBlock::new(format!("{prefix}.diffusion"), spec.block_variant, c_in, stage.channels)
            });
            slots.push(BlockSlot { unit, diffusion, stage: si });
            c_in = stage.channels;
        }
    }
    slots
}

impl Network {
    /// Builds and initializes a network. Every tensor is seeded from
    /// `init_seed` and its own name; the sketch tables from `sketch_seed`.
    pub fn build(spec: &NetworkSpec, init_seed: u64, sketch_seed: u64) -> Result<Self> {
        shape_schedule(spec)?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let pretrained = spec.init == InitStrategy::PretrainedStyle;

        let stem = spec.stem_spatial();
        params.insert("stem.conv_s.weight", xavier_conv(&stem, init_seed, "stem.conv_s.weight")?);
        if spec.has_temporal_conv() {
            let name = "stem.conv_t.weight";
            let w = if pretrained {
                identity_temporal_kernel(spec.stem.channels, spec.temporal_kernel)?
            } else {
                xavier_conv(&spec.temporal_conv(spec.stem.channels), init_seed, name)?
            };
            params.insert(name, w);
        }
        init_batch_norm(&mut params, &mut buffers, "stem.bn", spec.stem.channels)?;

        let blocks = layout(spec);
        for slot in &blocks {
            slot.unit.init(&mut params, &mut buffers, init_seed, pretrained)?;
            if let Some(d) = &slot.diffusion {
                d.init(&mut params, init_seed, pretrained)?;
            }
        }

        let c = spec.final_channels();
        let k = spec.num_classes;
        let d = spec.sketch_dim();
        for (head, width) in [("global", c), ("local", c), ("combined", 2 * d)] {
            let w = format!("head.{head}.weight");
            params.insert(w.clone(), xavier(&[k, width], width, k, init_seed, &w)?);
            params.insert(format!("head.{head}.bias"), Tensor::zeros(&[k])?);
        }
        let sketch = Arc::new(SketchConfig::new(c, d, sketch_seed)?);
        Ok(Network { spec: spec.clone(), params, buffers, sketch, blocks })
    }

    /// Reassembles a network from stored parts (checkpoint loading).
    pub fn from_parts(spec: NetworkSpec, params: ParamStore, buffers: ParamStore, sketch: SketchConfig) -> Result<Self> {
        sketch.validate()?;
        let reference = Network::build(&spec, 0, sketch.seed)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("parameter {name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        for (name, t) in reference.buffers.iter() {
            if buffers.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!("buffer {name} has the wrong shape")));
            }
        }
        if params.len() != reference.params.len() || buffers.len() != reference.buffers.len() {
            return Err(Error::Format("unexpected extra tensors".into()));
        }
        if sketch.input_dim != spec.final_channels() || sketch.sketch_dim != spec.sketch_dim() {
            return Err(Error::Format("sketch tables do not match the network".into()));
        }
        Ok(Network { blocks: reference.blocks, spec, params, buffers, sketch: Arc::new(sketch) })
    }

    pub fn blocks(&self) -> &[BlockSlot] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn diffusion_param_count(&self) -> usize {
        self.params.count_where(|n| n.contains(".diffusion."))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let [t, h, w] = self.spec.input_shape;
        if s.len() != 5 || s[1] != self.spec.in_channels || s[2..] != [t, h, w] {
            return Err(Error::shape(
                "network input",
                format!("got {s:?}, expected [B, {}, {t}, {h}, {w}]", self.spec.in_channels),
            ));
        }
        Ok(())
    }

    /// `x₁ = stem(input)`, `g₁ = GAP(x₁)`, followed by any stem pooling.
    pub fn initial_pair(&self, ctx: &mut Ctx<'_>, input: Var) -> Result<PairVars> {
        self.check_input(ctx.graph.value(input))?;
        let mut x = ctx.conv(input, "stem.conv_s.weight", self.spec.stem_spatial())?;
        if self.spec.has_temporal_conv() {
            x = ctx.conv(x, "stem.conv_t.weight", self.spec.temporal_conv(self.spec.stem.channels))?;
        }
        let x = ctx.batch_norm(x, "stem.bn")?;
        let x = ctx.graph.relu(x);
        let g = ctx.graph.global_avg_pool(x)?;
        Ok(PairVars { x, g })
    }

    fn pool(&self, ctx: &mut Ctx<'_>, x: Var, site: PoolSite) -> Result<Var> {
        let mut x = x;
        for p in self.spec.pools_after(site) {
            x = ctx.graph.max_pool(x, [p.stride, 1, 1], [p.stride, 1, 1])?;
        }
        Ok(x)
    }

    /// Runs the local and global paths to the final pair.
    pub fn forward(&self, ctx: &mut Ctx<'_>, input: Var) -> Result<ForwardOut> {
        let initial = self.initial_pair(ctx, input)?;
        let mut pair = PairVars { x: self.pool(ctx, initial.x, PoolSite::Stem)?, g: initial.g };
        let mut stage = 0;
        for (i, slot) in self.blocks.iter().enumerate() {
            if slot.stage != stage {
                pair.x = self.pool(ctx, pair.x, PoolSite::Stage(stage))?;
                stage = slot.stage;
            }
            pair = match &slot.diffusion {
                Some(d) => d.forward(ctx, &slot.unit, pair)?,
                None => {
                    let fx = slot.unit.apply(ctx, pair.x)?;
                    PairVars { x: ctx.graph.relu(fx), g: pair.g }
                }
            };
            if i + 1 == self.blocks.len() {
                pair.x = self.pool(ctx, pair.x, PoolSite::Stage(stage))?;
            }
        }
        if !self.spec.kind.has_diffusion() {
            pair.g = ctx.graph.global_avg_pool(pair.x)?;
        }
        Ok(ForwardOut { pair, initial })
    }

    /// Convenience: forward on a fresh graph, returning final `(x_L, g_L)` values.
    pub fn forward_values(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.params, &self.buffers, mode);
        let inp = ctx.graph.constant(input.clone());
        let out = self.forward(&mut ctx, inp)?;
        Ok((ctx.graph.value(out.pair.x).clone(), ctx.graph.value(out.pair.g).clone()))
    }
}
