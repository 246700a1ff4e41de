//! Two-stage optimization and score-averaged inference.
//!
//! Stage 1 minimizes the sum of the global-head and local-head cross
//! entropies. Stage 2 tunes every network parameter through the combined
//! sketch head alone; the stage-1 heads stay frozen.

use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Var};
use crate::backbone::{Network, NetworkKind};
use crate::classifier::{argmax, head_logits, Head};
use crate::error::{Error, Result};
use crate::lgd::PairVars;
use crate::nn::{named_grads, update_running_stats, Ctx, Mode, ParamStore};
use crate::seed;
use crate::sketch::SketchConfig;
use crate::synth::{self, AugmentFlags, Dataset, InputEncoding, Sampling};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_stage")]
    pub stage: u8,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    /// The rate is divided by `decay_factor` every `decay_every` epochs.
    #[serde(default = "d_every")]
    pub decay_every: usize,
    #[serde(default = "d_factor")]
    pub decay_factor: f64,
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_augment")]
    pub augment: AugmentFlags,
    #[serde(default)]
    pub encoding: InputEncoding,
    /// Samples averaged per test video; defaults by network kind.
    #[serde(default)]
    pub infer_samples: Option<usize>,
    /// Signed square root and L2 normalization of the combined feature.
    #[serde(default)]
    pub power_norm: bool,
    /// Evaluate on the test split every this many epochs (and after the last).
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
}

fn d_stage() -> u8 {
    1
}
fn d_lr() -> f64 {
    0.01
}
fn d_every() -> usize {
    20
}
fn d_factor() -> f64 {
    10.0
}
fn d_batch() -> usize {
    8
}
fn d_momentum() -> f64 {
    0.9
}
fn d_augment() -> AugmentFlags {
    AugmentFlags { flip: true, crop: None }
}
fn d_eval_every() -> usize {
    5
}

impl TrainConfig {
    /// Full schedule: 0.01, divided by 10 every 20 epochs, 50 epochs.
    pub fn full(stage: u8) -> Self {
        TrainConfig {
            stage,
            base_lr: d_lr(),
            decay_every: d_every(),
            decay_factor: d_factor(),
            epochs: 50,
            batch_size: d_batch(),
            momentum: d_momentum(),
            weight_decay: 0.0,
            augment: d_augment(),
            encoding: InputEncoding::default(),
            infer_samples: None,
            power_norm: false,
            eval_every: d_eval_every(),
        }
    }

    /// Desk-scale budget: 30 epochs for stage 1, 10 for stage 2. Stage 2
    /// starts at 0.001: the unnormalized second-order features are large
    /// enough that 0.01 diverges on the synthetic task.
    pub fn toy(stage: u8) -> Self {
        match stage {
            1 => TrainConfig { epochs: 30, ..Self::full(1) },
            _ => TrainConfig { epochs: 10, base_lr: 0.001, ..Self::full(stage) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train config", d));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.decay_factor >= 1.0) {
            return bad("learning rate must be positive and the decay factor at least 1".into());
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("decay interval, batch size and eval interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if self.infer_samples == Some(0) {
            return bad("infer_samples must be positive".into());
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(self.base_lr, self.decay_factor, self.decay_every, epoch)
    }
}

/// `base · factor^(−floor(epoch / every))`.
pub fn lr_at(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base / factor.powi((epoch / every) as i32)
}

/// Default number of averaged inference samples.
pub fn default_samples(kind: NetworkKind) -> usize {
    if kind.is_3d() {
        15
    } else {
        10
    }
}

/// SGD with momentum: `v ← μ v + g + λ p`, `p ← p − η v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: ParamStore::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(p.shape())?);
            }
            let v = self.velocity.get_mut(name)?;
            for ((vi, pi), &gi) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// A stage loss together with the per-head pieces it was built from.
pub struct StageLoss {
    pub total: Var,
    pub parts: Vec<(Head, Var, Var)>,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

fn head_loss(ctx: &mut Ctx<'_>, pair: PairVars, head: Head, labels: &[usize], cfg: &Arc<SketchConfig>, pn: bool) -> Result<(Head, Var, Var)> {
    let logits = head_logits(ctx, pair, head, cfg, pn)?;
    check_labels(labels, ctx.graph.value(logits).shape()[1])?;
    let loss = ctx.graph.softmax_cross_entropy(logits, labels)?;
    Ok((head, logits, loss))
}

/// `CE(W_g g) + CE(W_x GAP(x))` with equal weights.
pub fn stage1_loss(ctx: &mut Ctx<'_>, pair: PairVars, labels: &[usize], cfg: &Arc<SketchConfig>) -> Result<StageLoss> {
    let g = head_loss(ctx, pair, Head::Global, labels, cfg, false)?;
    let l = head_loss(ctx, pair, Head::Local, labels, cfg, false)?;
    let total = ctx.graph.add(g.2, l.2)?;
    Ok(StageLoss { total, parts: vec![g, l] })
}

/// `CE(W_c · combined(x, g))`.
pub fn stage2_loss(ctx: &mut Ctx<'_>, pair: PairVars, labels: &[usize], cfg: &Arc<SketchConfig>, power_norm: bool) -> Result<StageLoss> {
    let c = head_loss(ctx, pair, Head::Combined, labels, cfg, power_norm)?;
    Ok(StageLoss { total: c.2, parts: vec![c] })
}

/// Parameters a stage leaves untouched.
pub fn frozen_in_stage(name: &str, stage: u8) -> bool {
    if stage == 1 {
        name.starts_with("head.combined.")
    } else {
        name.starts_with("head.global.") || name.starts_with("head.local.")
    }
}

/// One epoch's record. `wall_time_s` is kept out of the serialized record
/// so that metrics files are byte-stable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss_global: Option<f64>,
    pub loss_local: Option<f64>,
    pub loss_combined: Option<f64>,
    pub train_top1: f64,
    pub test_top1: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl EpochMetrics {
    /// The objective of the record's stage.
    pub fn stage_loss(&self) -> f64 {
        match self.stage {
            1 => self.loss_global.unwrap_or(0.0) + self.loss_local.unwrap_or(0.0),
            _ => self.loss_combined.unwrap_or(0.0),
        }
    }
}

/// Sampled, augmented and encoded `[3, T, H, W]` training input.
pub fn training_input(net: &Network, frames: &Tensor, cfg: &TrainConfig, sample_rng: &mut rand_chacha::ChaCha8Rng, aug_rng: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor> {
    let [t, h, w] = net.spec.input_shape;
    let frames = synth::loop_pad(frames, t)?;
    let len = frames.shape()[0];
    let idx: Vec<usize> = if net.spec.kind.is_3d() {
        let s = synth::clip_start(len, t, Sampling::Random(sample_rng))?;
        (s..s + t).collect()
    } else {
        synth::snippet_indices(len, t, Sampling::Random(sample_rng))?
    };
    let picked = synth::gather_frames(&frames, &idx)?;
    let mut flags = cfg.augment;
    let fs = picked.shape();
    if flags.crop.is_none() && (fs[1] != h || fs[2] != w) {
        if h != w {
            return Err(Error::shape("training input", format!("cannot crop {}×{} frames to {h}×{w}", fs[1], fs[2])));
        }
        flags.crop = Some(h);
    }
    let out = synth::augment(&picked, flags, aug_rng)?;
    if out.shape()[1..] != [h, w] {
        return Err(Error::shape("training input", format!("frames {:?} do not match input {h}×{w}", out.shape())));
    }
    synth::encode(&out, cfg.encoding)
}

fn check_dataset(net: &Network, data: &Dataset) -> Result<()> {
    if data.num_classes != net.spec.num_classes {
        return Err(Error::invalid(
            "dataset",
            format!("dataset has {} classes, network has {}", data.num_classes, net.spec.num_classes),
        ));
    }
    if net.spec.in_channels != 3 {
        return Err(Error::invalid("dataset", "synthetic inputs have three channels"));
    }
    if data.videos.is_empty() {
        return Err(Error::invalid("dataset", "no videos"));
    }
    Ok(())
}

/// Runs one training epoch in place.
pub fn train_epoch(net: &mut Network, opt: &mut Sgd, data: &Dataset, cfg: &TrainConfig, epoch: usize, master: u64) -> Result<EpochMetrics> {
    cfg.validate()?;
    check_dataset(net, data)?;
    let start = Instant::now();
    let stage = cfg.stage;
    let lr = cfg.lr(epoch);
    let tag = format!("{stage}/{epoch}");
    let mut order: Vec<usize> = (0..data.videos.len()).collect();
    order.shuffle(&mut seed::stream(master, &format!("order/{tag}")));
    let mut sample_rng = seed::stream(master, &format!("sample/{tag}"));
    let mut aug_rng = seed::stream(master, &format!("augment/{tag}"));

    let mut sums: IndexMap<Head, f64> = IndexMap::new();
    let mut correct = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let inputs = chunk
            .iter()
            .map(|&i| training_input(net, &data.videos[i].frames, cfg, &mut sample_rng, &mut aug_rng))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.videos[i].label).collect();
        let batch = Tensor::stack(&inputs)?;

        let mut graph = Graph::new();
        let (grads, stats, values) = {
            let mut ctx = Ctx::new(&mut graph, &net.params, &net.buffers, Mode::Train);
            let x = ctx.graph.constant(batch);
            let out = net.forward(&mut ctx, x)?;
            let loss = match stage {
                1 => stage1_loss(&mut ctx, out.pair, &labels, &net.sketch)?,
                _ => stage2_loss(&mut ctx, out.pair, &labels, &net.sketch, cfg.power_norm)?,
            };
            let total = ctx.graph.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("stage {stage} loss at epoch {epoch}, batch {bi}: {total}")));
            }
            let gradients = ctx.graph.backward(loss.total)?;
            let bound: IndexMap<String, Var> =
                ctx.bound().iter().filter(|(n, _)| !frozen_in_stage(n, stage)).map(|(n, v)| (n.clone(), *v)).collect();
            let grads = named_grads(&bound, &gradients, &net.params)?;
            let stats = ctx.take_stats();
            let mut values = Vec::new();
            for (head, logits, l) in &loss.parts {
                values.push((*head, softmax(ctx.graph.value(*logits))?, ctx.graph.value(*l).data()[0]));
            }
            (grads, stats, values)
        };
        for (name, g) in &grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} at epoch {epoch}, batch {bi}")));
            }
        }
        let k = net.spec.num_classes;
        for (row, &y) in labels.iter().enumerate() {
            let mut score = vec![0.0; k];
            for (_, probs, _) in &values {
                for (s, p) in score.iter_mut().zip(&probs.data()[row * k..(row + 1) * k]) {
                    *s += p;
                }
            }
            correct += usize::from(argmax(&score) == y);
        }
        for (head, _, l) in &values {
            *sums.entry(*head).or_insert(0.0) += l * labels.len() as f64;
        }
        update_running_stats(&mut net.buffers, &stats)?;
        opt.step(&mut net.params, &grads, lr)?;
    }
    let n = data.videos.len() as f64;
    let mean = |h: Head| sums.get(&h).map(|s| s / n);
    Ok(EpochMetrics {
        stage,
        epoch,
        lr,
        loss_global: mean(Head::Global),
        loss_local: mean(Head::Local),
        loss_combined: mean(Head::Combined),
        train_top1: correct as f64 / n,
        test_top1: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Trains epochs `[first, cfg.epochs)`, evaluating on `test` periodically.
/// `on_epoch` sees every record as soon as it is complete.
pub fn train(
    net: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    first: usize,
    master: u64,
    mut on_epoch: impl FnMut(&Network, &Sgd, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    for epoch in first..cfg.epochs {
        let mut m = train_epoch(net, opt, data, cfg, epoch, master)?;
        if let Some(test) = test {
            if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
                let scoring = Scoring::for_stage(cfg.stage);
                let n = cfg.infer_samples.unwrap_or_else(|| default_samples(net.spec.kind));
                m.test_top1 = Some(evaluate(net, test, n, scoring, cfg.encoding, cfg.power_norm)?.top1);
            }
        }
        on_epoch(net, opt, &m)?;
        out.push(m);
    }
    Ok(out)
}

/// Which heads produce class scores at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Mean of the global-head and local-head softmax scores.
    Separate,
    Combined,
}

impl Scoring {
    pub fn for_stage(stage: u8) -> Self {
        if stage == 1 {
            Scoring::Separate
        } else {
            Scoring::Combined
        }
    }
}

/// Encoded inference inputs `[3, T, H, W]` for `n` uniformly placed samples.
pub fn inference_inputs(net: &Network, frames: &Tensor, n: usize, enc: InputEncoding) -> Result<Vec<Tensor>> {
    if frames.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("infer_video", "empty video"));
    }
    if n == 0 {
        return Err(Error::invalid("infer_video", "need at least one sample"));
    }
    let [t, h, w] = net.spec.input_shape;
    let frames = synth::loop_pad(frames, t)?;
    let len = frames.shape()[0];
    let picks: Vec<Vec<usize>> = if net.spec.kind.is_3d() {
        synth::clip_starts_uniform(len, t, n)?.into_iter().map(|s| (s..s + t).collect()).collect()
    } else {
        (0..n).map(|k| synth::snippet_indices_uniform(len, t, k, n)).collect::<Result<_>>()?
    };
    picks
        .iter()
        .map(|idx| {
            let mut f = synth::gather_frames(&frames, idx)?;
            if f.shape()[1..] != [h, w] {
                if h != w {
                    return Err(Error::shape("infer_video", format!("cannot crop to {h}×{w}")));
                }
                f = synth::center_crop(&f, h)?;
            }
            synth::encode(&f, enc)
        })
        .collect()
}

/// Softmax class scores of each row of an encoded batch, in eval mode.
pub fn batch_scores(net: &Network, batch: Tensor, scoring: Scoring, power_norm: bool) -> Result<Tensor> {
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &net.params, &net.buffers, Mode::Eval);
    let x = ctx.graph.constant(batch);
    let out = net.forward(&mut ctx, x)?;
    let heads: &[Head] = match scoring {
        Scoring::Separate => &[Head::Global, Head::Local],
        Scoring::Combined => &[Head::Combined],
    };
    let mut total: Option<Tensor> = None;
    for &h in heads {
        let logits = head_logits(&mut ctx, out.pair, h, &net.sketch, power_norm)?;
        let p = softmax(ctx.graph.value(logits))?;
        total = Some(match total {
            None => p,
            Some(t) => crate::ops::elementwise_add(&t, &p)?,
        });
    }
    let k = heads.len() as f64;
    Ok(total.expect("at least one head").map(|v| v / k))
}

/// Video-level class scores: softmax scores averaged over `n` samples.
pub fn infer_video(net: &Network, frames: &Tensor, n: usize, scoring: Scoring, enc: InputEncoding, power_norm: bool) -> Result<Vec<f64>> {
    let inputs = inference_inputs(net, frames, n, enc)?;
    let scores = batch_scores(net, Tensor::stack(&inputs)?, scoring, power_norm)?;
    let k = net.spec.num_classes;
    let mut mean = vec![0.0; k];
    for row in scores.data().chunks_exact(k) {
        for (m, s) in mean.iter_mut().zip(row) {
            *m += s;
        }
    }
    Ok(mean.into_iter().map(|m| m / n as f64).collect())
}

/// Mean stage objective over a dataset in eval mode, one centered sample
/// per video and no augmentation.
pub fn dataset_loss(net: &Network, data: &Dataset, stage: u8, enc: InputEncoding, power_norm: bool, batch: usize) -> Result<f64> {
    check_dataset(net, data)?;
    let mut total = 0.0;
    for chunk in data.videos.chunks(batch.max(1)) {
        let inputs = chunk
            .iter()
            .map(|v| Ok(inference_inputs(net, &v.frames, 1, enc)?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|v| v.label).collect();
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, &net.params, &net.buffers, Mode::Eval);
        let x = ctx.graph.constant(Tensor::stack(&inputs)?);
        let out = net.forward(&mut ctx, x)?;
        let loss = match stage {
            1 => stage1_loss(&mut ctx, out.pair, &labels, &net.sketch)?,
            _ => stage2_loss(&mut ctx, out.pair, &labels, &net.sketch, power_norm)?,
        };
        total += ctx.graph.value(loss.total).data()[0] * labels.len() as f64;
    }
    Ok(total / data.videos.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub samples_per_video: usize,
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(net: &Network, data: &Dataset, n: usize, scoring: Scoring, enc: InputEncoding, power_norm: bool) -> Result<EvalReport> {
    check_dataset(net, data)?;
    let k = net.spec.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for v in &data.videos {
        let scores = infer_video(net, &v.frames, n, scoring, enc, power_norm)?;
        confusion[v.label][argmax(&scores)] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        videos: data.videos.len(),
        samples_per_video: n,
        top1: correct as f64 / data.videos.len() as f64,
        per_class,
        confusion,
    })
}
