//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every evaluation: each method evaluates its
//! operation eagerly, appends a node holding the result and whatever the
//! backward rule needs, and returns a [`Var`] handle. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction
//! and [`Graph::backward`] walks it once in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::autodiff::loss;
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::sketch::{tensor_sketch, tensor_sketch_backward, SketchConfig};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running averages.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    Gap { x: Var },
    Broadcast { v: Var },
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SoftmaxCe { logits: Var, grad: Tensor },
    Sum { x: Var },
    DotConst { x: Var, weights: Tensor },
    ToRows { x: Var },
    Sketch { x: Var, cfg: Arc<SketchConfig> },
    GroupMean { x: Var, groups: usize },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    PowerNorm { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` if `v` does not influence the output or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn channels_and_rest(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need [B, C, ...], got {shape:?}")));
    }
    let rest: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], rest))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (parameters and differentiated inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv(self.value(x), self.value(w), &spec)?;
        Ok(self.push(y, Op::Conv { x, w, spec }, &[x, w]))
    }

    pub fn max_pool(&mut self, x: Var, extent: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let (y, argmax) = ops::max_pool_with_argmax(self.value(x), extent, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }, &[x]))
    }

    pub fn broadcast_over_locations(&mut self, v: Var, like: &[usize]) -> Result<Var> {
        let y = ops::broadcast_over_locations(self.value(v), like)?;
        Ok(self.push(y, Op::Broadcast { v }, &[v]))
    }

    /// `x: [B, N]`, `w: [M, N]` -> `x wᵀ: [B, M]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::Linear { x, w }, &[x, w]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let m = match *xv.shape() {
            [_, m] if bv.shape() == [m] => m,
            _ => {
                return Err(Error::shape(
                    "add_bias",
                    format!("bias {:?} does not fit rows of {:?}", bv.shape(), xv.shape()),
                ));
            }
        };
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(y, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale { x, k }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (b, c, n) = channels_and_rest(self.value(x).shape(), "batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", format!("affine parameters must have {c} entries")));
        }
        Ok((b, c, n))
    }

    /// Normalizes with the batch's own per-channel statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, n) = self.check_affine(x, gamma, beta)?;
        let count = (b * n) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xv[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                mean[ci] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xv[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                var[ci] += plane.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 }).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.affine_normalize(x, gamma, beta, &mean, &inv_std, b, c, n);
        let (y, xhat) = y?;
        let stats = BatchStats { mean, var: unbiased };
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, &[x, gamma, beta]);
        Ok((out, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, n) = self.check_affine(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running statistics must have {c} entries")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std, b, c, n)?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }, &[x, gamma, beta]))
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        b: usize,
        c: usize,
        n: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * n..(bi * c + ci + 1) * n;
                for i in r {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = g[ci] * h + bt[ci];
                }
            }
        }
        Ok((Tensor::new(self.value(x).shape().to_vec(), y)?, xhat))
    }

    /// Mean softmax cross-entropy over the batch, as a `[1]` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = loss::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, grad }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape("dot_const", format!("{:?} vs {:?}", xv.shape(), weights.shape())));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }, &[x]))
    }

    /// `[B, C, ...]` -> `[B * N, C]`: one row per location, batch-major.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, n) = channels_and_rest(xv.shape(), "to_rows")?;
        let src = xv.data();
        let mut y = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..n {
                    y[(bi * n + p) * c + ci] = src[(bi * c + ci) * n + p];
                }
            }
        }
        let t = Tensor::new(vec![b * n, c], y)?;
        Ok(self.push(t, Op::ToRows { x }, &[x]))
    }

    /// Tensor sketch of every row of `x: [M, C]` -> `[M, d]`.
    pub fn tensor_sketch(&mut self, x: Var, cfg: Arc<SketchConfig>) -> Result<Var> {
        let xv = self.value(x);
        let m = match *xv.shape() {
            [m, c] if c == cfg.input_dim => m,
            ref s => {
                return Err(Error::shape(
                    "tensor_sketch",
                    format!("expected [M, {}] rows, got {s:?}", cfg.input_dim),
                ));
            }
        };
        let mut y = Vec::with_capacity(m * cfg.sketch_dim);
        for row in xv.data().chunks_exact(cfg.input_dim) {
            y.extend(tensor_sketch(row, &cfg)?);
        }
        let t = Tensor::new(vec![m, cfg.sketch_dim], y)?;
        Ok(self.push(t, Op::Sketch { x, cfg }, &[x]))
    }

    /// Averages consecutive row blocks: `[G * N, D]` -> `[G, D]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = match *xv.shape() {
            [r, d] if groups > 0 && r % groups == 0 => (r, d),
            ref s => return Err(Error::shape("group_mean", format!("{s:?} not divisible into {groups} groups"))),
        };
        let per = rows / groups;
        let mut y = vec![0.0; groups * d];
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let out = &mut y[(r / per) * d..(r / per + 1) * d];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        y.iter_mut().for_each(|v| *v /= per as f64);
        let t = Tensor::new(vec![groups, d], y)?;
        Ok(self.push(t, Op::GroupMean { x, groups }, &[x]))
    }

    /// Column concatenation of `[B, P]` and `[B, Q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, p, q) = match (av.shape(), bv.shape()) {
            (&[r, p], &[r2, q]) if r == r2 => (r, p, q),
            (sa, sb) => return Err(Error::shape("concat_cols", format!("{sa:?} vs {sb:?}"))),
        };
        let mut y = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            y.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            y.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let t = Tensor::new(vec![rows, p + q], y)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// Row-wise signed square root followed by L2 normalization.
    pub fn power_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = match *xv.shape() {
            [_, d] => d,
            ref s => return Err(Error::shape("power_normalize", format!("expected a matrix, got {s:?}"))),
        };
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            y.extend(power_normalize_row(row));
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(t, Op::PowerNorm { x }, &[x]))
    }

    /// Fingerprint of every piecewise-linear branch taken: ReLU masks and
    /// max-pool argmaxes. Two evaluations with equal fingerprints lie on the
    /// same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let shape = self.value(output).shape();
        if shape != [1] {
            return Err(Error::shape("backward", format!("output must be a scalar, got {shape:?}")));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} does not match output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, spec } => {
                let (gx, gw) = ops::conv_backward(self.value(*x), self.value(*w), spec, g)?;
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape())?;
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Gap { x } => {
                let shape = self.value(*x).shape();
                let n: usize = shape[2..].iter().product();
                let scaled = g.map(|v| v / n as f64);
                acc(*x, ops::broadcast_over_locations(&scaled, shape)?);
            }
            Op::Broadcast { v } => acc(*v, ops::sum_over_locations(g)?),
            Op::Linear { x, w } => {
                // y = x wᵀ: dx = g w, dw = gᵀ x
                let gx = ops::matmul(g, self.value(*w))?;
                let gw = ops::matmul(&transpose(g)?, self.value(*x))?;
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::AddBias { x, b } => {
                let m = self.value(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(vec![m], gb)?);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                acc(*a, ops::elementwise_mul(g, self.value(*b))?);
                acc(*b, ops::elementwise_mul(g, self.value(*a))?);
            }
            Op::Scale { x, k } => acc(*x, g.map(|v| v * k)),
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid { x } => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.value(*x).shape().to_vec();
                let (b, c, n) = channels_and_rest(&shape, "batch_norm")?;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in (bi * c + ci) * n..(bi * c + ci + 1) * n {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                let count = (b * n) as f64;
                let mut gx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        for i in (bi * c + ci) * n..(bi * c + ci + 1) * n {
                            gx[i] = if *train {
                                k * (gd[i] - sum_g[ci] / count - xhat[i] * sum_gx[ci] / count)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                acc(*x, Tensor::new(shape, gx)?);
                acc(*gamma, Tensor::new(vec![c], sum_gx)?);
                acc(*beta, Tensor::new(vec![c], sum_g)?);
            }
            Op::SoftmaxCe { logits, grad } => {
                let k = g.data()[0];
                acc(*logits, grad.map(|v| v * k));
            }
            Op::Sum { x } => {
                let k = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), k)?);
            }
            Op::DotConst { x, weights } => {
                let k = g.data()[0];
                acc(*x, weights.map(|v| v * k));
            }
            Op::ToRows { x } => {
                let shape = self.value(*x).shape().to_vec();
                let (b, c, n) = channels_and_rest(&shape, "to_rows")?;
                let src = g.data();
                let mut gx = vec![0.0; src.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..n {
                            gx[(bi * c + ci) * n + p] = src[(bi * n + p) * c + ci];
                        }
                    }
                }
                acc(*x, Tensor::new(shape, gx)?);
            }
            Op::Sketch { x, cfg } => {
                let xv = self.value(*x);
                let mut gx = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks_exact(cfg.input_dim).zip(g.data().chunks_exact(cfg.sketch_dim)) {
                    gx.extend(tensor_sketch_backward(row, grow, cfg)?);
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::GroupMean { x, groups } => {
                let shape = self.value(*x).shape().to_vec();
                let (rows, d) = (shape[0], shape[1]);
                let per = rows / groups;
                let mut gx = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    gx.extend(g.data()[(r / per) * d..(r / per + 1) * d].iter().map(|v| v / per as f64));
                }
                acc(*x, Tensor::new(shape, gx)?);
            }
            Op::Concat { a, b } => {
                let p = self.value(*a).shape()[1];
                let q = self.value(*b).shape()[1];
                let rows = g.shape()[0];
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for row in g.data().chunks_exact(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new(vec![rows, p], ga)?);
                acc(*b, Tensor::new(vec![rows, q], gb)?);
            }
            Op::Reshape { x } => acc(*x, g.reshape(self.value(*x).shape())?),
            Op::PowerNorm { x } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut gx = Vec::with_capacity(xv.len());
                for ((row, yrow), grow) in xv.data().chunks_exact(d).zip(node.value.data().chunks_exact(d)).zip(g.data().chunks_exact(d)) {
                    let norm = signed_sqrt_norm(row);
                    if norm == 0.0 {
                        gx.extend(std::iter::repeat(0.0).take(d));
                        continue;
                    }
                    let yg: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((&xi, &yi), &gi) in row.iter().zip(yrow).zip(grow) {
                        let gs = (gi - yi * yg) / norm;
                        gx.push(gs / (2.0 * (xi.abs() + POWER_NORM_EPS).sqrt()));
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

/// Regularizes the square-root derivative at zero.
const POWER_NORM_EPS: f64 = 1e-12;

fn signed_sqrt_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v.abs()).sum::<f64>().sqrt()
}

fn power_normalize_row(row: &[f64]) -> Vec<f64> {
    let norm = signed_sqrt_norm(row);
    if norm == 0.0 {
        return vec![0.0; row.len()];
    }
    row.iter().map(|&v| v.signum() * v.abs().sqrt() / norm).collect()
}

fn transpose(m: &Tensor) -> Result<Tensor> {
    let (r, c) = match *m.shape() {
        [r, c] => (r, c),
        ref s => return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}"))),
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}
