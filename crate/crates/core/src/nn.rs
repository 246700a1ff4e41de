//! Named parameters and the evaluation context that binds them to a graph.

use indexmap::IndexMap;

use crate::autodiff::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::seed;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Ordered map of named tensors. Insertion order is the serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("no tensor named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalars in tensors whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds named parameters to graph leaves during one forward evaluation.
///
/// Parameters become leaves lazily, on first use. Callers that need the
/// leaves up front (gradient checking) can pre-bind them.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    mode: Mode,
    vars: IndexMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, params: &'a ParamStore, buffers: &'a ParamStore, mode: Mode) -> Self {
        Ctx { graph, params, buffers, mode, vars: IndexMap::new(), stats: Vec::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.graph.leaf(self.params.get(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    /// Batch statistics recorded by training-mode batch norms.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    pub fn conv(&mut self, x: Var, weight: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(weight)?;
        self.graph.conv(x, w, spec)
    }

    /// Batch norm named `prefix`: parameters `prefix.gamma`, `prefix.beta`;
    /// running statistics `prefix.mean`, `prefix.var` in the buffer store.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, s) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((prefix.to_string(), s));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{prefix}.mean"))?.data();
                let var = self.buffers.get(&format!("{prefix}.var"))?.data();
                self.graph.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }
}

/// Gradients of every bound parameter, by name.
pub fn named_grads(bound: &IndexMap<String, Var>, grads: &Gradients, params: &ParamStore) -> Result<IndexMap<String, Tensor>> {
    let mut out = IndexMap::new();
    for (name, &v) in bound {
        let g = match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.get(name)?.shape())?,
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Folds observed batch statistics into running averages:
/// `running = m · running + (1 − m) · batch`.
pub fn update_running_stats(buffers: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, observed) in [("mean", &s.mean), ("var", &s.var)] {
            let run = buffers.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &o) in run.data_mut().iter_mut().zip(observed.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * o;
            }
        }
    }
    Ok(())
}

/// Xavier/Glorot uniform initialization with a stream derived from the
/// parameter name, so identically named tensors in different networks
/// receive identical values.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, master: u64, name: &str) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = seed::stream(master, name);
    Tensor::uniform(shape, -bound, bound, &mut rng)
}

pub fn xavier_conv(spec: &ConvSpec, master: u64, name: &str) -> Result<Tensor> {
    let k: usize = spec.kernel.iter().product();
    xavier(&spec.weight_shape(), spec.in_channels * k, spec.out_channels * k, master, name)
}

/// Temporal kernel that copies each channel's centre tap: an exact identity
/// map under zero padding of `kt / 2`.
pub fn identity_temporal_kernel(channels: usize, kt: usize) -> Result<Tensor> {
    let mut w = Tensor::zeros(&[channels, channels, kt, 1, 1])?;
    for c in 0..channels {
        w.set(&[c, c, kt / 2, 0, 0], 1.0);
    }
    Ok(w)
}

/// Registers a batch norm's affine parameters and running statistics.
pub fn init_batch_norm(params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)?);
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c])?);
    buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[c])?);
    buffers.insert(format!("{prefix}.var"), Tensor::full(&[c], 1.0)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut buffers = ParamStore::new();
        buffers.insert("bn.mean", Tensor::from_vec(vec![0.0]).unwrap());
        buffers.insert("bn.var", Tensor::from_vec(vec![1.0]).unwrap());
        let stats = vec![("bn".to_string(), BatchStats { mean: vec![2.0], var: vec![3.0] })];
        update_running_stats(&mut buffers, &stats).unwrap();
        assert!((buffers.get("bn.mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((buffers.get("bn.var").unwrap().data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn xavier_is_name_seeded_and_bounded() {
        let a = xavier(&[8, 4], 4, 8, 1, "w").unwrap();
        assert!(a.bit_eq(&xavier(&[8, 4], 4, 8, 1, "w").unwrap()));
        assert!(!a.bit_eq(&xavier(&[8, 4], 4, 8, 1, "v").unwrap()));
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
