//! Central-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the denominator in the relative error.
pub const REL_ERR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FdMode {
    Central,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates sampled per parameter tensor.
    pub coords_per_param: usize,
    /// Check every coordinate instead of a sample.
    pub full: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, coords_per_param: 32, full: false, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates rejected because the ± perturbations landed on
    /// different sides of a ReLU or max-pool kink.
    pub kink_skips: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub h: f64,
    pub mode: FdMode,
    pub entries: Vec<ParamCheck>,
    pub non_finite: Option<String>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        if self.non_finite.is_some() {
            return f64::INFINITY;
        }
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_err() < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_EPS)
}

/// Evaluates `f` on fresh leaves; returns the scalar output and the kink
/// fingerprint of the evaluation.
fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let v = g.value(out);
    if v.shape() != [1] {
        return Err(Error::shape("grad_check", format!("objective must be scalar, got {:?}", v.shape())));
    }
    Ok((v.data()[0], g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar objective `f` against
/// central differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// `f` receives one leaf per entry of `params`, in order. Coordinates whose
/// perturbations straddle a kink are resampled.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::invalid("grad_check", format!("step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let mut report = GradReport { h: opts.h, mode: FdMode::Central, entries: Vec::new(), non_finite: None };

    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    if !g.value(out).all_finite() {
        report.non_finite = Some("objective".into());
        return Ok(report);
    }
    let grads = g.backward(out)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    for (pi, (name, value)) in params.iter().enumerate() {
        let analytic = match grads.get(leaves[pi]) {
            Some(t) => t.clone(),
            None => Tensor::zeros(value.shape())?,
        };
        if !analytic.all_finite() {
            report.non_finite = Some(format!("analytic gradient of {name}"));
            return Ok(report);
        }
        let mut order: Vec<usize> = (0..value.len()).collect();
        let want = if opts.full { order.len() } else { opts.coords_per_param.min(order.len()) };
        if !opts.full {
            order.shuffle(&mut rng);
        }
        let mut entry = ParamCheck { name: name.clone(), checked: 0, kink_skips: 0, max_rel_err: 0.0 };
        for &i in &order {
            if entry.checked == want {
                break;
            }
            let orig = value.data()[i];
            work[pi].1.data_mut()[i] = orig + opts.h;
            let (fp, sp) = evaluate(&f, &work)?;
            work[pi].1.data_mut()[i] = orig - opts.h;
            let (fm, sm) = evaluate(&f, &work)?;
            work[pi].1.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = Some(format!("{name}[{i}]"));
                report.entries.push(entry);
                return Ok(report);
            }
            if sp != sm {
                entry.kink_skips += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            entry.max_rel_err = entry.max_rel_err.max(relative_error(analytic.data()[i], numeric));
            entry.checked += 1;
        }
        report.entries.push(entry);
    }
    Ok(report)
}
