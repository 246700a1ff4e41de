//! Count sketch and FFT-based tensor sketch.
//!
//! The tensor sketch of `x` is the circular convolution of two independent
//! count sketches of `x`, which equals the count sketch of the outer
//! product `x xᵀ` under the combined hash `(h1(i) + h2(j)) mod d` and sign
//! `s1(i) s2(j)`. Its inner products are unbiased estimates of the
//! second-order polynomial kernel `<x, y>²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft_real, ifft_1d, Complex64};

/// Hash and sign tables of a tensor sketch. Fixed once drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub input_dim: usize,
    pub sketch_dim: usize,
    pub seed: u64,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl SketchConfig {
    /// Draws uniform hashes over `[0, d)` and uniform ±1 signs.
    pub fn new(input_dim: usize, sketch_dim: usize, seed: u64) -> Result<Self> {
        if sketch_dim < 2 {
            return Err(Error::invalid("sketch", format!("sketch dimension {sketch_dim} < 2")));
        }
        if input_dim == 0 {
            return Err(Error::invalid("sketch", "input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hash = |rng: &mut ChaCha8Rng| (0..input_dim).map(|_| rng.gen_range(0..sketch_dim)).collect();
        let h1 = hash(&mut rng);
        let h2 = hash(&mut rng);
        let sign = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..input_dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let s1 = sign(&mut rng);
        let s2 = sign(&mut rng);
        Ok(SketchConfig { input_dim, sketch_dim, seed, h1, h2, s1, s2 })
    }

    /// Structural validity, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let c = self.input_dim;
        let d = self.sketch_dim;
        if d < 2 {
            return Err(Error::invalid("sketch", format!("sketch dimension {d} < 2")));
        }
        for (name, len) in [("h1", self.h1.len()), ("h2", self.h2.len()), ("s1", self.s1.len()), ("s2", self.s2.len())] {
            if len != c {
                return Err(Error::invalid("sketch", format!("table {name} has {len} entries, expected {c}")));
            }
        }
        if self.h1.iter().chain(&self.h2).any(|&h| h >= d) {
            return Err(Error::invalid("sketch", "hash value outside [0, d)"));
        }
        if self.s1.iter().chain(&self.s2).any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::invalid("sketch", "sign table entries must be ±1"));
        }
        Ok(())
    }
}

/// `out[k] = Σ_{i : h(i) = k} s(i) x[i]`.
pub fn count_sketch(x: &[f64], h: &[usize], s: &[f64], d: usize) -> Result<Vec<f64>> {
    if h.len() != x.len() || s.len() != x.len() {
        return Err(Error::shape(
            "count_sketch",
            format!("input has {} entries, tables have {} and {}", x.len(), h.len(), s.len()),
        ));
    }
    let mut out = vec![0.0; d];
    for ((&v, &k), &sign) in x.iter().zip(h).zip(s) {
        if k >= d {
            return Err(Error::invalid("count_sketch", format!("hash {k} outside [0, {d})")));
        }
        out[k] += sign * v;
    }
    Ok(out)
}

fn check_input(x: &[f64], cfg: &SketchConfig) -> Result<()> {
    if x.len() != cfg.input_dim {
        return Err(Error::shape(
            "tensor_sketch",
            format!("input has {} entries, sketch expects {}", x.len(), cfg.input_dim),
        ));
    }
    Ok(())
}

fn real_part(z: &[Complex64], scale: f64) -> Result<Vec<f64>> {
    let tol = 1e-9 * (1.0 + scale);
    let mut out = Vec::with_capacity(z.len());
    for v in z {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::NonFinite("tensor_sketch".into()));
        }
        if v.im.abs() > tol {
            return Err(Error::NonFinite(format!(
                "tensor_sketch: imaginary residue {:e} exceeds {tol:e}",
                v.im
            )));
        }
        out.push(v.re);
    }
    Ok(out)
}

fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `IFFT(FFT(cs1(x)) ⊙ FFT(cs2(x)))`, real part.
pub fn tensor_sketch(x: &[f64], cfg: &SketchConfig) -> Result<Vec<f64>> {
    check_input(x, cfg)?;
    let d = cfg.sketch_dim;
    let a = count_sketch(x, &cfg.h1, &cfg.s1, d)?;
    let b = count_sketch(x, &cfg.h2, &cfg.s2, d)?;
    let fa = fft_real(&a)?;
    let fb = fft_real(&b)?;
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(p, q)| p * q).collect();
    real_part(&ifft_1d(&prod)?, norm1(&a) * norm1(&b))
}

/// Vector-Jacobian product of [`tensor_sketch`]: given `∂L/∂ϕ`, returns `∂L/∂x`.
pub fn tensor_sketch_backward(x: &[f64], grad: &[f64], cfg: &SketchConfig) -> Result<Vec<f64>> {
    check_input(x, cfg)?;
    let d = cfg.sketch_dim;
    if grad.len() != d {
        return Err(Error::shape("tensor_sketch_backward", format!("gradient length {} != {d}", grad.len())));
    }
    let a = count_sketch(x, &cfg.h1, &cfg.s1, d)?;
    let b = count_sketch(x, &cfg.h2, &cfg.s2, d)?;
    let fg = fft_real(grad)?;
    let fa = fft_real(&a)?;
    let fb = fft_real(&b)?;
    // Circular cross-correlations of the upstream gradient with each sketch.
    let ga: Vec<Complex64> = fg.iter().zip(&fb).map(|(g, q)| g * q.conj()).collect();
    let gb: Vec<Complex64> = fg.iter().zip(&fa).map(|(g, p)| g * p.conj()).collect();
    let gnorm = norm1(grad);
    let da = real_part(&ifft_1d(&ga)?, gnorm * norm1(&b))?;
    let db = real_part(&ifft_1d(&gb)?, gnorm * norm1(&a))?;
    Ok((0..cfg.input_dim)
        .map(|i| cfg.s1[i] * da[cfg.h1[i]] + cfg.s2[i] * db[cfg.h2[i]])
        .collect())
}

/// Count sketch of the explicit outer product `x ⊗ x` under the joint hash
/// `(h1(i) + h2(j)) mod d` and sign `s1(i) s2(j)`. Quadratic in the input
/// width; used as a reference for [`tensor_sketch`].
pub fn outer_product_sketch(x: &[f64], cfg: &SketchConfig) -> Result<Vec<f64>> {
    check_input(x, cfg)?;
    let d = cfg.sketch_dim;
    let mut out = vec![0.0; d];
    for i in 0..x.len() {
        for j in 0..x.len() {
            out[(cfg.h1[i] + cfg.h2[j]) % d] += cfg.s1[i] * cfg.s2[j] * x[i] * x[j];
        }
    }
    Ok(out)
}

/// Exact value of the kernel the sketch approximates.
pub fn polynomial_kernel(x: &[f64], y: &[f64]) -> f64 {
    let ip: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    ip * ip
}

pub fn sketch_kernel_estimate(x: &[f64], y: &[f64], cfg: &SketchConfig) -> Result<f64> {
    let px = tensor_sketch(x, cfg)?;
    let py = tensor_sketch(y, cfg)?;
    Ok(px.iter().zip(&py).map(|(a, b)| a * b).sum())
}
