//! Discrete Fourier transforms over complex sequences.
//!
//! Thin wrapper over `rustfft` with a per-thread plan cache. Any length
//! `>= 1` is supported; the inverse is normalized by `1/n` so that
//! `ifft(fft(x)) == x`.

use std::cell::RefCell;

use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("fft", "sequence length must be at least 1"));
    }
    let mut buf = x.to_vec();
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse { p.plan_fft_inverse(buf.len()) } else { p.plan_fft_forward(buf.len()) };
        plan.process(&mut buf);
    });
    if inverse {
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(buf)
}

pub fn fft_1d(x: &[Complex64]) -> Result<Vec<Complex64>> {
    transform(x, false)
}

pub fn ifft_1d(x: &[Complex64]) -> Result<Vec<Complex64>> {
    transform(x, true)
}

pub fn fft_real(x: &[f64]) -> Result<Vec<Complex64>> {
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_1d(&c)
}
