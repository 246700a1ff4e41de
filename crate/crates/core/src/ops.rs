//! Primitive numeric kernels over [`Tensor`].
//!
//! Volumetric operations take `[B, C, T, H, W]` inputs. Convolution is
//! cross-correlation with zero padding; a 2D convolution is the `kt = 1`
//! case, which leaves frames independent.
//!
//! Every reduction accumulates in a fixed order starting from `+0.0`, so
//! results are bit-deterministic and a one-hot kernel reproduces its input
//! exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AXES: [&str; 3] = ["T", "H", "W"];

/// Geometry of a volumetric convolution over the (T, H, W) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride: [1; 3], pad: [0; 3] }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: [usize; 3]) -> Self {
        self.pad = pad;
        self
    }

    /// Padding that keeps extents unchanged at unit stride for odd kernels.
    pub fn same_pad(mut self) -> Self {
        self.pad = [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2];
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.out_channels, self.in_channels, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::invalid(
                    "conv",
                    format!("axis {}: kernel and stride must be positive", AXES[a]),
                ));
            }
            out[a] = window_extent(input[a] + 2 * self.pad[a], self.kernel[a], self.stride[a])
                .ok_or_else(|| {
                    Error::shape(
                        "conv",
                        format!(
                            "axis {}: kernel {} exceeds padded extent {}",
                            AXES[a],
                            self.kernel[a],
                            input[a] + 2 * self.pad[a]
                        ),
                    )
                })?;
        }
        Ok(out)
    }
}

/// `floor((n - k) / s) + 1`, or `None` when the window does not fit.
pub fn window_extent(padded: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn dims5(x: &Tensor, op: &'static str) -> Result<[usize; 5]> {
    match *x.shape() {
        [b, c, t, h, w] => Ok([b, c, t, h, w]),
        ref s => Err(Error::shape(op, format!("expected rank-5 [B,C,T,H,W] input, got {s:?}"))),
    }
}

fn check_conv(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<([usize; 5], [usize; 3])> {
    let d = dims5(x, "conv")?;
    if d[1] != spec.in_channels {
        return Err(Error::shape(
            "conv",
            format!("axis C: input has {} channels, spec expects {}", d[1], spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv",
            format!("weight shape {:?} does not match spec {:?}", w.shape(), spec.weight_shape()),
        ));
    }
    let out = spec.output_extents([d[2], d[3], d[4]])?;
    Ok((d, out))
}

/// Unfolds one sample `[C, T, H, W]` into `[C*kt*kh*kw, To*Ho*Wo]`.
fn im2col(x: &[f64], d: [usize; 4], spec: &ConvSpec, out: [usize; 3], col: &mut [f64]) {
    let [c, t, h, w] = d;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let [to, ho, wo] = out;
    let p = to * ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let inside_th = it >= 0 && it < t as isize && ih >= 0 && ih < h as isize;
                            let base = if inside_th { (it as usize * h + ih as usize) * w } else { 0 };
                            for ow in 0..wo {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                dst[idx] = if inside_th && iw >= 0 && iw < w as isize {
                                    xc[base + iw as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a zeroed sample.
fn col2im(col: &[f64], d: [usize; 4], spec: &ConvSpec, out: [usize; 3], x: &mut [f64]) {
    let [c, t, h, w] = d;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let [to, ho, wo] = out;
    let p = to * ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * t * h * w..(ci + 1) * t * h * w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let inside_th = it >= 0 && it < t as isize && ih >= 0 && ih < h as isize;
                            if !inside_th {
                                idx += wo;
                                continue;
                            }
                            let base = (it as usize * h + ih as usize) * w;
                            for ow in 0..wo {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    xc[base + iw as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == [1, 1, 1] && spec.stride == [1, 1, 1] && spec.pad == [0, 0, 0]
}

/// `out[m, :] = Σ_k a[m, k] · b[k, :]`, accumulating k in ascending order.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Volumetric cross-correlation. `x: [B, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`.
pub fn conv(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (d, out) = check_conv(x, w, spec)?;
    let [b, c, t, h, wd] = d;
    let p: usize = out.iter().product();
    let kk = c * spec.kernel.iter().product::<usize>();
    let co = spec.out_channels;
    let in_len = c * t * h * wd;
    let mut y = vec![0.0; b * co * p];
    let pointwise = is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    for bi in 0..b {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let cols: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, [c, t, h, wd], spec, out, &mut col);
            &col
        };
        gemm_acc(w.data(), cols, &mut y[bi * co * p..(bi + 1) * co * p], co, kk, p);
    }
    Tensor::new(vec![b, co, out[0], out[1], out[2]], y)
}

/// Gradients of [`conv`] with respect to its input and weight.
pub fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (d, out) = check_conv(x, w, spec)?;
    let [b, c, t, h, wd] = d;
    let co = spec.out_channels;
    let p: usize = out.iter().product();
    if grad_out.shape() != [b, co, out[0], out[1], out[2]] {
        return Err(Error::shape("conv_backward", "gradient shape does not match conv output"));
    }
    let kk = c * spec.kernel.iter().product::<usize>();
    let in_len = c * t * h * wd;
    let pointwise = is_pointwise(spec);
    let mut col = vec![0.0; kk * p];
    let mut gcol = vec![0.0; kk * p];
    let mut gx = vec![0.0; b * in_len];
    let mut gw = vec![0.0; co * kk];
    let wdata = w.data();
    for bi in 0..b {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let go = &grad_out.data()[bi * co * p..(bi + 1) * co * p];
        if pointwise {
            col.copy_from_slice(xs);
        } else {
            im2col(xs, [c, t, h, wd], spec, out, &mut col);
        }
        // gw[o, k] += Σ_p go[o, p] col[k, p]
        for o in 0..co {
            let gorow = &go[o * p..(o + 1) * p];
            let gwrow = &mut gw[o * kk..(o + 1) * kk];
            for (k, g) in gwrow.iter_mut().enumerate() {
                let crow = &col[k * p..(k + 1) * p];
                *g += dot(gorow, crow);
            }
        }
        // gcol[k, :] = Σ_o w[o, k] go[o, :]
        gcol.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..co {
            let gorow = &go[o * p..(o + 1) * p];
            for k in 0..kk {
                let wv = wdata[o * kk + k];
                let grow = &mut gcol[k * p..(k + 1) * p];
                for (g, &gv) in grow.iter_mut().zip(gorow) {
                    *g += wv * gv;
                }
            }
        }
        let gxs = &mut gx[bi * in_len..(bi + 1) * in_len];
        if pointwise {
            gxs.copy_from_slice(&gcol);
        } else {
            col2im(&gcol, [c, t, h, wd], spec, out, gxs);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Max pooling without padding; trailing elements that do not fill a
/// window are dropped (floor rule).
pub fn max_pool(x: &Tensor, extent: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    Ok(max_pool_with_argmax(x, extent, stride)?.0)
}

/// Max pooling that also returns, per output element, the flat input
/// index of the first maximum in window scan order.
pub fn max_pool_with_argmax(
    x: &Tensor,
    extent: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, t, h, w] = dims5(x, "max_pool")?;
    let dims = [t, h, w];
    let mut out = [0; 3];
    for a in 0..3 {
        if extent[a] == 0 || stride[a] == 0 {
            return Err(Error::invalid("max_pool", format!("axis {}: zero extent or stride", AXES[a])));
        }
        out[a] = window_extent(dims[a], extent[a], stride[a]).ok_or_else(|| {
            Error::shape(
                "max_pool",
                format!("axis {}: window {} larger than input {}", AXES[a], extent[a], dims[a]),
            )
        })?;
    }
    let [to, ho, wo] = out;
    let mut y = Vec::with_capacity(b * c * to * ho * wo);
    let mut arg = Vec::with_capacity(y.capacity());
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * t * h * w;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for dt in 0..extent[0] {
                        for dh in 0..extent[1] {
                            for dw in 0..extent[2] {
                                let i = base
                                    + ((ot * stride[0] + dt) * h + oh * stride[1] + dh) * w
                                    + ow * stride[2]
                                    + dw;
                                if best_i == usize::MAX || data[i] > best {
                                    best = data[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, to, ho, wo], y)?, arg))
}

/// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(Error::shape("global_avg_pool", format!("need rank >= 3, got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let n: usize = x.shape()[2..].iter().product();
    let y = x.data().chunks_exact(n).map(|plane| plane_mean(plane)).collect();
    Tensor::new(vec![b, c], y)
}

/// Mean taken relative to the first element, so a constant plane returns
/// its value exactly.
pub fn plane_mean(plane: &[f64]) -> f64 {
    let anchor = plane[0];
    anchor + plane.iter().map(|&v| v - anchor).sum::<f64>() / plane.len() as f64
}

/// Copies `v[b, c]` to every location of a tensor shaped like `like`.
pub fn broadcast_over_locations(v: &Tensor, like: &[usize]) -> Result<Tensor> {
    if like.len() < 3 || v.shape() != &like[..2] {
        return Err(Error::shape(
            "broadcast_over_locations",
            format!("vector {:?} does not match leading [B, C] of {like:?}", v.shape()),
        ));
    }
    let n: usize = like[2..].iter().product();
    let mut y = Vec::with_capacity(v.len() * n);
    for &val in v.data() {
        y.extend(std::iter::repeat(val).take(n));
    }
    Tensor::new(like.to_vec(), y)
}

/// Per-location sum back to `[B, C]`; adjoint of [`broadcast_over_locations`].
pub fn sum_over_locations(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(Error::shape("sum_over_locations", format!("need rank >= 3, got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let n: usize = x.shape()[2..].iter().product();
    let y = x.data().chunks_exact(n).map(|plane| plane.iter().sum::<f64>()).collect();
    Tensor::new(vec![b, c], y)
}

/// `a: [M, K]` times `b: [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
    };
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `w: [M, N]` times `v: [N]`.
pub fn matvec(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    match (w.shape(), v.shape()) {
        (&[m, n], &[n2]) if n == n2 => {
            let y = w.data().chunks_exact(n).map(|row| dot(row, v.data())).collect();
            Tensor::new(vec![m], y)
        }
        (sw, sv) => Err(Error::shape("matvec", format!("cannot apply {sw:?} to {sv:?}"))),
    }
}

/// Row-batched linear map without bias: `x: [B, N]`, `w: [M, N]` -> `[B, M]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    match (x.shape(), w.shape()) {
        (&[b, n], &[m, n2]) if n == n2 => {
            let mut y = Vec::with_capacity(b * m);
            for row in x.data().chunks_exact(n) {
                for wrow in w.data().chunks_exact(n) {
                    y.push(dot(wrow, row));
                }
            }
            Tensor::new(vec![b, m], y)
        }
        (sx, sw) => Err(Error::shape("linear", format!("input {sx:?} incompatible with weight {sw:?}"))),
    }
}

pub fn relu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(relu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

fn zip_with(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let y = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), y)
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "elementwise_add", |x, y| x + y)
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "elementwise_mul", |x, y| x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(data: &[f64], t: usize) -> Tensor {
        Tensor::new(vec![1, 1, t, 1, 1], data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_computed_1d() {
        // Along W: [1,2,3] ⋆ [1,0,-1] with one zero on each side.
        let x = Tensor::new(vec![1, 1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, [1, 1, 3]).with_pad([0, 0, 1]);
        let y = conv(&x, &w, &spec).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn temporal_identity_kernel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 5, 2, 2], 1.0, &mut rng).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.set(&[c, c, 1, 0, 0], 1.0);
        }
        let spec = ConvSpec::new(3, 3, [3, 1, 1]).with_pad([1, 0, 0]);
        assert!(conv(&x, &w, &spec).unwrap().bit_eq(&x));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axis() {
        let x = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]).unwrap();
        let err = conv(&x, &w, &ConvSpec::new(3, 1, [1, 1, 1])).unwrap_err();
        assert!(err.to_string().contains("axis C"), "{err}");
        let w = Tensor::zeros(&[1, 2, 1, 5, 5]).unwrap();
        let err = conv(&x, &w, &ConvSpec::new(2, 1, [1, 5, 5])).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn max_pool_temporal() {
        let y = max_pool(&vol(&[1.0, 5.0, 2.0, 4.0], 4), [2, 1, 1], [2, 1, 1]).unwrap();
        assert_eq!(y.data(), &[5.0, 4.0]);
        let x = vol(&[3.0, -1.0, 2.0], 3);
        assert!(max_pool(&x, [1, 1, 1], [1, 1, 1]).unwrap().bit_eq(&x));
        assert!(max_pool(&x, [4, 1, 1], [1, 1, 1]).is_err());
    }

    #[test]
    fn gap_and_broadcast() {
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[2, 3, 2, 3, 3], 0.7).unwrap();
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 0.7));

        let v = Tensor::new(vec![1, 2], vec![7.0, -1.0]).unwrap();
        let b = broadcast_over_locations(&v, &[1, 2, 1, 2, 2]).unwrap();
        assert_eq!(b.data(), &[7.0, 7.0, 7.0, 7.0, -1.0, -1.0, -1.0, -1.0]);
        assert!(broadcast_over_locations(&v, &[1, 3, 1, 2, 2]).is_err());
    }

    #[test]
    fn pointwise_nonlinearities() {
        let x = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        assert_eq!(relu(&x).data(), &[1.0, 0.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
        assert_eq!(sigmoid_scalar(-800.0), 0.0);
    }

    #[test]
    fn matmul_and_matvec_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Tensor::from_vec(vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matvec(&a, &v).unwrap().data(), &[-2.0, -2.0]);
        let col = v.reshape(&[3, 1]).unwrap();
        assert_eq!(matmul(&a, &col).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(linear(&v.reshape(&[1, 3]).unwrap(), &a).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&a, &a).is_err());
    }
}
