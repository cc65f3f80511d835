//! Forward kernels on plain tensors. The tape in [`crate::tape`] records these
//! and pairs each with its backward rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (q2, s) = b.dims2()?;
    if q != q2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions of {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; p * s];
    for i in 0..p {
        let row = &mut out[i * s..(i + 1) * s];
        for l in 0..q {
            let av = ad[i * q + l];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * s..(l + 1) * s];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[p, s], out)
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

/// Row-wise `softmax(row / beta)`, stabilized by subtracting the row max.
pub fn softmax_rows(m: &Tensor, beta: f64) -> Result<Tensor> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::domain(
            "softmax_rows",
            format!("temperature must be positive, got {beta}"),
        ));
    }
    let (rows, cols) = m.dims2()?;
    let mut out = m.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / beta).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[rows, cols], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Geometry shared by the depthwise convolution forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Self> {
        let (c, h, w) = x.dims3()?;
        let (kc, kh, kw) = kernels.dims3()?;
        if kc != c || kh != kw {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!(
                    "need one square kernel per channel; input {:?}, kernels {:?}",
                    x.shape(),
                    kernels.shape()
                ),
            ));
        }
        let k = kh;
        let (pad_top, pad_left, ph, pw) = match padding {
            Padding::Valid => (0, 0, h, w),
            Padding::Same => ((k - 1) / 2, (k - 1) / 2, h + k - 1, w + k - 1),
        };
        if k > ph || k > pw {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!(
                    "kernel {k}x{k} larger than padded input {ph}x{pw} (input {:?})",
                    x.shape()
                ),
            ));
        }
        Ok(ConvGeometry {
            channels: c,
            height: h,
            width: w,
            k,
            pad_top,
            pad_left,
            out_h: ph - k + 1,
            out_w: pw - k + 1,
        })
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(u, v)`, if inside the input.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, u: usize, v: usize) -> Option<(usize, usize)> {
        let y = (oy + u).checked_sub(self.pad_top)?;
        let x = (ox + v).checked_sub(self.pad_left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Per-channel 2-D cross-correlation without bias.
pub fn depthwise_conv2d(x: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(x, kernels, padding)?;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; g.channels * g.out_h * g.out_w];
    for c in 0..g.channels {
        let plane = &xd[c * g.height * g.width..(c + 1) * g.height * g.width];
        let kern = &kd[c * g.k * g.k..(c + 1) * g.k * g.k];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for u in 0..g.k {
                    for v in 0..g.k {
                        if let Some((y, xx)) = g.source(oy, ox, u, v) {
                            acc += plane[y * g.width + xx] * kern[u * g.k + v];
                        }
                    }
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    Tensor::new(&[g.channels, g.out_h, g.out_w], out)
}

/// Half-open index range of bin `b` when `len` positions are split into `bins` bins.
pub fn pool_bin(b: usize, len: usize, bins: usize) -> std::ops::Range<usize> {
    (b * len / bins)..((b + 1) * len / bins)
}

/// Adaptive max pooling to `out × out` bins per channel. Also returns, for each
/// output entry, the flat input index of its (first row-major) maximum.
pub fn adaptive_max_pool2d_with_argmax(x: &Tensor, out: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if out == 0 || out > h || out > w {
        return Err(Error::dim(
            "adaptive_max_pool2d",
            format!("output {out}x{out} larger than input {h}x{w}"),
        ));
    }
    let xd = x.data();
    let mut values = Vec::with_capacity(c * out * out);
    let mut argmax = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for by in 0..out {
            for bx in 0..out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for y in pool_bin(by, h, out) {
                    for xx in pool_bin(bx, w, out) {
                        let idx = (ch * h + y) * w + xx;
                        if best_idx == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[c, out, out], values)?, argmax))
}

pub fn adaptive_max_pool2d(x: &Tensor, out: usize) -> Result<Tensor> {
    adaptive_max_pool2d_with_argmax(x, out).map(|(t, _)| t)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, used to initialise raw temperatures.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    a.reshape(shape)
}

/// `out[c, :] = x[c, :] + x[c, :] · (alpha · a[c])` for `x` of shape `[C, N]` and `a` of length `C`.
pub fn row_scale_add(x: &Tensor, a: &Tensor, alpha: f64) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if a.numel() != rows || a.rank() != 1 {
        return Err(Error::dim(
            "reweight",
            format!("calibration vector {:?} does not match {rows} channels", a.shape()),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(rows * cols);
    for (c, &ac) in a.data().iter().enumerate() {
        let w = alpha * ac;
        out.extend(xd[c * cols..(c + 1) * cols].iter().map(|&v| v + v * w));
    }
    Tensor::new(&[rows, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let m = Tensor::from_fn(&[3, 3], |i| (i as f64).sin()).unwrap();
        let eye = Tensor::eye(3).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t2(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::zeros(&[2, 4]).unwrap();
        let s = softmax_rows(&z, 0.7).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let m = t2(&[&[1f64.ln(), 3f64.ln()]]);
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);

        let m = t2(&[&[-1.0, 0.3, 1.0, 0.9]]);
        let s = softmax_rows(&m, 1e6).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-3));

        assert!(matches!(softmax_rows(&m, 0.0), Err(Error::Domain { .. })));
        assert!(softmax_rows(&m, -1.0).is_err());
    }

    #[test]
    fn conv_identity_kernel_and_hand_sum() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.37).cos()).unwrap();
        let mut delta = Tensor::zeros(&[2, 3, 3]).unwrap();
        delta.data_mut()[4] = 1.0;
        delta.data_mut()[9 + 4] = 1.0;
        assert_eq!(depthwise_conv2d(&x, &delta, Padding::Same).unwrap(), x);

        let ones = Tensor::ones(&[1, 2, 2]).unwrap();
        let out = depthwise_conv2d(&ones, &ones, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[1, 3, 3]).unwrap();
        assert!(depthwise_conv2d(&x, &k, Padding::Valid).is_err());
        assert!(depthwise_conv2d(&x, &k, Padding::Same).is_ok());
        let k = Tensor::zeros(&[2, 1, 1]).unwrap();
        assert!(depthwise_conv2d(&x, &k, Padding::Valid).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| ((i * 7) % 5) as f64).unwrap();
        assert_eq!(adaptive_max_pool2d(&x, 3).unwrap(), x);

        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(adaptive_max_pool2d(&x, 1).unwrap().data(), &[4.0]);

        assert!(adaptive_max_pool2d(&x, 3).is_err());
    }

    #[test]
    fn pool_ties_pick_first_row_major() {
        let x = Tensor::new(&[1, 2, 2], vec![5.0, 5.0, 5.0, 1.0]).unwrap();
        let (_, arg) = adaptive_max_pool2d_with_argmax(&x, 1).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn activations_at_origin() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(0f64.tanh(), 0.0);
        assert!((softplus_scalar(softplus_inverse(1.0)) - 1.0).abs() < 1e-15);
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn gelu_gradient_matches_central_difference() {
        let eps = 1e-6;
        let numeric = (gelu_scalar(1.0 + eps) - gelu_scalar(1.0 - eps)) / (2.0 * eps);
        let analytic = gelu_grad_scalar(1.0);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs());
        assert!(rel < 1e-8, "rel err {rel}");
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5).unwrap();
        let ones = Tensor::ones(&[3, 4]).unwrap();
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert!(add(&a, &Tensor::ones(&[4, 3]).unwrap()).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = Tensor::from_fn(&[3, 5], |i| i as f64).unwrap();
        assert_eq!(transpose2d(&transpose2d(&a).unwrap()).unwrap(), a);
    }
}
