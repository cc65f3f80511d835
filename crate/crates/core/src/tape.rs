//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every recorded op also adds its forward FLOP cost to a running counter, which
//! the cost model uses as an instrumented cross-check of its closed forms.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, Padding};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax { input: Var, beta: Var },
    DepthwiseConv { input: Var, kernels: Var, padding: Padding },
    MaxPool { input: Var, argmax: Vec<usize> },
    RowScaleAdd { x: Var, a: Var, alpha: f64 },
    SliceRows { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    Element { input: Var, index: usize },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradient accumulators indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed into it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => tape.value(v).map(|_| 0.0),
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, flops: usize) -> Var {
        self.flops += flops as u64;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (p, q) = self.value(a).dims2()?;
        let s = out.shape()[1];
        Ok(self.push(out, Op::MatMul(a, b), 2 * p * q * s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose2d(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), 0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let n = out.numel();
        Ok(self.push(out, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let n = out.numel();
        Ok(self.push(out, Op::Sub(a, b), n))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        let n = out.numel();
        Ok(self.push(out, Op::Hadamard(a, b), n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = ops::scale(self.value(a), s);
        let n = out.numel();
        self.push(out, Op::Scale(a, s), n)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        let n = out.numel();
        self.push(out, Op::Gelu(a), n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = ops::tanh_act(self.value(a));
        let n = out.numel();
        self.push(out, Op::Tanh(a), n)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = ops::softplus(self.value(a));
        let n = out.numel();
        self.push(out, Op::Softplus(a), n)
    }

    /// Row softmax of `m / beta`; `beta` must be a single-element var and is differentiated too.
    pub fn softmax_rows(&mut self, m: Var, beta: Var) -> Result<Var> {
        let b = self.scalar_of(beta, "softmax_rows")?;
        let out = ops::softmax_rows(self.value(m), b)?;
        let (rows, cols) = out.dims2()?;
        Ok(self.push(out, Op::Softmax { input: m, beta }, 4 * rows * cols + rows))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var, padding: Padding) -> Result<Var> {
        let g = ConvGeometry::new(self.value(x), self.value(kernels), padding)?;
        let out = ops::depthwise_conv2d(self.value(x), self.value(kernels), padding)?;
        let flops = 2 * g.channels * g.out_h * g.out_w * g.k * g.k;
        Ok(self.push(
            out,
            Op::DepthwiseConv {
                input: x,
                kernels,
                padding,
            },
            flops,
        ))
    }

    pub fn adaptive_max_pool2d(&mut self, x: Var, out: usize) -> Result<Var> {
        let (pooled, argmax) = ops::adaptive_max_pool2d_with_argmax(self.value(x), out)?;
        let n = self.value(x).numel();
        Ok(self.push(pooled, Op::MaxPool { input: x, argmax }, n))
    }

    /// `x + x ⊙ (alpha · a)` with `a` broadcast along rows of `x`.
    pub fn row_scale_add(&mut self, x: Var, a: Var, alpha: f64) -> Result<Var> {
        let out = ops::row_scale_add(self.value(x), self.value(a), alpha)?;
        let flops = 2 * out.numel() + out.shape()[0];
        Ok(self.push(out, Op::RowScaleAdd { x, a, alpha }, flops))
    }

    /// Rows `start..start + len` of a rank-2 var.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of range for {rows}", start + len),
            ));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { input: a, start }, 0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let cols = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {cols} and {c} differ"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), 0))
    }

    /// Single entry `index` of `a`, as a shape `[1]` var.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = *self.value(a).data().get(index).ok_or_else(|| {
            Error::dim(
                "element",
                format!("index {index} out of range for {:?}", self.value(a).shape()),
            )
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Element { input: a, index }, 0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.value(a).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(a), 2 * n)
    }

    /// Mean squared error between two equally shaped vars.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.value(pred).numel();
        let diff = self.sub(pred, target)?;
        let ss = self.sum_squares(diff);
        Ok(self.scale(ss, 1.0 / n as f64))
    }

    fn scalar_of(&self, v: Var, op: &'static str) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::dim(
                op,
                format!("expected a single-element var, got {:?}", t.shape()),
            ));
        }
        Ok(t.data()[0])
    }

    /// Reverse pass from a single-element output, seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = self.value(output).map(|_| 1.0);
        if seed.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got {:?}", seed.shape()),
            ));
        }
        self.backward_with(output, seed)
    }

    /// Reverse pass with an explicit upstream gradient for `output`.
    ///
    /// Nodes are visited in exact reverse recording order; accumulators start
    /// empty (zero) and are only ever added to.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dim(
                "backward",
                format!(
                    "seed {:?} does not match output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads = Gradients {
            grads: vec![None; output.0 + 1],
        };
        grads.grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads.grads[idx].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(Error::Numeric {
                    name: format!("node {idx}"),
                    detail: "non-finite gradient during backward".into(),
                });
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads.grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut Gradients) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bt = ops::transpose2d(self.value(*b))?;
                let at = ops::transpose2d(self.value(*a))?;
                grads.accumulate(*a, ops::matmul(g, &bt)?);
                grads.accumulate(*b, ops::matmul(&at, g)?);
            }
            Op::Transpose(a) => grads.accumulate(*a, ops::transpose2d(g)?),
            Op::Reshape(a) => grads.accumulate(*a, g.reshape(self.value(*a).shape())?),
            Op::Add(a, b) => {
                grads.accumulate(*a, g.clone());
                grads.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                grads.accumulate(*a, g.clone());
                grads.accumulate(*b, ops::scale(g, -1.0));
            }
            Op::Hadamard(a, b) => {
                grads.accumulate(*a, ops::hadamard(g, self.value(*b))?);
                grads.accumulate(*b, ops::hadamard(g, self.value(*a))?);
            }
            Op::Scale(a, s) => grads.accumulate(*a, ops::scale(g, *s)),
            Op::Gelu(a) => {
                let d = self.value(*a).map(ops::gelu_grad_scalar);
                grads.accumulate(*a, ops::hadamard(g, &d)?);
            }
            Op::Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y);
                grads.accumulate(*a, ops::hadamard(g, &d)?);
            }
            Op::Softplus(a) => {
                let d = self.value(*a).map(ops::sigmoid_scalar);
                grads.accumulate(*a, ops::hadamard(g, &d)?);
            }
            Op::Softmax { input, beta } => {
                let b = self.scalar_of(*beta, "softmax_rows")?;
                let (dm, dbeta) = softmax_backward(self.value(*input), &node.value, g, b)?;
                grads.accumulate(*input, dm);
                grads.accumulate(*beta, Tensor::scalar(dbeta));
            }
            Op::DepthwiseConv {
                input,
                kernels,
                padding,
            } => {
                let (dx, dk) = conv_backward(self.value(*input), self.value(*kernels), *padding, g)?;
                grads.accumulate(*input, dx);
                grads.accumulate(*kernels, dk);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = self.value(*input).map(|_| 0.0);
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                grads.accumulate(*input, dx);
            }
            Op::RowScaleAdd { x, a, alpha } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let av = self.value(*a).data();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut da = Vec::with_capacity(av.len());
                for (c, &ac) in av.iter().enumerate() {
                    let grow = &g.data()[c * cols..(c + 1) * cols];
                    let xrow = &xv.data()[c * cols..(c + 1) * cols];
                    let m = 1.0 + alpha * ac;
                    dx.extend(grow.iter().map(|&gv| gv * m));
                    let dot: f64 = grow.iter().zip(xrow).map(|(gv, xv)| gv * xv).sum();
                    da.push(alpha * dot);
                }
                grads.accumulate(*x, Tensor::new(xv.shape(), dx)?);
                grads.accumulate(*a, Tensor::new(self.value(*a).shape(), da)?);
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let cols = src.shape()[1];
                let mut d = src.map(|_| 0.0);
                d.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                grads.accumulate(*input, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let part = Tensor::new(self.value(p).shape(), g.data()[offset..offset + n].to_vec())?;
                    grads.accumulate(p, part);
                    offset += n;
                }
            }
            Op::Element { input, index } => {
                let mut d = self.value(*input).map(|_| 0.0);
                d.data_mut()[*index] = g.data()[0];
                grads.accumulate(*input, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                grads.accumulate(*a, self.value(*a).map(|_| gv));
            }
            Op::SumSquares(a) => {
                let gv = g.data()[0];
                grads.accumulate(*a, self.value(*a).map(|v| 2.0 * gv * v));
            }
        }
        Ok(())
    }
}

/// Returns `(d input, d beta)` for `y = softmax_rows(m / beta)`.
fn softmax_backward(m: &Tensor, y: &Tensor, g: &Tensor, beta: f64) -> Result<(Tensor, f64)> {
    let (rows, cols) = y.dims2()?;
    let mut dm = vec![0.0; rows * cols];
    let mut dbeta = 0.0;
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let mr = &m.data()[r * cols..(r + 1) * cols];
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            // gradient w.r.t. the scaled logit m/beta
            let ds = yr[j] * (gr[j] - inner);
            dm[r * cols + j] = ds / beta;
            dbeta -= ds * mr[j] / (beta * beta);
        }
    }
    Ok((Tensor::new(&[rows, cols], dm)?, dbeta))
}

fn conv_backward(x: &Tensor, kernels: &Tensor, padding: Padding, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let geo = ConvGeometry::new(x, kernels, padding)?;
    let (xd, kd, gd) = (x.data(), kernels.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let plane = geo.height * geo.width;
    let kk = geo.k * geo.k;
    for c in 0..geo.channels {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let gv = gd[(c * geo.out_h + oy) * geo.out_w + ox];
                for u in 0..geo.k {
                    for v in 0..geo.k {
                        if let Some((y, xx)) = geo.source(oy, ox, u, v) {
                            let xi = c * plane + y * geo.width + xx;
                            let ki = c * kk + u * geo.k + v;
                            dx[xi] += gv * kd[ki];
                            dk[ki] += gv * xd[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(kernels.shape(), dk)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_when_a_var_is_used_twice() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_is_row_broadcast_of_column_sums() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).sin()).unwrap();
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).cos()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let da = grads.get(va).unwrap();
        for i in 0..3 {
            for l in 0..4 {
                let expected: f64 = b.row(l).iter().sum();
                assert!((da.at2(i, l) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).unwrap());
        let y = tape.gelu(x);
        assert!(tape.backward(y).is_err());
        assert!(tape.backward_with(y, Tensor::ones(&[2, 2]).unwrap()).is_ok());
    }

    #[test]
    fn flop_counter_tracks_matmul_and_softmax() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3, 4]).unwrap());
        let beta = tape.leaf(Tensor::scalar(1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 2 * 3 * 4);
        tape.softmax_rows(c, beta).unwrap();
        assert_eq!(tape.flops(), 48 + 4 * 8 + 2);
    }
}
