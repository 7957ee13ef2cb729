//! Differentiable operations: forward constructors on [`Tensor`] and the
//! matching vector-Jacobian products.

use std::rc::Rc;

use crate::conv::{self, ConvDims};
use crate::error::{Result, TensorError};
use crate::special;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

type Derivative = Rc<dyn Fn(f64) -> f64>;

#[derive(Clone)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Softplus,
    Relu,
    Tanh,
    Digamma,
    LnGamma,
    ClampMin(f64),
    Reshape,
    Custom(&'static str, Derivative),
}

impl UnaryKind {
    fn name(&self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar => "add_scalar",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Digamma => "digamma",
            UnaryKind::LnGamma => "ln_gamma",
            UnaryKind::ClampMin(_) => "clamp_min",
            UnaryKind::Reshape => "reshape",
            UnaryKind::Custom(name, _) => name,
        }
    }

    /// d out / d in at input `x` with output `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Scale(c) => *c,
            UnaryKind::AddScalar | UnaryKind::Reshape => 1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Digamma => special::trigamma(x).unwrap_or(f64::NAN),
            UnaryKind::LnGamma => special::digamma(x).unwrap_or(f64::NAN),
            UnaryKind::ClampMin(floor) => {
                if x > *floor {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Custom(_, d) => d(x),
        }
    }
}

pub(crate) enum Op {
    Binary {
        kind: BinaryKind,
        lhs: Tensor,
        rhs: Tensor,
        lhs_map: Option<Vec<usize>>,
        rhs_map: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        input: Tensor,
    },
    SumAll(Tensor),
    SumAxis {
        input: Tensor,
        axis: usize,
    },
    MaxAxis {
        input: Tensor,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Tensor,
        axis: usize,
    },
    MatMul {
        lhs: Tensor,
        rhs: Tensor,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        dims: ConvDims,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Binary { kind, .. } => kind.name(),
            Op::Unary { kind, .. } => kind.name(),
            Op::SumAll(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Softmax { .. } => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Binary { lhs, rhs, .. } | Op::MatMul { lhs, rhs } => vec![lhs, rhs],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::Unary { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MaxAxis { input, .. }
            | Op::Softmax { input, .. }
            | Op::SumAll(input) => vec![input],
        }
    }

    /// Vector-Jacobian product: gradient contributions for each parent that
    /// requires a gradient.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut grads = Vec::with_capacity(2);
        match self {
            Op::Binary {
                kind,
                lhs,
                rhs,
                lhs_map,
                rhs_map,
            } => {
                let a = lhs.values();
                let b = rhs.values();
                let ai = |i: usize| lhs_map.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| rhs_map.as_ref().map_or(i, |m| m[i]);
                if lhs.requires_grad() {
                    let mut ga = vec![0.0; a.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => b[bi(i)],
                            BinaryKind::Div => 1.0 / b[bi(i)],
                        };
                        ga[ai(i)] += gi * d;
                    }
                    grads.push((lhs.clone(), ga));
                }
                if rhs.requires_grad() {
                    let mut gb = vec![0.0; b.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => a[ai(i)],
                            BinaryKind::Div => {
                                let bv = b[bi(i)];
                                -a[ai(i)] / (bv * bv)
                            }
                        };
                        gb[bi(i)] += gi * d;
                    }
                    grads.push((rhs.clone(), gb));
                }
            }
            Op::Unary { kind, input } => {
                let x = input.values();
                let y = out.values();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                    .collect();
                grads.push((input.clone(), gx));
            }
            Op::SumAll(input) => {
                grads.push((input.clone(), vec![g[0]; input.numel()]));
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                let mut gx = vec![0.0; input.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        let dst = &mut gx[(o * len + k) * inner..][..inner];
                        dst.copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                grads.push((input.clone(), gx));
            }
            Op::MaxAxis { input, argmax } => {
                let mut gx = vec![0.0; input.numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
                grads.push((input.clone(), gx));
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                let s = out.values();
                let mut gx = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * s[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = s[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                grads.push((input.clone(), gx));
            }
            Op::MatMul { lhs, rhs } => {
                let (m, k) = (lhs.shape()[0], lhs.shape()[1]);
                let n = rhs.shape()[1];
                if lhs.requires_grad() {
                    // dA = G B^T
                    let b = rhs.values();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] = (0..n).map(|c| g[i * n + c] * b[j * n + c]).sum();
                        }
                    }
                    grads.push((lhs.clone(), ga));
                }
                if rhs.requires_grad() {
                    // dB = A^T G
                    let a = lhs.values();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..k {
                            let aij = a[i * k + j];
                            let row = &mut gb[j * n..][..n];
                            for (t, gv) in row.iter_mut().zip(&g[i * n..][..n]) {
                                *t += aij * gv;
                            }
                        }
                    }
                    grads.push((rhs.clone(), gb));
                }
            }
            Op::Conv2d {
                input,
                weight,
                dims,
            } => {
                let (gin, gw) = conv::backward(
                    dims,
                    input.values(),
                    weight.values(),
                    g,
                    input.requires_grad(),
                    weight.requires_grad(),
                );
                if input.requires_grad() {
                    grads.push((input.clone(), gin));
                }
                if weight.requires_grad() {
                    grads.push((weight.clone(), gw));
                }
            }
        }
        grads
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (product of leading extents, extent of `axis`, product of trailing extents)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], d: usize| -> usize {
        let offset = rank - s.len();
        if d < offset {
            1
        } else {
            s[d - offset]
        }
    };
    (0..rank)
        .map(|d| match (pad(a, d), pad(b, d)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }),
        })
        .collect()
}

/// For every element of `out_shape`, the flat index of the broadcast source
/// element of `in_shape`. `None` when no broadcasting happens.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        let extent = if d < offset { 1 } else { in_shape[d - offset] };
        strides[d] = if extent == 1 { 0 } else { stride };
        stride *= extent;
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut at = 0usize;
    for _ in 0..total {
        map.push(at);
        for d in (0..rank).rev() {
            counter[d] += 1;
            at += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            at -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::AxisOutOfRange {
            op,
            axis,
            shape: shape.to_vec(),
        })
    }
}

fn grad_op(requires: bool, op: impl FnOnce() -> Op) -> Option<Op> {
    requires.then(op)
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let shape = broadcast_shape(kind.name(), self.shape(), other.shape())?;
        let lhs_map = broadcast_map(self.shape(), &shape);
        let rhs_map = broadcast_map(other.shape(), &shape);
        let (a, b) = (self.values(), other.values());
        let data: Vec<f64> = match (&lhs_map, &rhs_map) {
            (None, None) => a.iter().zip(b).map(|(x, y)| kind.apply(*x, *y)).collect(),
            _ => (0..numel(&shape))
                .map(|i| {
                    let x = a[lhs_map.as_ref().map_or(i, |m| m[i])];
                    let y = b[rhs_map.as_ref().map_or(i, |m| m[i])];
                    kind.apply(x, y)
                })
                .collect(),
        };
        let op = grad_op(self.requires_grad() || other.requires_grad(), || Op::Binary {
            kind,
            lhs: self.clone(),
            rhs: other.clone(),
            lhs_map,
            rhs_map,
        });
        Ok(Tensor::from_parts(shape, data, op))
    }

    /// Element-wise sum with NumPy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.values().iter().map(|&x| f(x)).collect();
        let op = grad_op(self.requires_grad(), || Op::Unary {
            kind,
            input: self.clone(),
        });
        Tensor::from_parts(self.shape().to_vec(), data, op)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::AddScalar, |x| x + c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    /// Natural logarithm; non-positive entries produce NaN / -inf.
    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log, f64::ln)
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus, softplus)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh, f64::tanh)
    }

    /// max(x, floor); the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(UnaryKind::ClampMin(floor), |x| x.max(floor))
    }

    fn first_outside_domain(&self, op: &'static str) -> Result<()> {
        match self.values().iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            Some(&value) => Err(TensorError::Domain { op, value }),
            None => Ok(()),
        }
    }

    /// Element-wise ψ(x); every entry must be positive.
    pub fn digamma(&self) -> Result<Tensor> {
        self.first_outside_domain("digamma")?;
        Ok(self.unary(UnaryKind::Digamma, |x| {
            special::digamma(x).expect("domain checked")
        }))
    }

    /// Element-wise ln Γ(x); every entry must be positive.
    pub fn ln_gamma(&self) -> Result<Tensor> {
        self.first_outside_domain("ln_gamma")?;
        Ok(self.unary(UnaryKind::LnGamma, |x| {
            special::ln_gamma(x).expect("domain checked")
        }))
    }

    /// Element-wise map with a caller-supplied derivative. Intended for
    /// one-off nonlinearities and for exercising the gradient checker.
    pub fn map_with_derivative(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        self.unary(UnaryKind::Custom(name, Rc::new(df)), f)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let op = grad_op(self.requires_grad(), || Op::Unary {
            kind: UnaryKind::Reshape,
            input: self.clone(),
        });
        Ok(Tensor::from_parts(shape.to_vec(), self.to_vec(), op))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.values().iter().sum();
        let op = grad_op(self.requires_grad(), || Op::SumAll(self.clone()));
        Tensor::from_parts(Vec::new(), vec![total], op)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..][..inner];
            for k in 0..len {
                for (d, s) in dst.iter_mut().zip(&x[(o * len + k) * inner..][..inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let op = grad_op(self.requires_grad(), || Op::SumAxis {
            input: self.clone(),
            axis,
        });
        Ok(Tensor::from_parts(shape, data, op))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis].max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Maximum over `axis`, keeping it with extent 1. Ties route the
    /// gradient to the first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("max_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for k in 1..len {
                    let at = (o * len + k) * inner + i;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                data.push(x[best]);
                argmax.push(best);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let op = grad_op(self.requires_grad(), || Op::MaxAxis {
            input: self.clone(),
            argmax,
        });
        Ok(Tensor::from_parts(shape, data, op))
    }

    /// Softmax along `axis` (shift-stabilised).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - m).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[at(k)] /= z;
                }
            }
        }
        let op = grad_op(self.requires_grad(), || Op::Softmax {
            input: self.clone(),
            axis,
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), data, op))
    }

    /// [m, k] x [k, n] matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let (x, y) = (self.values(), other.values());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..k {
                let xij = x[i * k + j];
                for (d, yv) in data[i * n..][..n].iter_mut().zip(&y[j * n..][..n]) {
                    *d += xij * yv;
                }
            }
        }
        let op = grad_op(self.requires_grad() || other.requires_grad(), || Op::MatMul {
            lhs: self.clone(),
            rhs: other.clone(),
        });
        Ok(Tensor::from_parts(vec![m, n], data, op))
    }

    /// Stride-1 2-D convolution of an `[N, C, H, W]` input with an
    /// `[O, C, KH, KW]` kernel and `padding` zeros on every side.
    pub fn conv2d(&self, weight: &Tensor, padding: usize) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(mismatch());
        }
        if x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3] {
            return Err(mismatch());
        }
        let dims = ConvDims {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            height: x[2],
            width: x[3],
            kh: w[2],
            kw: w[3],
            pad: padding,
        };
        let data = conv::forward(&dims, self.values(), weight.values());
        let shape = vec![dims.batch, dims.out_ch, dims.out_height(), dims.out_width()];
        let op = grad_op(self.requires_grad() || weight.requires_grad(), || Op::Conv2d {
            input: self.clone(),
            weight: weight.clone(),
            dims,
        });
        Ok(Tensor::from_parts(shape, data, op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softplus_values() {
        let x = t(&[3], &[0.0, 50.0, -50.0]);
        let y = x.softplus();
        assert!((y.values()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y.values()[1] - 50.0).abs() < 1e-9);
        assert!(y.values()[2] > 0.0 && y.values()[2] < 1e-21);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = t(&[1, 3], &[0.7, 0.7, 0.7]).softmax(1).unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = t(&[2, 3], &[0.0; 6]).add(&t(&[4], &[0.0; 4])).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
        let msg = t(&[2, 3], &[0.0; 6])
            .matmul(&t(&[2, 3], &[0.0; 6]))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn broadcasting_rows_and_scalars() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let col = t(&[2, 1], &[10.0, 20.0]);
        assert_eq!(
            m.add(&col).unwrap().values(),
            &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]
        );
        let s = Tensor::scalar(2.0);
        assert_eq!(m.mul(&s).unwrap().values(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let row = t(&[3], &[1.0, 0.0, -1.0]);
        assert_eq!(m.sub(&row).unwrap().values(), &[0.0, 2.0, 4.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn broadcast_gradient_reduces_over_expanded_axes() {
        let m = Tensor::param(&[2, 3], vec![1.0; 6]).unwrap();
        let col = Tensor::param(&[2, 1], vec![2.0, 3.0]).unwrap();
        m.mul(&col).unwrap().sum().backward().unwrap();
        assert_eq!(col.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(m.grad().unwrap(), vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn axis_reductions() {
        let m = t(&[2, 3], &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]);
        assert_eq!(m.sum_axis(0).unwrap().values(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum_axis(1).unwrap().shape(), &[2, 1]);
        assert_eq!(m.max_axis(1).unwrap().values(), &[5.0, 6.0]);
        assert_eq!(m.mean_axis(1).unwrap().values(), &[3.0, 4.0]);
        assert!(matches!(
            m.sum_axis(2),
            Err(TensorError::AxisOutOfRange { op: "sum_axis", .. })
        ));
    }

    #[test]
    fn digamma_rejects_non_positive_entries() {
        let err = t(&[2], &[1.0, -0.5]).digamma().unwrap_err();
        assert_eq!(
            err,
            TensorError::Domain {
                op: "digamma",
                value: -0.5
            }
        );
    }

    #[test]
    fn constant_inputs_build_no_graph() {
        let y = t(&[2], &[1.0, 2.0]).exp().sum();
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }
}
