//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed through it. Values are handed
//! around as [`Var`] handles; [`Tape::backward`] walks the record in reverse.

use std::cell::RefCell;

use crate::element::{gemm, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::kernels::activation::{self, axis_split};
use crate::kernels::broadcast::{broadcast_shape, expand, reduce_to, zip_with};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::kernels::matmul::{matmul_backward, matmul_forward, MatmulPlan};
use crate::kernels::norm;
use crate::kernels::pool::{self, PoolGeometry, PoolKind};
use crate::kernels::resample;
use crate::tensor::{numel_of, permute_into, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed in training mode: the mean and the
/// unbiased variance, ready for a running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    MatMul(usize, usize, MatmulPlan),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<T>, rstds: Vec<T> },
    Relu(usize),
    Gelu(usize),
    MaxPool { x: usize, geom: PoolGeometry, argmax: Vec<usize> },
    AvgPool { x: usize, geom: PoolGeometry },
    Nearest { x: usize, from: (usize, usize), to: (usize, usize) },
    GlobalAvgPool(usize),
    Softmax(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Nearest { .. } => "resample_nearest",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Record of executed operations. Single-threaded by construction.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to the leaf `v`; zeros when `v` did not influence
    /// the loss. Intermediate gradients are released during the backward pass.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, label: None });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as a constant by [`Tape::backward`].
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Attaches a human-readable name used in diagnostics.
    pub fn set_label(&self, v: Var, label: impl Into<String>) {
        self.nodes.borrow_mut()[v.0].label = Some(label.into());
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// First recorded value containing NaN or infinity, as `(index, description)`.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| {
            let what = match &n.label {
                Some(l) => format!("{} `{l}`", n.op.name()),
                None => n.op.name().to_string(),
            };
            (i, format!("node {i} ({what}, shape {:?})", n.value.shape()))
        })
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU input
    /// signs and max-pool selections). Two evaluations with equal signatures
    /// took the same smooth branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(x) => {
                    for &v in nodes[*x].value.data() {
                        h = fnv1a(h, &[(v > T::zero()) as u8]);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &i in argmax {
                        h = fnv1a(h, &(i as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn unary(&self, x: Var, f: impl Fn(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.0].value)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let out = broadcast_shape(ta.shape(), tb.shape())?;
            let data = zip_with(ta.data(), ta.shape(), tb.data(), tb.shape(), &out, f);
            Tensor::from_parts(out, data)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |t| Ok((t.map(|v| v * c), Op::Scale(x.0, c))))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok((Tensor::scalar(t.sum()), Op::Sum(x.0))))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = numel_of(&self.shape(x));
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        self.unary(x, |t| Ok((t.reshape(shape.clone())?, Op::Reshape(x.0))))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        self.unary(x, |t| Ok((t.permute(perm)?, Op::Permute(x.0, perm.to_vec()))))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(x, |t| Ok((t.narrow(axis, start, len)?, Op::Narrow { x: x.0, axis, start })))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first =
                nodes[xs.first().ok_or_else(|| TensorError::contract("concat", "no inputs"))?.0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::dim("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(TensorError::dim("concat", format!("{s:?} does not match {first:?}")));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis }, rg))
    }

    /// Batched matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, plan) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
            let data = matmul_forward(&plan, ta.data(), tb.data());
            (Tensor::from_parts(plan.out_shape.clone(), data), plan)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a.0, b.0, plan), rg))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let xs = tx.shape();
            if tw.rank() != 2 || xs.is_empty() || xs[xs.len() - 1] != tw.shape()[1] {
                return Err(TensorError::dim(
                    "linear",
                    format!("input {xs:?} incompatible with weight {:?}", tw.shape()),
                ));
            }
            let (fan_out, fan_in) = (tw.shape()[0], tw.shape()[1]);
            let rows = tx.numel() / fan_in;
            let mut out = vec![T::zero(); rows * fan_out];
            if let Some(b) = b {
                let tb = &nodes[b.0].value;
                if tb.shape() != [fan_out] {
                    return Err(TensorError::dim(
                        "linear",
                        format!("bias {:?} does not match {fan_out} outputs", tb.shape()),
                    ));
                }
                for row in out.chunks_mut(fan_out) {
                    row.copy_from_slice(tb.data());
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(
                T::one(),
                MatRef::new(tx.data(), rows, fan_in),
                MatRef::transposed(tw.data(), fan_out, fan_in),
                beta,
                &mut out,
            );
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = fan_out;
            Tensor::from_parts(shape, out)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) }, rg))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (value, geom) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeometry::new(tx.shape(), tw.shape(), stride, padding)?;
            let bias = match b {
                Some(b) => {
                    let tb = &nodes[b.0].value;
                    if tb.shape() != [geom.out_channels] {
                        return Err(TensorError::dim("conv2d", format!("bias {:?} does not match weight", tb.shape())));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let data = conv2d_forward(&geom, tx.data(), tw.data(), bias);
            (Tensor::from_parts(geom.output_shape(), data), geom)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), geom }, rg))
    }

    /// Per-channel normalization of an `[N, C, ...]` tensor. In training mode the
    /// returned statistics are the batch mean and unbiased variance.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (value, mean, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (tg, tb) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if tx.rank() < 2 {
                return Err(TensorError::dim("batch_norm", format!("expected [N, C, ...], got {:?}", tx.shape())));
            }
            let (n, c) = (tx.shape()[0], tx.shape()[1]);
            let s = tx.numel() / (n * c);
            if tg.shape() != [c] || tb.shape() != [c] {
                return Err(TensorError::dim(
                    "batch_norm",
                    format!("{c} channels but affine {:?}/{:?}", tg.shape(), tb.shape()),
                ));
            }
            let (mean, inv_std, stats) = match mode {
                BatchNormMode::Train => {
                    let (mean, var) = norm::channel_stats(tx.data(), n, c, s);
                    let count = (n * s) as f64;
                    let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let unbiased = var.iter().map(|&v| v * T::from_f64(correction)).collect();
                    let inv = norm::inv_std(&var);
                    (mean.clone(), inv, Some(BatchStats { mean, var: unbiased }))
                }
                BatchNormMode::Eval { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(TensorError::dim("batch_norm", "running statistics do not match channel count"));
                    }
                    (mean.to_vec(), norm::inv_std(var), None)
                }
            };
            let data = norm::channel_affine(tx.data(), (n, c, s), &mean, &inv_std, tg.data(), tb.data());
            (Tensor::from_parts(tx.shape().to_vec(), data), mean, inv_std, stats)
        };
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v =
            self.push(value, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std, batch_stats }, rg);
        Ok((v, stats))
    }

    /// Normalization over the last axis with eps 1e-6.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, means, rstds) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (tg, tb) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let dim = *tx.shape().last().ok_or_else(|| TensorError::dim("layer_norm", "rank-0 input"))?;
            if tg.shape() != [dim] || tb.shape() != [dim] {
                return Err(TensorError::dim("layer_norm", format!("last axis {dim} but affine {:?}", tg.shape())));
            }
            let (data, means, rstds) = norm::layer_norm_forward(tx.data(), dim, tg.data(), tb.data());
            (Tensor::from_parts(tx.shape().to_vec(), data), means, rstds)
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, means, rstds }, rg))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        // NaN passes through so a corrupted input stays visible downstream
        self.unary(x, |t| Ok((t.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() }), Op::Relu(x.0))))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok((t.map(activation::gelu), Op::Gelu(x.0))))
    }

    pub fn pool2d(&self, x: Var, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.unary(x, |t| {
            let geom = PoolGeometry::new(t.shape(), kernel, stride, padding)?;
            Ok(match kind {
                PoolKind::Max => {
                    let (data, argmax) = pool::max_pool_forward(&geom, t.data());
                    (Tensor::from_parts(geom.output_shape(), data), Op::MaxPool { x: x.0, geom, argmax })
                }
                PoolKind::Avg => {
                    let data = pool::avg_pool_forward(&geom, t.data());
                    (Tensor::from_parts(geom.output_shape(), data), Op::AvgPool { x: x.0, geom })
                }
            })
        })
    }

    /// Nearest-neighbour resize of the last two axes.
    pub fn resample_nearest(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.unary(x, |t| {
            let s = t.shape();
            if s.len() < 2 || out_h == 0 || out_w == 0 {
                return Err(TensorError::dim("resample_nearest", format!("cannot resize {s:?} to {out_h}x{out_w}")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = t.numel() / (h * w);
            let data = resample::nearest_forward(t.data(), planes, (h, w), (out_h, out_w));
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 2] = out_h;
            shape[r - 1] = out_w;
            Ok((Tensor::from_parts(shape, data), Op::Nearest { x: x.0, from: (h, w), to: (out_h, out_w) }))
        })
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| {
            if t.rank() != 4 {
                return Err(TensorError::dim("global_avg_pool", format!("expected rank 4, got {:?}", t.shape())));
            }
            let s = t.shape()[2] * t.shape()[3];
            let inv = T::one() / T::from_f64(s as f64);
            let data = t.data().chunks(s).map(|c| c.iter().copied().sum::<T>() * inv).collect();
            Ok((Tensor::from_parts(t.shape()[..2].to_vec(), data), Op::GlobalAvgPool(x.0)))
        })
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.unary(x, |t| {
            if axis >= t.rank() {
                return Err(TensorError::dim("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
            }
            let data = activation::softmax_forward(t.data(), axis_split(t.shape(), axis));
            Ok((Tensor::from_parts(t.shape().to_vec(), data), Op::Softmax(x.0, axis)))
        })
    }

    /// Mean cross-entropy of `[N, classes]` logits against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.unary(logits, |t| {
            if t.rank() != 2 || t.shape()[0] != labels.len() {
                return Err(TensorError::dim(
                    "cross_entropy",
                    format!("logits {:?} for {} labels", t.shape(), labels.len()),
                ));
            }
            let classes = t.shape()[1];
            if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
                return Err(TensorError::contract(
                    "cross_entropy",
                    format!("label {l} out of range for {classes} classes"),
                ));
            }
            let (loss, probs) = activation::cross_entropy_forward(t.data(), classes, labels);
            Ok((Tensor::scalar(loss), Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }))
        })
    }

    /// Gradients of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.numel() != 1 || root.rank() > 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(root.shape().to_vec(), vec![T::one()]));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let needs = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| &nodes[j].value;
            let mut emit = |j: usize, data: Vec<T>| {
                let shape = nodes[j].value.shape().to_vec();
                accumulate(&mut grads[j], shape, data);
            };
            let gd = g.data();
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for &j in [a, b] {
                        if needs(j) {
                            emit(j, reduce_to(gd, out_shape, val(j).shape()));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (&j, &k) in [(a, b), (b, a)] {
                        if needs(j) {
                            let other = expand(val(k).data(), val(k).shape(), out_shape);
                            let prod: Vec<T> = gd.iter().zip(&other).map(|(&x, &y)| x * y).collect();
                            emit(j, reduce_to(&prod, out_shape, val(j).shape()));
                        }
                    }
                }
                Op::Scale(a, c) => emit(*a, gd.iter().map(|&v| v * *c).collect()),
                Op::Sum(a) => emit(*a, vec![gd[0]; val(*a).numel()]),
                Op::Reshape(a) => emit(*a, gd.to_vec()),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let gs = strides(out_shape);
                    let src_strides: Vec<usize> = inv.iter().map(|&p| gs[p]).collect();
                    let mut out = Vec::with_capacity(gd.len());
                    permute_into(gd, val(*a).shape(), &src_strides, &mut out);
                    emit(*a, out);
                }
                Op::Narrow { x, axis, start } => {
                    let full = val(*x).shape();
                    let (outer, len, inner) = axis_split(out_shape, *axis);
                    let mut out = vec![T::zero(); val(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * full[*axis] + start) * inner;
                        out[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    emit(*x, out);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = axis_split(out_shape, *axis);
                    let mut offset = 0;
                    for &j in xs {
                        let len = val(j).shape()[*axis];
                        if needs(j) {
                            let mut out = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                out.extend_from_slice(&gd[src..src + len * inner]);
                            }
                            emit(j, out);
                        }
                        offset += len;
                    }
                }
                Op::MatMul(a, b, plan) => {
                    let (ga, gb) = matmul_backward(plan, val(*a).data(), val(*b).data(), gd, needs(*a), needs(*b));
                    if let Some(ga) = ga {
                        emit(*a, ga);
                    }
                    if let Some(gb) = gb {
                        emit(*b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (fan_out, fan_in) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.numel() / fan_in;
                    let gmat = MatRef::new(gd, rows, fan_out);
                    if needs(*x) {
                        let mut gx = vec![T::zero(); rows * fan_in];
                        gemm(T::one(), gmat, MatRef::new(tw.data(), fan_out, fan_in), T::zero(), &mut gx);
                        emit(*x, gx);
                    }
                    if needs(*w) {
                        let mut gw = vec![T::zero(); fan_out * fan_in];
                        gemm(
                            T::one(),
                            MatRef::transposed(gd, rows, fan_out),
                            MatRef::new(tx.data(), rows, fan_in),
                            T::zero(),
                            &mut gw,
                        );
                        emit(*w, gw);
                    }
                    if let Some(b) = b.filter(|&b| needs(b)) {
                        let mut gb = vec![T::zero(); fan_out];
                        for row in gd.chunks(fan_out) {
                            for (s, &v) in gb.iter_mut().zip(row) {
                                *s = *s + v;
                            }
                        }
                        emit(b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let need_b = b.is_some_and(needs);
                    let grads = conv2d_backward(geom, val(*x).data(), val(*w).data(), gd, needs(*x), needs(*w), need_b);
                    if let Some(gx) = grads.input {
                        emit(*x, gx);
                    }
                    if let Some(gw) = grads.weight {
                        emit(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, grads.bias) {
                        emit(*b, gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let tx = val(*x);
                    let (n, c) = (tx.shape()[0], tx.shape()[1]);
                    let s = tx.numel() / (n * c);
                    let r = norm::batch_norm_backward(
                        tx.data(),
                        (n, c, s),
                        mean,
                        inv_std,
                        val(*gamma).data(),
                        gd,
                        *batch_stats,
                    );
                    if needs(*x) {
                        emit(*x, r.input);
                    }
                    if needs(*gamma) {
                        emit(*gamma, r.gamma);
                    }
                    if needs(*beta) {
                        emit(*beta, r.beta);
                    }
                }
                Op::LayerNorm { x, gamma, beta, means, rstds } => {
                    let tx = val(*x);
                    let dim = *tx.shape().last().unwrap();
                    let r = norm::layer_norm_backward(tx.data(), dim, val(*gamma).data(), means, rstds, gd);
                    if needs(*x) {
                        emit(*x, r.input);
                    }
                    if needs(*gamma) {
                        emit(*gamma, r.gamma);
                    }
                    if needs(*beta) {
                        emit(*beta, r.beta);
                    }
                }
                Op::Relu(a) => {
                    let out = val(*a).data().iter().zip(gd).map(|(&x, &d)| if x > T::zero() { d } else { T::zero() });
                    emit(*a, out.collect());
                }
                Op::Gelu(a) => {
                    let out = val(*a).data().iter().zip(gd).map(|(&x, &d)| d * activation::gelu_grad(x));
                    emit(*a, out.collect());
                }
                Op::MaxPool { x, geom, argmax } => emit(*x, pool::max_pool_backward(geom, argmax, gd)),
                Op::AvgPool { x, geom } => emit(*x, pool::avg_pool_backward(geom, gd)),
                Op::Nearest { x, from, to } => {
                    let planes = val(*x).numel() / (from.0 * from.1);
                    emit(*x, resample::nearest_backward(gd, planes, *from, *to));
                }
                Op::GlobalAvgPool(a) => {
                    let ta = val(*a);
                    let s = ta.shape()[2] * ta.shape()[3];
                    let inv = T::one() / T::from_f64(s as f64);
                    emit(*a, gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, s)).collect());
                }
                Op::Softmax(a, axis) => {
                    emit(*a, activation::softmax_backward(node.value.data(), gd, axis_split(out_shape, *axis)));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = val(*logits).shape()[1];
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        out[r * classes + l] = out[r * classes + l] - scale;
                    }
                    emit(*logits, out);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad || !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes, visited })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, shape: Vec<usize>, data: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape, data)),
    }
}
