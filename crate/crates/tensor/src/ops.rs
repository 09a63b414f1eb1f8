//! Eager, tape-free entry points to the differentiable operations.
//!
//! Each call records onto a throwaway [`Tape`] of constants, so forward results
//! are bit-identical to the differentiable versions.

use crate::element::Element;
use crate::error::Result;
use crate::kernels::pool::PoolKind;
use crate::tape::{BatchNormMode, BatchStats, Tape};
use crate::tensor::Tensor;

fn run<T: Element>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&Tape<T>, &[crate::Var]) -> Result<crate::Var>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&tape, &vars)?;
    Ok(tape.value(out))
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    match b {
        Some(b) => run(&[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
        None => run(&[x, w], |t, v| t.conv2d(v[0], v[1], None, stride, padding)),
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[a, b], |t, v| t.matmul(v[0], v[1]))
}

pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match b {
        Some(b) => run(&[x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        None => run(&[x, w], |t, v| t.linear(v[0], v[1], None)),
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[a, b], |t, v| t.add(v[0], v[1]))
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.softmax(v[0], axis))
}

pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[x, gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2]))
}

pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BatchNormMode<'_, T>,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    let tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let (out, stats) = tape.batch_norm(vx, vg, vb, mode)?;
    Ok((tape.value(out), stats))
}

pub fn pool2d<T: Element>(
    x: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.pool2d(v[0], kind, kernel, stride, padding))
}

pub fn resample_nearest<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.resample_nearest(v[0], out_h, out_w))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.relu(v[0]))
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.gelu(v[0]))
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.global_avg_pool(v[0]))
}

pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(run(&[logits], |t, v| t.cross_entropy(v[0], labels))?.item())
}
