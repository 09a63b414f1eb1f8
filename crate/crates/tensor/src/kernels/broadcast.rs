use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::strides;

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::dim("broadcast", format!("shapes {a:?} and {b:?} are incompatible")));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero where the dimension is broadcast).
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

/// Source offsets of every output element for an operand broadcast to `out`.
fn source_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let vs = view_strides(shape, out);
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut offs = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += vs[d];
            if idx[d] < out[d] {
                break;
            }
            off -= vs[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

/// Elementwise `f(a, b)` with broadcasting; `out` must be `broadcast_shape(a, b)`.
pub fn zip_with<T: Element>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if sa == sb {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out.iter().product();
    if sa == out && !b.is_empty() && sb.len() <= out.len() && out.ends_with(sb) {
        return (0..n).map(|i| f(a[i], b[i % b.len()])).collect();
    }
    let oa = source_offsets(sa, out);
    let ob = source_offsets(sb, out);
    oa.iter().zip(&ob).map(|(&i, &j)| f(a[i], b[j])).collect()
}

/// Sums `g` (shaped `out`) down to `shape`, the inverse of broadcasting.
pub fn reduce_to<T: Element>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let len: usize = shape.iter().product();
    let mut acc = vec![T::zero(); len];
    if out.ends_with(shape) {
        for (i, &v) in g.iter().enumerate() {
            acc[i % len] = acc[i % len] + v;
        }
        return acc;
    }
    for (&o, &v) in source_offsets(shape, out).iter().zip(g) {
        acc[o] = acc[o] + v;
    }
    acc
}

/// Materializes `x` (shaped `shape`) broadcast to `out`.
pub fn expand<T: Element>(x: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    if shape == out {
        return x.to_vec();
    }
    source_offsets(shape, out).iter().map(|&o| x[o]).collect()
}
