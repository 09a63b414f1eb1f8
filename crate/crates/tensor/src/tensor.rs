use std::io::{Read, Write};
use std::sync::Arc;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};

/// Dense row-major N-dimensional array.
///
/// Storage is shared copy-on-write, so cloning a tensor is cheap; mutation
/// through [`Tensor::data_mut`] copies only when the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(TensorError::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![v]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor { shape, data: Arc::new(vec![v; n]) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of size {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() {
            return Err(TensorError::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    /// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim("permute", format!("{perm:?} is not a permutation of rank {r}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        permute_into(&self.data, &out_shape, &src_strides, &mut out);
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Contiguous sub-range `[start, start + len)` of one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Writes the raw debugging format: `"TNSR"`, u32 version, u8 rank,
    /// rank x u64 dims, then little-endian f32 values.
    pub fn write_tnsr<W: Write>(&self, mut w: W) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(TensorError::Format(format!("rank {} does not fit the header", self.rank())));
        }
        w.write_all(TNSR_MAGIC)?;
        w.write_all(&TNSR_VERSION.to_le_bytes())?;
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.numel() * 4);
        for v in self.data.iter() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_tnsr<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != TNSR_MAGIC {
            return Err(TensorError::Format("bad magic, expected TNSR".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != TNSR_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(truncated)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut b8 = [0u8; 8];
        for _ in 0..rank[0] {
            r.read_exact(&mut b8).map_err(truncated)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n = numel_of(&shape);
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(truncated)?;
        let data =
            payload.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        Tensor::new(shape, data)
    }
}

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u32 = 1;

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated tensor file".into())
    } else {
        TensorError::Io(e)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` into `out` following `out_shape` with per-axis source strides.
pub(crate) fn permute_into<T: Copy>(src: &[T], out_shape: &[usize], src_strides: &[usize], out: &mut Vec<T>) {
    let r = out_shape.len();
    if r == 0 {
        out.push(src[0]);
        return;
    }
    let last = out_shape[r - 1];
    let last_stride = src_strides[r - 1];
    let outer: usize = out_shape[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(src_strides).map(|(i, s)| i * s).sum();
        if last_stride == 1 {
            out.extend_from_slice(&src[base..base + last]);
        } else {
            out.extend((0..last).map(|j| src[base + j * last_stride]));
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
