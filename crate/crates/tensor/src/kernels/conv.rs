//! 2-D cross-correlation via im2col + GEMM.
//!
//! Images in a batch are processed independently (and in parallel when a
//! rayon pool with more than one thread is installed). Reductions across the
//! batch, i.e. the weight and bias gradients, are always summed in image order
//! so results do not depend on the thread count.

use rayon::prelude::*;

use crate::element::{gemm, Element, MatRef};
use crate::error::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::dim(
                "conv2d",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        }
        if input[1] != weight[1] {
            return Err(TensorError::dim(
                "conv2d",
                format!("input has {} channels but weight expects {}", input[1], weight[1]),
            ));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be at least 1"));
        }
        let (kh, kw) = (weight[2], weight[3]);
        if input[2] + 2 * padding < kh || input[3] + 2 * padding < kw {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", input[2], input[3]),
            ));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (input[2] + 2 * padding - kh) / stride + 1,
            out_w: (input[3] + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose input column for kernel offset `kj` lies
/// inside the image.
fn valid_range(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let wo = g.out_w;
    // ix = ox * stride + kj - padding must satisfy 0 <= ix < in_w
    let lo = if kj >= g.padding { 0 } else { (g.padding - kj).div_ceil(g.stride) }.min(wo);
    let hi = if g.in_w + g.padding > kj { (g.in_w + g.padding - kj - 1) / g.stride + 1 } else { 0 };
    (lo, hi.clamp(lo, wo))
}

fn im2col<T: Element>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h, g.out_w);
    let spatial = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_range(g, kj);
                let first = (lo * g.stride + kj).saturating_sub(g.padding);
                for (oy, line) in dst.chunks_exact_mut(wo).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.in_w + first..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[..hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src.iter().step_by(g.stride)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let (ho, wo) = (g.out_h, g.out_w);
    let spatial = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_range(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for (oy, line) in src.chunks_exact(wo).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w + first..(iy as usize + 1) * g.in_w];
                    for (d, &v) in dst.iter_mut().step_by(g.stride).zip(&line[lo..hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Scratch column buffer, reused across the images handled by one worker.
fn scratch<T: Element>(g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * g.out_spatial()]
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let out_img = g.out_channels * g.out_spatial();
    let mut out = vec![T::zero(); g.batch * out_img];
    let wmat = MatRef::new(w, g.out_channels, g.patch_len());
    out.par_chunks_mut(out_img).enumerate().for_each_init(
        || scratch::<T>(g),
        |cols, (n, o)| {
            let img = &x[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                gemm(T::one(), wmat, MatRef::new(img, g.in_channels, g.out_spatial()), T::zero(), o);
            } else {
                im2col(g, img, cols);
                gemm(T::one(), wmat, MatRef::new(cols, g.patch_len(), g.out_spatial()), T::zero(), o);
            }
            if let Some(b) = bias {
                for (co, chunk) in o.chunks_mut(g.out_spatial()).enumerate() {
                    for v in chunk {
                        *v = *v + b[co];
                    }
                }
            }
        },
    );
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let out_img = g.out_channels * g.out_spatial();
    let wlen = g.out_channels * g.patch_len();
    let wmat_t = MatRef::transposed(w, g.out_channels, g.patch_len());

    let mut dx = need_input.then(|| vec![T::zero(); g.batch * g.in_image()]);
    let per_image: Vec<Option<Vec<T>>> = {
        let work = |cols: &mut Vec<T>, n: usize, dx_img: Option<&mut [T]>| -> Option<Vec<T>> {
            let gy = &dy[n * out_img..(n + 1) * out_img];
            let gmat = MatRef::new(gy, g.out_channels, g.out_spatial());
            if let Some(dx_img) = dx_img {
                if g.is_pointwise() {
                    gemm(T::one(), wmat_t, gmat, T::zero(), dx_img);
                } else {
                    gemm(T::one(), wmat_t, gmat, T::zero(), cols);
                    col2im(g, cols, dx_img);
                }
            }
            need_weight.then(|| {
                let img = &x[n * g.in_image()..(n + 1) * g.in_image()];
                let cols: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, cols);
                    cols
                };
                let mut part = vec![T::zero(); wlen];
                if g.patch_len() >= g.out_channels {
                    // dWᵀ = cols · dYᵀ keeps the larger operand contiguous
                    let mut part_t = vec![T::zero(); wlen];
                    let gy_t = MatRef::transposed(gy, g.out_channels, g.out_spatial());
                    gemm(T::one(), MatRef::new(cols, g.patch_len(), g.out_spatial()), gy_t, T::zero(), &mut part_t);
                    for (p, row) in part_t.chunks_exact(g.out_channels).enumerate() {
                        for (co, &v) in row.iter().enumerate() {
                            part[co * g.patch_len() + p] = v;
                        }
                    }
                } else {
                    let cols_t = MatRef::transposed(cols, g.patch_len(), g.out_spatial());
                    gemm(T::one(), gmat, cols_t, T::zero(), &mut part);
                }
                part
            })
        };
        match dx.as_mut() {
            Some(dx) => dx
                .par_chunks_mut(g.in_image())
                .enumerate()
                .map_init(|| scratch::<T>(g), |c, (n, d)| work(c, n, Some(d)))
                .collect(),
            None => (0..g.batch).into_par_iter().map_init(|| scratch::<T>(g), |c, n| work(c, n, None)).collect(),
        }
    };

    let weight = need_weight.then(|| {
        let mut acc = vec![T::zero(); wlen];
        for part in per_image.iter().flatten() {
            for (a, &p) in acc.iter_mut().zip(part) {
                *a = *a + p;
            }
        }
        acc
    });

    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (co, slot) in db.iter_mut().enumerate() {
                let base = n * out_img + co * g.out_spatial();
                let s: T = dy[base..base + g.out_spatial()].iter().copied().sum();
                *slot = *slot + s;
            }
        }
        db
    });

    ConvGrads { input: dx, weight, bias }
}
