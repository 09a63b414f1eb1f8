use crate::element::Element;
use crate::error::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::dim("pool2d", format!("expected rank-4 input, got {input:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::contract("pool2d", "kernel and stride must be at least 1"));
        }
        if 2 * padding > kernel {
            return Err(TensorError::contract("pool2d", "padding may be at most half the kernel"));
        }
        if input[2] + 2 * padding < kernel || input[3] + 2 * padding < kernel {
            return Err(TensorError::dim(
                "pool2d",
                format!("kernel {kernel} larger than padded input {}x{}", input[2], input[3]),
            ));
        }
        Ok(PoolGeometry {
            batch: input[0],
            channels: input[1],
            in_h: input[2],
            in_w: input[3],
            kernel,
            stride,
            padding,
            out_h: (input[2] + 2 * padding - kernel) / stride + 1,
            out_w: (input[3] + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }

    /// Clipped input window `(y0, y1, x0, x1)` for an output position.
    fn window(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let clip = |o: usize, extent: usize| {
            let start = (o * self.stride) as isize - self.padding as isize;
            let end = start + self.kernel as isize;
            (start.max(0) as usize, (end.min(extent as isize)) as usize)
        };
        let (y0, y1) = clip(oy, self.in_h);
        let (x0, x1) = clip(ox, self.in_w);
        (y0, y1, x0, x1)
    }
}

/// Max pooling; also returns the flat input index chosen for each output
/// (first maximum in scan order).
pub fn max_pool_forward<T: Element>(g: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let mut best = T::neg_infinity();
                let mut best_ix = base + y0 * g.in_w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = base + iy * g.in_w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_ix = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_ix);
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Element>(g: &PoolGeometry, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.batch * g.channels * g.in_h * g.in_w];
    for (&i, &d) in argmax.iter().zip(dy) {
        dx[i] = dx[i] + d;
    }
    dx
}

/// Average pooling over the valid (unpadded) part of each window.
pub fn avg_pool_forward<T: Element>(g: &PoolGeometry, x: &[T]) -> Vec<T> {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc = acc + x[base + iy * g.in_w + ix];
                    }
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(g: &PoolGeometry, dy: &[T]) -> Vec<T> {
    let planes = g.batch * g.channels;
    let mut dx = vec![T::zero(); planes * g.in_h * g.in_w];
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let share = dy[(p * g.out_h + oy) * g.out_w + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = base + iy * g.in_w + ix;
                        dx[i] = dx[i] + share;
                    }
                }
            }
        }
    }
    dx
}
