use crate::element::Element;

/// Source index for nearest-neighbour resampling: `floor(i * src / dst)`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (i * src) / dst
}

pub fn nearest_forward<T: Element>(x: &[T], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let cols: Vec<usize> = (0..ow).map(|j| nearest_source(j, w, ow)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let row = &plane[nearest_source(i, h, oh) * w..][..w];
            out.extend(cols.iter().map(|&j| row[j]));
        }
    }
    out
}

pub fn nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            let si = nearest_source(i, h, oh);
            for j in 0..ow {
                let k = p * h * w + si * w + nearest_source(j, w, ow);
                dx[k] = dx[k] + dy[(p * oh + i) * ow + j];
            }
        }
    }
    dx
}
