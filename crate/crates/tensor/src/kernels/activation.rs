use crate::element::Element;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle axis of an `outer x len x inner` layout.
pub fn softmax_forward<T: Element>(x: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                s = s + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / s;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Element>(y: &[T], dy: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let dot: T = (0..len).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

/// Mean negative log-likelihood over rows. Returns the loss and the row-wise
/// probabilities.
pub fn cross_entropy_forward<T: Element>(logits: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let probs = softmax_forward(logits, (labels.len(), classes, 1));
    let mut loss = T::zero();
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss = loss + lse - row[l];
    }
    (loss / T::from_f64(labels.len() as f64), probs)
}
