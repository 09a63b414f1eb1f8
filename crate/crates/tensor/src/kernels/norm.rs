use crate::element::Element;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Layer normalization over rows of length `dim`. Returns the output plus the
/// per-row mean and reciprocal standard deviation needed for the backward pass.
pub fn layer_norm_forward<T: Element>(x: &[T], dim: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(dim as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for row in x.chunks_exact(dim) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        out.extend(row.iter().zip(gamma.iter().zip(beta)).map(|(&v, (&g, &b))| (v - mean) * rstd * g + b));
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn layer_norm_backward<T: Element>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
) -> NormGrads<T> {
    let n = T::from_f64(dim as f64);
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let mut xhat = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    for (r, (row, grow)) in x.chunks_exact(dim).zip(dy.chunks_exact(dim)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..dim {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = grow[i] * gamma[i];
            sum_d = sum_d + dxhat[i];
            sum_dx = sum_dx + dxhat[i] * xhat[i];
            dgamma[i] = dgamma[i] + grow[i] * xhat[i];
            dbeta[i] = dbeta[i] + grow[i];
        }
        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
        dx.extend((0..dim).map(|i| rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx)));
    }
    NormGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// Per-channel statistics of an `N x C x S` activation (S = spatial size).
pub fn channel_stats<T: Element>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc + x[(b * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        *m = acc / count;
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc + x[(b * c + ch) * s..][..s].iter().map(|&u| (u - *m) * (u - *m)).sum::<T>();
        }
        *v = acc / count;
    }
    (mean, var)
}

/// `y = (x - mean) * inv_std * gamma + beta` per channel.
pub fn channel_affine<T: Element>(
    x: &[T],
    (n, c, s): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let scale = inv_std[ch] * gamma[ch];
            let shift = beta[ch] - mean[ch] * scale;
            out.extend(x[(b * c + ch) * s..][..s].iter().map(|&u| u * scale + shift));
        }
    }
    out
}

pub fn inv_std<T: Element>(var: &[T]) -> Vec<T> {
    let eps = T::from_f64(BATCH_NORM_EPS);
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Backward of batch normalization. With `batch_stats` the statistics were
/// computed from `x` itself (training); otherwise they were constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Element>(
    x: &[T],
    (n, c, s): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let count = T::from_f64((n * s) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, r) = (mean[ch], inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xhat = (x[i] - m) * r;
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                dx[i] = if batch_stats {
                    let xhat = (x[i] - m) * r;
                    g * r * (dy[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * r * dy[i]
                };
            }
        }
    }
    NormGrads { input: dx, gamma: dgamma, beta: dbeta }
}
