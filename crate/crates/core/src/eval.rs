//! Accuracy under rotation and resolution changes.

use conformer_tensor::Tensor;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Conformer;
use crate::trainer::accuracy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    None,
    /// Counter-clockwise rotation in degrees about the image centre.
    Rotate(f64),
    /// Bilinear resize to a square side.
    Resize(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub transform: String,
    pub items: usize,
    pub cnn_acc: Option<f64>,
    pub trans_acc: Option<f64>,
    pub summed_acc: f64,
}

/// Exact sine and cosine for multiples of 90°, so those rotations only permute pixels.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * at(y0 + dy, x0 + dx);
            }
        }
    }
    v as f32
}

/// Rotates every channel of `[N, C, H, W]` images; uncovered pixels become 0.
pub fn rotate(images: &Tensor<f32>, degrees: f64) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Argument(format!("expected [N, C, H, W] images, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let (sin, cos) = sin_cos_deg(degrees);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; images.numel()];
    for (src, dst) in images.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                // inverse map: output pixel → source location (y axis points down)
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                dst[y * w + x] = bilinear(src, h, w, sy, sx);
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn resize(images: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Argument(format!("expected [N, C, H, W] images, got {s:?}")));
    }
    if size == 0 {
        return Err(Error::Argument("resize target must be positive".into()));
    }
    let (h, w) = (s[2], s[3]);
    if h == size && w == size {
        return Ok(images.clone());
    }
    let src_coord = |o: usize, n_in: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, n_in as f64 - 1.0);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(s[0] * s[1] * size * size);
    for plane in images.data().chunks(h * w) {
        for y in 0..size {
            let (y0, y1, fy) = src_coord(y, h);
            for x in 0..size {
                let (x0, x1, fx) = src_coord(x, w);
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Ok(Tensor::new([s[0], s[1], size, size], out)?)
}

pub fn apply(images: &Tensor<f32>, transform: Transform) -> Result<Tensor<f32>> {
    match transform {
        Transform::None => Ok(images.clone()),
        Transform::Rotate(d) => rotate(images, d),
        Transform::Resize(s) => resize(images, s),
    }
}

fn describe(t: Transform) -> String {
    match t {
        Transform::None => "none".into(),
        Transform::Rotate(d) => format!("rotate {d}"),
        Transform::Resize(s) => format!("resize {s}"),
    }
}

/// Eval-mode accuracy of each head and of the summed logits.
pub fn evaluate(model: &Conformer, data: &Dataset, transform: Transform) -> Result<EvalReport> {
    if let Transform::Resize(s) = transform {
        model.config.check_input_size(s)?;
    }
    let images = apply(&data.images, transform)?;
    let logits = model.logits(&images)?;
    let summed = logits.predict()?;
    Ok(EvalReport {
        transform: describe(transform),
        items: data.len(),
        cnn_acc: logits.cnn.as_ref().map(|c| accuracy(c, &data.labels)),
        trans_acc: logits.trans.as_ref().map(|t| accuracy(t, &data.labels)),
        summed_acc: accuracy(&summed, &data.labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, s: usize) -> Tensor<f32> {
        Tensor::from_fn([n, 2, s, s], |i| (i % 97) as f32 * 0.1 - 3.0)
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = ramp(2, 9);
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
        assert_eq!(rotate(&x, 360.0).unwrap(), x);
    }

    #[test]
    fn half_turn_reverses_indices() {
        let x = ramp(1, 8);
        let r = rotate(&x, 180.0).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for xx in 0..8 {
                    assert_eq!(r.at(&[0, c, y, xx]), x.at(&[0, c, 7 - y, 7 - xx]));
                }
            }
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // a bright pixel on the right edge moves to the top edge
        let mut x = Tensor::zeros([1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 4] = 1.0;
        let r = rotate(&x, 90.0).unwrap();
        assert_eq!(r.at(&[0, 0, 0, 2]), 1.0);
        assert_eq!(r.sum(), 1.0);
    }

    #[test]
    fn oblique_rotation_fills_corners_with_zero() {
        let x = Tensor::full([1, 1, 16, 16], 1.0f32);
        let r = rotate(&x, 45.0).unwrap();
        assert_eq!(r.at(&[0, 0, 0, 0]), 0.0);
        assert!((r.at(&[0, 0, 8, 8]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = ramp(1, 8);
        assert_eq!(resize(&x, 8).unwrap(), x);
        let c = Tensor::full([1, 3, 8, 8], 0.7f32);
        let up = resize(&c, 12).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
