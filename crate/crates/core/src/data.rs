//! Labelled image sets: a seeded synthetic shapes generator and a PNG folder loader.

use std::fs;
use std::path::Path;

use conformer_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-channel normalization applied to every image in `[0, 1]`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Tight pixel bounding box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 3, S, S]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: String,
    /// Object boxes, when the generator knows them.
    pub boxes: Option<Vec<BBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    /// Gathers the given items into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let s = self.resolution();
        let per = 3 * s * s;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("item {i} out of range for {} items", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([indices.len(), 3, s, s], data)?, labels))
    }

    pub fn take(&self, count: usize) -> Result<Dataset> {
        let count = count.min(self.len());
        let idx: Vec<usize> = (0..count).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            class_names: self.class_names.clone(),
            split: self.split.clone(),
            boxes: self.boxes.as_ref().map(|b| b[..count].to_vec()),
        })
    }
}

fn normalize(v: f32) -> f32 {
    (v - PIXEL_MEAN) / PIXEL_STD
}

/// Signed distance (negative inside) of a shape of radius `r` centred at the origin.
fn shape_sdf(kind: usize, x: f32, y: f32, r: f32) -> f32 {
    let rect = |x: f32, y: f32, hx: f32, hy: f32| {
        let (dx, dy) = (x.abs() - hx, y.abs() - hy);
        let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
        outside + dx.max(dy).min(0.0)
    };
    match kind {
        0 => (x * x + y * y).sqrt() - r,
        1 => rect(x, y, 0.8 * r, 0.8 * r),
        2 => {
            // equilateral triangle with circumradius r, apex up
            let k = 3f32.sqrt();
            let side = r * k;
            let (mut px, mut py) = (x.abs() - side / 2.0, -y + r / 2.0);
            if px + k * py > 0.0 {
                let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                px = nx;
                py = ny;
            }
            px -= px.clamp(-side, 0.0);
            -(px * px + py * py).sqrt() * py.signum()
        }
        _ => {
            let arm = 0.3 * r;
            rect(x, y, r, arm).min(rect(x, y, arm, r))
        }
    }
}

/// Draws one image in `[0, 1]` and returns it with its box.
fn draw_shape(rng: &mut ChaCha8Rng, kind: usize, size: usize) -> (Vec<f32>, BBox) {
    let scale = size as f32 / 64.0;
    let radius = rng.gen_range(10.0..18.0) * scale;
    let half = (size as f32 - 1.0) / 2.0;
    // keep the shape inside the inscribed disc so any rotation keeps it in frame
    let reach = (half - 1.0 - radius).max(0.0);
    let (cx, cy) = loop {
        let (dx, dy) = (rng.gen_range(-reach..=reach), rng.gen_range(-reach..=reach));
        if dx * dx + dy * dy <= reach * reach {
            break (half + dx, half + dy);
        }
    };
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let color: [f32; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    for v in img.iter_mut() {
        *v = rng.gen_range(0.0..0.4);
    }
    let mut bbox = BBox { x0: size, y0: size, x1: 0, y1: 0 };
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let cover = (0.5 - shape_sdf(kind, u, v, radius)).clamp(0.0, 1.0);
            if cover <= 0.0 {
                continue;
            }
            bbox.x0 = bbox.x0.min(x);
            bbox.y0 = bbox.y0.min(y);
            bbox.x1 = bbox.x1.max(x);
            bbox.y1 = bbox.y1.max(y);
            for (c, &col) in color.iter().enumerate() {
                let p = &mut img[c * plane + y * size + x];
                *p = *p * (1.0 - cover) + col * cover;
            }
        }
    }
    (img, bbox)
}

/// Splits drawn with one seed get independent streams.
fn split_rng(seed: u64, split: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream =
        split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    rng.set_stream(stream);
    rng
}

/// Anti-aliased shapes on noise, randomly placed, scaled and rotated.
/// Classes are balanced round-robin; the same seed always yields the same set.
pub fn synth_shapes(classes: usize, size: usize, count: usize, seed: u64, split: &str) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_NAMES.len() {
        return Err(Error::Argument(format!("shapes generator supports 1 to 4 classes, got {classes}")));
    }
    if size < 32 {
        return Err(Error::Argument(format!("shapes need at least 32 pixels, got {size}")));
    }
    let mut rng = split_rng(seed, split);
    let mut data = Vec::with_capacity(count * 3 * size * size);
    let mut labels = Vec::with_capacity(count);
    let mut boxes = Vec::with_capacity(count);
    for i in 0..count {
        let kind = i % classes;
        let (img, bbox) = draw_shape(&mut rng, kind, size);
        data.extend(img.into_iter().map(normalize));
        labels.push(kind);
        boxes.push(bbox);
    }
    Ok(Dataset {
        images: Tensor::new([count, 3, size, size], data)?,
        labels,
        class_names: SHAPE_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
        split: split.to_string(),
        boxes: Some(boxes),
    })
}

/// Decodes a PNG into planar RGB in `[0, 1]`, returning `(side, pixels)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let plane = w * h;
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let px = &buf[p * channels..(p + 1) * channels];
        for c in 0..3 {
            let v = if channels >= 3 { px[c] } else { px[0] };
            out[c * plane + p] = v as f32 / 255.0;
        }
    }
    Ok((w, h, out))
}

/// One subdirectory per class, each holding PNG images; both levels sorted by name.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<_> =
        fs::read_dir(root)?.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).map(|e| e.path()).collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    let mut side: Option<usize> = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} contains no PNG images", dir.display())));
        }
        for f in files {
            let (w, h, px) = read_png(&f)?;
            if w != h {
                return Err(Error::Data(format!("{} is {w}x{h}; images must be square", f.display())));
            }
            match side {
                Some(s) if s != w => {
                    return Err(Error::Data(format!("{} is {w}x{w} but earlier images are {s}x{s}", f.display())))
                }
                _ => side = Some(w),
            }
            data.extend(px.into_iter().map(normalize));
            labels.push(label);
        }
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    let s = side.unwrap_or(0);
    let split = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset { images: Tensor::new([labels.len(), 3, s, s], data)?, labels, class_names, split, boxes: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = synth_shapes(4, 64, 16, 7, "train").unwrap();
        let b = synth_shapes(4, 64, 16, 7, "train").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, synth_shapes(4, 64, 16, 8, "train").unwrap().images);
    }

    #[test]
    fn labels_balanced_and_boxes_in_frame() {
        let d = synth_shapes(4, 64, 40, 1, "train").unwrap();
        for c in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        for b in d.boxes.unwrap() {
            assert!(b.x0 <= b.x1 && b.y0 <= b.y1 && b.x1 < 64 && b.y1 < 64);
            let w = b.x1 - b.x0 + 1;
            assert!((10..=40).contains(&w), "box width {w}");
        }
    }

    #[test]
    fn sdf_sign() {
        for kind in 0..4 {
            assert!(shape_sdf(kind, 0.0, 0.0, 10.0) < 0.0, "kind {kind}");
            assert!(shape_sdf(kind, 30.0, 30.0, 10.0) > 0.0, "kind {kind}");
        }
        // cross arms reach the radius along the axes, corners are empty
        assert!(shape_sdf(3, 9.0, 0.0, 10.0) < 0.0);
        assert!(shape_sdf(3, 7.0, 7.0, 10.0) > 0.0);
        // triangle apex up: the top vertex is at y = -r in image coordinates
        assert!(shape_sdf(2, 0.0, -9.0, 10.0) < 0.0);
        assert!(shape_sdf(2, 0.0, 9.0, 10.0) > 0.0);
    }

    #[test]
    fn pixel_range() {
        let d = synth_shapes(4, 64, 8, 3, "x").unwrap();
        let lo = normalize(0.0);
        let hi = normalize(1.0);
        assert!(d.images.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn bad_class_count() {
        assert!(synth_shapes(5, 64, 8, 0, "x").is_err());
    }
}
