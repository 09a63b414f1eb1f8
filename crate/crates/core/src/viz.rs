//! Heatmaps: class activation maps, attention rollout and raw feature maps,
//! with deterministic PNG and TNSR writers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use conformer_tensor::{Tape, Tensor};

use crate::data::{PIXEL_MEAN, PIXEL_STD};
use crate::error::{Error, Result};
use crate::model::{Conformer, ForwardOptions, ForwardPass, Taps};

/// A map in `[0, 1]` plus where it came from (`cam`, `rollout`, `featmap:c5`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub tag: String,
}

impl Heatmap {
    /// Min-max normalizes `raw`; a constant map becomes all 0.5.
    pub fn normalized(raw: &[f32], height: usize, width: usize, tag: impl Into<String>) -> Self {
        let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let values = if hi > lo { raw.iter().map(|&v| (v - lo) / (hi - lo)).collect() } else { vec![0.5; raw.len()] };
        Heatmap { height, width, values, tag: tag.into() }
    }

    /// Nearest-neighbour upsampling to `size × size`.
    pub fn upsampled(&self, size: usize) -> Heatmap {
        let mut values = Vec::with_capacity(size * size);
        for y in 0..size {
            let sy = y * self.height / size;
            for x in 0..size {
                values.push(self.values[sy * self.width + x * self.width / size]);
            }
        }
        Heatmap { height: size, width: size, values, tag: self.tag.clone() }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

fn single_image(model: &Conformer, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    let image = match s.len() {
        3 => image.reshape([1, s[0], s[1], s[2]])?,
        4 if s[0] == 1 => image.clone(),
        _ => return Err(Error::Argument(format!("expected one [3, S, S] image, got {s:?}"))),
    };
    model.config.check_input_size(image.shape()[2])?;
    Ok(image)
}

/// Eval-mode forward with every tap recorded.
pub fn tapped_forward(model: &Conformer, tape: &Tape<f32>, image: &Tensor<f32>) -> Result<ForwardPass<f32>> {
    let image = single_image(model, image)?;
    let vars = model.bind(tape, false);
    let img = tape.constant(image);
    model.forward_on(tape, &vars, img, ForwardOptions { train: false, taps: true })
}

/// `ReLU(Σ_c w_c · F_c)` over `[C, h, w]` features, before normalization.
pub fn cam_raw(features: &Tensor<f32>, weights: &[f32]) -> Result<Vec<f32>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::Argument(format!("{} weights for features {s:?}", weights.len())));
    }
    let plane = s[1] * s[2];
    let mut out = vec![0.0f32; plane];
    for (ch, &w) in features.data().chunks(plane).zip(weights) {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

/// Class activation map of the final CNN stage, at input resolution.
pub fn cam(model: &Conformer, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    if !model.config.has_cnn() {
        return Err(Error::Argument("CAM needs a CNN classifier".into()));
    }
    let classes = model.config.num_classes;
    if class >= classes {
        return Err(Error::Argument(format!("class {class} out of range for {classes} classes")));
    }
    let tape = Tape::new();
    let pass = tapped_forward(model, &tape, image)?;
    let taps = pass.taps.as_ref().expect("taps requested");
    let last =
        taps.blocks.last().and_then(|b| b.feature).ok_or_else(|| Error::Contract("no CNN feature tap".into()))?;
    let feat = tape.value(last);
    let fs = feat.shape().to_vec();
    let feat = feat.reshape([fs[1], fs[2], fs[3]])?;
    let w = &model.params["head.cnn.weight"];
    let row = &w.data()[class * fs[1]..(class + 1) * fs[1]];
    let raw = cam_raw(&feat, row)?;
    Ok(Heatmap::normalized(&raw, fs[2], fs[3], "cam").upsampled(pass.plan.input_size))
}

/// Head-averaged, identity-added, row-normalized attention of each block,
/// followed by the running products `A_i · … · A_1`.
pub fn rollout_matrices(attention: &[Tensor<f32>]) -> Result<Vec<Tensor<f64>>> {
    let mut out: Vec<Tensor<f64>> = Vec::with_capacity(attention.len());
    for a in attention {
        let s = a.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Argument(format!("expected [heads, T, T] attention, got {s:?}")));
        }
        let (heads, t) = (s[0], s[1]);
        let mut m = vec![0.0f64; t * t];
        for h in a.data().chunks(t * t) {
            for (o, &v) in m.iter_mut().zip(h) {
                *o += v as f64 / heads as f64;
            }
        }
        for i in 0..t {
            m[i * t + i] += 1.0;
            let row = &mut m[i * t..(i + 1) * t];
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let m = Tensor::new([t, t], m)?;
        let joint = match out.last() {
            Some(prev) => conformer_tensor::ops::matmul(&m, prev)?,
            None => m,
        };
        out.push(joint);
    }
    Ok(out)
}

/// Rollout heatmap from a pass recorded with taps.
pub fn rollout_from_pass(tape: &Tape<f32>, pass: &ForwardPass<f32>) -> Result<Heatmap> {
    let taps = pass.taps.as_ref().ok_or_else(|| {
        Error::Contract("attention rollout needs taps; re-run the forward pass with taps enabled".into())
    })?;
    let mut attn = Vec::new();
    for b in &taps.blocks {
        let a = b.attention.ok_or_else(|| Error::Argument("attention rollout needs a transformer branch".into()))?;
        let v = tape.value(a);
        let s = v.shape().to_vec();
        attn.push(v.narrow(0, 0, 1)?.reshape([s[1], s[2], s[3]])?);
    }
    let joint = rollout_matrices(&attn)?;
    let last = joint.last().ok_or_else(|| Error::Contract("model has no blocks".into()))?;
    let t = last.shape()[0];
    let raw: Vec<f32> = last.data()[1..t].iter().map(|&v| v as f32).collect();
    let g = pass.plan.grid;
    Ok(Heatmap::normalized(&raw, g, g, "rollout").upsampled(pass.plan.input_size))
}

pub fn attention_rollout(model: &Conformer, image: &Tensor<f32>) -> Result<Heatmap> {
    if !model.config.has_transformer() {
        return Err(Error::Argument("attention rollout needs a transformer branch".into()));
    }
    let tape = Tape::new();
    let pass = tapped_forward(model, &tape, image)?;
    rollout_from_pass(&tape, &pass)
}

/// Mean over channels of a `[1, C, h, w]` map.
pub fn channel_mean(x: &Tensor<f32>) -> (usize, usize, Vec<f32>) {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut out = vec![0.0f32; plane];
    for ch in x.data().chunks(plane) {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= s[1] as f32);
    (s[2], s[3], out)
}

/// L2 norm of every patch token of `[1, 1 + K, E]`, laid out on the token grid.
pub fn token_norms(x: &Tensor<f32>) -> Result<(usize, usize, Vec<f32>)> {
    let s = x.shape();
    let k = s[1] - 1;
    let g = (k as f64).sqrt().round() as usize;
    if g * g != k {
        return Err(Error::Contract(format!("{k} patch tokens do not form a square grid")));
    }
    let e = s[2];
    let out = x.data()[e..].chunks(e).map(|t| t.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
    Ok((g, g, out))
}

/// A selected intermediate value and its rendered map.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub name: String,
    pub raw: Tensor<f32>,
    pub heatmap: Heatmap,
}

fn matching(taps: &Taps, selector: &str) -> Result<Vec<(String, conformer_tensor::Var, bool)>> {
    let mut out = Vec::new();
    let last_of_stage = |stage: &str| taps.blocks.iter().rev().find(|b| b.name.starts_with(&format!("{stage}.")));
    let missing = |what: &str| Error::Argument(format!("selector `{selector}`: {what} is not available"));
    match selector {
        "stem" => out.push(("stem".to_string(), taps.stem.ok_or_else(|| missing("stem"))?, false)),
        "c2" | "c3" | "c4" | "c5" => {
            let b = last_of_stage(selector).ok_or_else(|| missing("stage"))?;
            out.push((selector.to_string(), b.feature.ok_or_else(|| missing("CNN branch"))?, false));
        }
        "trans.final" => {
            let b = taps.blocks.last().ok_or_else(|| missing("block"))?;
            out.push((selector.to_string(), b.tokens.ok_or_else(|| missing("transformer branch"))?, true));
        }
        "all" => {
            for b in &taps.blocks {
                if let Some(f) = b.feature {
                    out.push((b.name.clone(), f, false));
                }
                if let Some(t) = b.tokens {
                    out.push((format!("trans.{}", b.name), t, true));
                }
            }
        }
        s => {
            let (name, tokens) = match s.strip_prefix("trans.") {
                Some(rest) => (rest, true),
                None => (s, false),
            };
            let b = taps.blocks.iter().find(|b| b.name == name).ok_or_else(|| {
                Error::Argument(format!(
                    "unknown selector `{selector}`; use stem, c2..c5, trans.final, all, or a block name like c3.b05"
                ))
            })?;
            let v = if tokens { b.tokens } else { b.feature };
            out.push((s.to_string(), v.ok_or_else(|| missing("branch"))?, tokens));
        }
    }
    Ok(out)
}

/// Channel-mean maps of CNN taps and token-norm maps of transformer taps.
pub fn export_feature_maps(model: &Conformer, image: &Tensor<f32>, selector: &str) -> Result<Vec<FeatureMap>> {
    let tape = Tape::new();
    let pass = tapped_forward(model, &tape, image)?;
    let taps = pass.taps.as_ref().expect("taps requested");
    let size = pass.plan.input_size;
    matching(taps, selector)?
        .into_iter()
        .map(|(name, var, tokens)| {
            let raw = tape.value(var);
            let (h, w, map) = if tokens { token_norms(&raw)? } else { channel_mean(&raw) };
            let heatmap = Heatmap::normalized(&map, h, w, format!("featmap:{name}")).upsampled(size);
            Ok(FeatureMap { name, raw, heatmap })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Gray,
    Viridis,
}

/// Evenly spaced viridis samples, interpolated linearly.
const VIRIDIS: [[u8; 3]; 9] = [
    [0x44, 0x01, 0x54],
    [0x47, 0x2c, 0x7a],
    [0x3b, 0x51, 0x8b],
    [0x2c, 0x71, 0x8e],
    [0x21, 0x90, 0x8d],
    [0x27, 0xad, 0x81],
    [0x5c, 0xc8, 0x63],
    [0xaa, 0xdc, 0x32],
    [0xfd, 0xe7, 0x25],
];

fn heat_rgb(v: f32, cmap: Colormap) -> [u8; 3] {
    match cmap {
        Colormap::Gray => {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        }
        Colormap::Viridis => {
            let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
            let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
            let f = t - i as f32;
            let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
            std::array::from_fn(|c| (a[c] as f32 + f * (b[c] as f32 - a[c] as f32)).round() as u8)
        }
    }
}

/// Encodes a heatmap as an 8-bit PNG. With `overlay` (a normalized `[3, S, S]`
/// image of the heatmap's size) the map is blended over it at 40% opacity.
pub fn encode_png(map: &Heatmap, cmap: Colormap, overlay: Option<&Tensor<f32>>) -> Result<Vec<u8>> {
    let (h, w) = (map.height, map.width);
    let plane = h * w;
    if let Some(img) = overlay {
        if img.shape() != [3, h, w] {
            return Err(Error::Argument(format!("overlay image {:?} does not match a {h}x{w} map", img.shape())));
        }
    }
    let (color, pixels) = match (cmap, overlay) {
        (Colormap::Gray, None) => {
            (png::ColorType::Grayscale, map.values.iter().map(|&v| heat_rgb(v, cmap)[0]).collect())
        }
        _ => {
            let mut px = Vec::with_capacity(plane * 3);
            for (i, &v) in map.values.iter().enumerate() {
                let heat = heat_rgb(v, cmap);
                for (c, &h) in heat.iter().enumerate() {
                    let value = match overlay {
                        Some(img) => {
                            let base = (img.data()[c * plane + i] * PIXEL_STD + PIXEL_MEAN).clamp(0.0, 1.0) * 255.0;
                            0.6 * base + 0.4 * h as f32
                        }
                        None => h as f32,
                    };
                    px.push(value.round().clamp(0.0, 255.0) as u8);
                }
            }
            (png::ColorType::Rgb, px)
        }
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, map: &Heatmap, cmap: Colormap, overlay: Option<&Tensor<f32>>) -> Result<()> {
    std::fs::write(path, encode_png(map, cmap, overlay)?)?;
    Ok(())
}

pub fn write_tnsr(path: &Path, t: &Tensor<f32>) -> Result<()> {
    t.write_tnsr(BufWriter::new(File::create(path)?))?;
    Ok(())
}
