//! Feature Coupling Unit: moves features between the CNN pixel grid and the
//! transformer token grid in both directions.
//!
//! Resampling direction is decided by comparing the feature-map side `H`
//! with the token grid side `G`: pooling (or a strided convolution) when
//! `H > G`, nearest upsampling when `H < G`.

use conformer_tensor::{ops, Element, PoolKind, Tape, Tensor, Var};

use crate::blocks::{grid_to_tokens, tokens_to_grid, Ctx};
use crate::config::Sampling;
use crate::error::{Error, Result};

/// Attention weights of the down-sampling step, kept for the up step.
#[derive(Debug, Clone, Copy)]
pub struct SamplerCache {
    /// `[N, K, 1, n]` softmax weights.
    pub weights: Var,
    /// Side of the pixel grid the weights were computed on.
    pub side: usize,
}

/// Static geometry of one coupling.
#[derive(Debug, Clone, Copy)]
pub struct FcuShape {
    /// Feature-map side at the tap and injection points.
    pub hw: usize,
    /// Token grid side.
    pub grid: usize,
    pub sampling: Sampling,
    pub activation: bool,
}

impl FcuShape {
    fn check(&self) -> Result<()> {
        if !self.hw.is_multiple_of(self.grid) && !self.grid.is_multiple_of(self.hw) {
            return Err(Error::config(
                "input_size",
                format!("{0}x{0} map is neither a multiple nor a divisor of the {1}x{1} grid", self.hw, self.grid),
            ));
        }
        Ok(())
    }
}

/// Pixel-to-token path. `mid` is `[N, Cmid, H, H]`, `patches` are the patch
/// tokens `[N, K, E]` (class token excluded). Returns the coupling term to add
/// to the patch tokens and, for attention sampling, the weight cache.
pub fn down<T: Element>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    shape: FcuShape,
    mid: Var,
    patches: Var,
) -> Result<(Var, Option<SamplerCache>)> {
    shape.check()?;
    let t = ctx.tape;
    let (h, g) = (shape.hw, shape.grid);
    let x = ctx.conv(mid, &format!("{prefix}.down.conv"), 1, 0, true)?;
    let (tokens, cache) = match shape.sampling {
        Sampling::Avgpool | Sampling::Maxpool => {
            let kind = if shape.sampling == Sampling::Avgpool { PoolKind::Avg } else { PoolKind::Max };
            (grid_to_tokens(t, resample_to_grid(t, x, h, g, kind)?)?, None)
        }
        Sampling::Conv => {
            let y = if h > g {
                ctx.conv(x, &format!("{prefix}.down.sample"), h / g, 0, true)?
            } else {
                let up = if h < g { t.resample_nearest(x, g, g)? } else { x };
                ctx.conv(up, &format!("{prefix}.down.sample"), 1, 0, true)?
            };
            (grid_to_tokens(t, y)?, None)
        }
        Sampling::Attention => {
            let (side, x) = if h < g { (g, t.resample_nearest(x, g, g)?) } else { (h, x) };
            let pc = extract_patches(t, x, g)?;
            let (update, weights) = sampler_down(ctx, prefix, pc, patches)?;
            (update, Some(SamplerCache { weights, side }))
        }
    };
    let y = ctx.layer_norm(tokens, &format!("{prefix}.down.norm"))?;
    let y = if shape.activation { t.gelu(y)? } else { y };
    Ok((y, cache))
}

/// Token-to-pixel path. `patches` are the processed patch tokens `[N, K, E]`;
/// returns `[N, Cmid, H, H]` for injection into the next bottleneck.
pub fn up<T: Element>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    shape: FcuShape,
    patches: Var,
    cache: Option<&SamplerCache>,
) -> Result<Var> {
    shape.check()?;
    let t = ctx.tape;
    let (h, g) = (shape.hw, shape.grid);
    let (x, side) = match shape.sampling {
        Sampling::Attention => {
            let cache = cache.ok_or_else(|| {
                Error::Contract("attention up-sampling needs the cached weights of this step's down pass".into())
            })?;
            let spread = sampler_up(t, cache.weights, patches)?;
            (merge_patches(t, spread, g, cache.side)?, cache.side)
        }
        _ => (tokens_to_grid(t, patches)?, g),
    };
    let y = ctx.conv(x, &format!("{prefix}.up.conv"), 1, 0, true)?;
    let y = ctx.batch_norm(y, &format!("{prefix}.up.bn"))?;
    let y = if shape.activation { t.relu(y)? } else { y };
    if side > h {
        let r = side / h;
        Ok(t.pool2d(y, PoolKind::Avg, r, r, 0)?)
    } else if side < h {
        Ok(t.resample_nearest(y, h, h)?)
    } else {
        Ok(y)
    }
}

fn resample_to_grid<T: Element>(tape: &Tape<T>, x: Var, h: usize, g: usize, kind: PoolKind) -> Result<Var> {
    Ok(if h > g {
        tape.pool2d(x, kind, h / g, h / g, 0)?
    } else if h < g {
        tape.resample_nearest(x, g, g)?
    } else {
        x
    })
}

/// `[N, E, G·r, G·r] → [N, K, r², E]`: pixel vectors grouped by the token
/// whose patch contains them.
fn extract_patches<T: Element>(tape: &Tape<T>, x: Var, g: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (n, e, side) = (s[0], s[1], s[2]);
    let r = side / g;
    let y = tape.reshape(x, [n, e, g, r, g, r])?;
    let y = tape.permute(y, &[0, 2, 4, 3, 5, 1])?;
    Ok(tape.reshape(y, [n, g * g, r * r, e])?)
}

/// Inverse of [`extract_patches`].
fn merge_patches<T: Element>(tape: &Tape<T>, x: Var, g: usize, side: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (n, e) = (s[0], s[3]);
    let r = side / g;
    let y = tape.reshape(x, [n, g, g, r, r, e])?;
    let y = tape.permute(y, &[0, 5, 1, 3, 2, 4])?;
    Ok(tape.reshape(y, [n, e, side, side])?)
}

/// Single-head 1×n attention from each token to the pixels of its patch.
/// Returns the update `[N, K, E]` and the weights `[N, K, 1, n]`.
fn sampler_down<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, pc: Var, pt: Var) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let s = t.shape(pt);
    let (n, k, e) = (s[0], s[1], s[2]);
    let q = ctx.linear(pt, &format!("{prefix}.sampler.q"), false)?;
    let q = t.reshape(q, [n, k, 1, e])?;
    let key = ctx.linear(pc, &format!("{prefix}.sampler.k"), false)?;
    let val = ctx.linear(pc, &format!("{prefix}.sampler.v"), false)?;
    let kt = t.permute(key, &[0, 1, 3, 2])?;
    let scores = t.matmul(q, kt)?;
    let scores = t.scale(scores, T::one() / T::from_f64(e as f64).sqrt())?;
    let weights = t.softmax(scores, 3)?;
    t.set_label(weights, format!("{prefix}.sampler.weights"));
    let update = t.matmul(weights, val)?;
    Ok((t.reshape(update, [n, k, e])?, weights))
}

/// `Aᵀ · P̃t` per patch: `[N, K, n, E]`.
fn sampler_up<T: Element>(tape: &Tape<T>, weights: Var, pt: Var) -> Result<Var> {
    let s = tape.shape(pt);
    let p = tape.reshape(pt, [s[0], s[1], 1, s[2]])?;
    let at = tape.permute(weights, &[0, 1, 3, 2])?;
    Ok(tape.matmul(at, p)?)
}

/// Eager form of the attention down-sampling rule on one image.
///
/// `pc` holds the `n` pixel vectors of each of the `K` patches (`[K, n, E]`),
/// `pt` the aligned tokens (`[K, E]`), and `wq`, `wk`, `wv` are `[E, E]` maps
/// applied as `x · W`. Returns the incremented tokens and the `[K, 1, n]`
/// softmax weights for reuse by [`attention_sample_up`].
pub fn attention_sample_down<T: Element>(
    pc: &Tensor<T>,
    pt: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k, e) = match pt.shape() {
        [k, e] => (*k, *e),
        s => return Err(Error::Contract(format!("tokens must be [K, E], got {s:?}"))),
    };
    if pc.rank() != 3 || pc.shape()[0] != k || pc.shape()[2] != e {
        return Err(Error::config(
            "input_size",
            format!("patch tensor {:?} is not aligned with {k} tokens of width {e}", pc.shape()),
        ));
    }
    let q = ops::matmul(&pt.reshape([k, 1, e])?, wq)?;
    let key = ops::matmul(pc, wk)?;
    let val = ops::matmul(pc, wv)?;
    let scores = ops::matmul(&q, &key.permute(&[0, 2, 1])?)?;
    let scores = scores.map(|s| s / T::from_f64(e as f64).sqrt());
    let weights = ops::softmax(&scores, 2)?;
    let update = ops::matmul(&weights, &val)?.reshape([k, e])?;
    Ok((ops::add(pt, &update)?, weights))
}

/// Eager form of the attention up-sampling rule: every pixel of patch `j`
/// receives its cached weight times the processed token `j`.
pub fn attention_sample_up<T: Element>(pc: &Tensor<T>, pt: &Tensor<T>, cache: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let weights = cache.ok_or_else(|| {
        Error::Contract("attention up-sampling needs the cached weights of this step's down pass".into())
    })?;
    let (k, e) = (pt.shape()[0], pt.shape()[1]);
    let n = pc.shape()[1];
    if weights.shape() != [k, 1, n] {
        return Err(Error::Contract(format!("cached weights {:?} do not match [{k}, 1, {n}]", weights.shape())));
    }
    let spread = ops::matmul(&weights.permute(&[0, 2, 1])?, &pt.reshape([k, 1, e])?)?;
    Ok(ops::add(pc, &spread)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Buffers;
    use std::collections::BTreeMap;

    fn fcu_params(tape: &Tape<f64>, e: usize, c: usize, sampling: Sampling) -> BTreeMap<String, Var> {
        let mut v = BTreeMap::new();
        let mut put = |name: &str, t: Tensor<f64>| {
            v.insert(format!("f.{name}"), tape.constant(t));
        };
        put("down.conv.weight", Tensor::from_fn([e, c, 1, 1], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }));
        put("down.conv.bias", Tensor::zeros([e]));
        put("down.norm.weight", Tensor::ones([e]));
        put("down.norm.bias", Tensor::zeros([e]));
        put("up.conv.weight", Tensor::from_fn([c, e, 1, 1], |i| if i % (e + 1) == 0 { 1.0 } else { 0.0 }));
        put("up.conv.bias", Tensor::zeros([c]));
        put("up.bn.weight", Tensor::ones([c]));
        put("up.bn.bias", Tensor::zeros([c]));
        if sampling == Sampling::Attention {
            for m in ["q", "k", "v"] {
                put(&format!("sampler.{m}.weight"), Tensor::from_fn([e, e], |i| (i as f64 * 0.37).sin()));
            }
        }
        v
    }

    fn buffers(c: usize) -> Buffers<f64> {
        let mut b = Buffers::new();
        b.insert("f.up.bn.running_mean".into(), Tensor::zeros([c]));
        b.insert("f.up.bn.running_var".into(), Tensor::ones([c]));
        b
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let tape = Tape::new();
        let vars = fcu_params(&tape, 2, 2, Sampling::Avgpool);
        let bufs = buffers(2);
        let ctx = Ctx::new(&tape, &vars, &bufs, false);
        let mid = tape.constant(Tensor::full([1, 2, 4, 4], 3.0));
        let pt = tape.constant(Tensor::zeros([1, 4, 2]));
        let shape = FcuShape { hw: 4, grid: 2, sampling: Sampling::Avgpool, activation: true };
        let (y, _) = down(&ctx, "f", shape, mid, pt).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn every_strategy_gives_the_same_shapes() {
        for sampling in [Sampling::Avgpool, Sampling::Maxpool, Sampling::Conv, Sampling::Attention] {
            for (hw, grid) in [(8, 2), (4, 4), (2, 4)] {
                let tape = Tape::new();
                let mut vars = fcu_params(&tape, 4, 3, sampling);
                if sampling == Sampling::Conv {
                    let r = if hw > grid { hw / grid } else { 1 };
                    vars.insert("f.down.sample.weight".into(), tape.constant(Tensor::full([4, 4, r, r], 0.1)));
                    vars.insert("f.down.sample.bias".into(), tape.constant(Tensor::zeros([4])));
                }
                let bufs = buffers(3);
                let ctx = Ctx::new(&tape, &vars, &bufs, false);
                let mid = tape.constant(Tensor::from_fn([2, 3, hw, hw], |i| (i as f64).cos()));
                let pt = tape.constant(Tensor::from_fn([2, grid * grid, 4], |i| (i as f64 * 0.3).sin()));
                let shape = FcuShape { hw, grid, sampling, activation: true };
                let (d, cache) = down(&ctx, "f", shape, mid, pt).unwrap();
                assert_eq!(tape.shape(d), vec![2, grid * grid, 4]);
                let u = up(&ctx, "f", shape, pt, cache.as_ref()).unwrap();
                assert_eq!(tape.shape(u), vec![2, 3, hw, hw], "{sampling:?} {hw} {grid}");
            }
        }
    }

    #[test]
    fn attention_up_without_cache_is_a_contract_error() {
        let tape = Tape::new();
        let vars = fcu_params(&tape, 2, 2, Sampling::Attention);
        let bufs = buffers(2);
        let ctx = Ctx::new(&tape, &vars, &bufs, false);
        let pt = tape.constant(Tensor::zeros([1, 4, 2]));
        let shape = FcuShape { hw: 4, grid: 2, sampling: Sampling::Attention, activation: true };
        assert!(matches!(up(&ctx, "f", shape, pt, None), Err(Error::Contract(_))));
        let pc = Tensor::<f64>::zeros([4, 1, 2]);
        assert!(matches!(attention_sample_up(&pc, &Tensor::zeros([4, 2]), None), Err(Error::Contract(_))));
    }

    #[test]
    fn patches_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 6, 6], |i| i as f64));
        let p = extract_patches(&tape, x, 3).unwrap();
        assert_eq!(tape.shape(p), vec![2, 9, 4, 3]);
        // token 4 (row 1, col 1) covers pixels (2..4, 2..4)
        let v = tape.value(p);
        assert_eq!(v.at(&[0, 4, 1, 2]), tape.value(x).at(&[0, 2, 2, 3]));
        let back = merge_patches(&tape, p, 3, 6).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn grid_mismatch_is_a_config_error() {
        let tape = Tape::<f64>::new();
        let vars = fcu_params(&tape, 2, 2, Sampling::Avgpool);
        let bufs = buffers(2);
        let ctx = Ctx::new(&tape, &vars, &bufs, false);
        let mid = tape.constant(Tensor::zeros([1, 2, 6, 6]));
        let pt = tape.constant(Tensor::zeros([1, 16, 2]));
        let shape = FcuShape { hw: 6, grid: 4, sampling: Sampling::Avgpool, activation: true };
        assert!(matches!(down(&ctx, "f", shape, mid, pt), Err(Error::Config { .. })));
    }
}
