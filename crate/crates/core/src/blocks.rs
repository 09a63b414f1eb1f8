//! Stem, bottleneck, patch embedding, attention, transformer block and heads,
//! all recorded on a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use conformer_tensor::{BatchNormMode, BatchStats, Element, PoolKind, Tape, Tensor, Var};

use crate::config::{BottleneckPlan, Injection, StemConfig};
use crate::error::{Error, Result};
use crate::params::Buffers;

/// Everything a block needs to read parameters and record operations.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a Tape<T>,
    pub vars: &'a BTreeMap<String, Var>,
    pub buffers: &'a Buffers<T>,
    pub train: bool,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, vars: &'a BTreeMap<String, Var>, buffers: &'a Buffers<T>, train: bool) -> Self {
        Ctx { tape, vars, buffers, train, stats: RefCell::new(Vec::new()) }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::Contract(format!("buffer `{name}` is missing")))
    }

    /// Batch-norm statistics gathered so far (training mode only).
    pub fn take_stats(&self) -> Vec<(String, BatchStats<T>)> {
        self.stats.take()
    }

    pub fn conv(&self, x: Var, prefix: &str, stride: usize, padding: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        let y = self.tape.conv2d(x, w, b, stride, padding)?;
        self.tape.set_label(y, prefix);
        Ok(y)
    }

    pub fn batch_norm(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let (y, stats) = if self.train {
            self.tape.batch_norm(x, g, b, BatchNormMode::Train)?
        } else {
            let mean = self.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.buffer(&format!("{prefix}.running_var"))?;
            self.tape.batch_norm(x, g, b, BatchNormMode::Eval { mean: mean.data(), var: var.data() })?
        };
        if let Some(s) = stats {
            self.stats.borrow_mut().push((prefix.to_string(), s));
        }
        self.tape.set_label(y, prefix);
        Ok(y)
    }

    pub fn layer_norm(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.layer_norm(x, g, b)?;
        self.tape.set_label(y, prefix);
        Ok(y)
    }

    pub fn linear(&self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        let y = self.tape.linear(x, w, b)?;
        self.tape.set_label(y, prefix);
        Ok(y)
    }
}

/// conv k×k/s (pad k/2), norm, ReLU, then an optional 3×3/2 max pool.
pub fn stem<T: Element>(ctx: &Ctx<'_, T>, stem: &StemConfig, images: Var) -> Result<Var> {
    let shape = ctx.tape.shape(images);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(conformer_tensor::TensorError::Dimension {
            op: "stem",
            detail: format!("expected [N, 3, H, W] images, got {shape:?}"),
        }
        .into());
    }
    let x = ctx.conv(images, "stem.conv", stem.stride, stem.kernel / 2, false)?;
    let x = ctx.batch_norm(x, "stem.bn")?;
    let x = ctx.tape.relu(x)?;
    if stem.pool {
        Ok(ctx.tape.pool2d(x, PoolKind::Max, 3, 2, 1)?)
    } else {
        Ok(x)
    }
}

/// Residual bottleneck. Returns the block output and the activated 3×3-stage
/// output (the coupling tap).
pub fn bottleneck<T: Element>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    plan: &BottleneckPlan,
    x: Var,
    injected: Option<Var>,
    injection: Injection,
) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let h = ctx.conv(x, &format!("{prefix}.conv1"), 1, 0, false)?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn1"))?;
    let mut h = t.relu(h)?;

    let check = |inj: Var, want: Vec<usize>| -> Result<()> {
        let got = t.shape(inj);
        if got != want {
            return Err(conformer_tensor::TensorError::Dimension {
                op: "bottleneck",
                detail: format!("injected tensor {got:?} does not match {want:?}"),
            }
            .into());
        }
        Ok(())
    };
    if let (Some(inj), Injection::PreConv) = (injected, injection) {
        check(inj, t.shape(h))?;
        h = t.add(h, inj)?;
    }
    let h = ctx.conv(h, &format!("{prefix}.conv2"), plan.stride, 1, false)?;
    let mut h = ctx.batch_norm(h, &format!("{prefix}.bn2"))?;
    if let (Some(inj), Injection::PostNorm) = (injected, injection) {
        check(inj, t.shape(h))?;
        h = t.add(h, inj)?;
    }
    let mid = t.relu(h)?;
    let h = ctx.conv(mid, &format!("{prefix}.conv3"), 1, 0, false)?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn3"))?;
    let shortcut = if plan.has_shortcut() {
        let s = ctx.conv(x, &format!("{prefix}.shortcut.conv"), plan.stride, 0, false)?;
        ctx.batch_norm(s, &format!("{prefix}.shortcut.bn"))?
    } else {
        x
    };
    let y = t.add(h, shortcut)?;
    Ok((t.relu(y)?, mid))
}

/// Non-overlapping patch projection: `[N, C, H, W] → [N, K, E]`.
pub fn patch_embed<T: Element>(ctx: &Ctx<'_, T>, x: Var, patch_stride: usize) -> Result<Var> {
    let s = ctx.tape.shape(x);
    if !s[2].is_multiple_of(patch_stride) || !s[3].is_multiple_of(patch_stride) {
        return Err(Error::config(
            "patch_stride",
            format!("{}x{} feature map is not divisible by {patch_stride}", s[2], s[3]),
        ));
    }
    let y = ctx.conv(x, "trans.patch_embed", patch_stride, 0, true)?;
    grid_to_tokens(ctx.tape, y)
}

/// `[N, E, G, G] → [N, G·G, E]`, row-major over the grid.
pub fn grid_to_tokens<T: Element>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let flat = tape.reshape(x, [s[0], s[1], s[2] * s[3]])?;
    Ok(tape.permute(flat, &[0, 2, 1])?)
}

/// `[N, K, E] → [N, E, G, G]`.
pub fn tokens_to_grid<T: Element>(tape: &Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens);
    let g = (s[1] as f64).sqrt().round() as usize;
    if g * g != s[1] {
        return Err(Error::Contract(format!("{} tokens do not form a square grid", s[1])));
    }
    let t = tape.permute(tokens, &[0, 2, 1])?;
    Ok(tape.reshape(t, [s[0], s[2], g, g])?)
}

/// Multi-head self-attention. Returns the projected output and the attention
/// weights `[N, heads, T, T]`.
pub fn mhsa<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let s = t.shape(x);
    let (n, tokens, e) = (s[0], s[1], s[2]);
    let d = e / heads;
    let qkv = ctx.linear(x, &format!("{prefix}.qkv"), true)?;
    let qkv = t.reshape(qkv, [n, tokens, 3, heads, d])?;
    let qkv = t.permute(qkv, &[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var> {
        let p = t.narrow(qkv, 0, i, 1)?;
        Ok(t.reshape(p, [n, heads, tokens, d])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let kt = t.permute(k, &[0, 1, 3, 2])?;
    let scores = t.matmul(q, kt)?;
    let scores = t.scale(scores, T::one() / T::from_f64(d as f64).sqrt())?;
    let attn = t.softmax(scores, 3)?;
    let out = t.matmul(attn, v)?;
    let out = t.permute(out, &[0, 2, 1, 3])?;
    let out = t.reshape(out, [n, tokens, e])?;
    Ok((ctx.linear(out, &format!("{prefix}.proj"), true)?, attn))
}

/// Pre-norm transformer block. Returns the new tokens and the attention weights.
pub fn transformer_block<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let h = ctx.layer_norm(x, &format!("{prefix}.norm1"))?;
    let (a, attn) = mhsa(ctx, &format!("{prefix}.attn"), h, heads)?;
    let x = t.add(x, a)?;
    let h = ctx.layer_norm(x, &format!("{prefix}.norm2"))?;
    let h = ctx.linear(h, &format!("{prefix}.mlp.fc1"), true)?;
    let h = t.gelu(h)?;
    let h = ctx.linear(h, &format!("{prefix}.mlp.fc2"), true)?;
    Ok((t.add(x, h)?, attn))
}

/// Global average pool followed by the CNN classifier.
pub fn cnn_head<T: Element>(ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
    let pooled = ctx.tape.global_avg_pool(x)?;
    ctx.linear(pooled, "head.cnn", true)
}

/// Final LayerNorm on the class token followed by the transformer classifier.
pub fn trans_head<T: Element>(ctx: &Ctx<'_, T>, tokens: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(tokens);
    let cls = t.narrow(tokens, 1, 0, 1)?;
    let cls = t.reshape(cls, [s[0], s[2]])?;
    let cls = ctx.layer_norm(cls, "head.trans.norm")?;
    ctx.linear(cls, "head.trans", true)
}
