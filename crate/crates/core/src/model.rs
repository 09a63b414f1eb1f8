//! The assembled dual-branch network.

use std::collections::BTreeMap;

use conformer_tensor::{kernels::norm::BATCH_NORM_MOMENTUM, BatchStats, Element, Tape, Tensor, Var};

use crate::blocks::{self, Ctx};
use crate::config::{ConformerConfig, Plan, Role};
use crate::error::{Error, Result};
use crate::fcu::{self, FcuShape, SamplerCache};
use crate::params::{bottleneck_prefix, build_params, element_count, initial_buffers, Buffers, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Batch statistics for norms (and their collection) instead of running ones.
    pub train: bool,
    /// Record per-block intermediate values.
    pub taps: bool,
}

/// Intermediate values of one block; entries are absent for a missing branch.
#[derive(Debug, Clone, Default)]
pub struct BlockTaps {
    /// `"c3.b05"` style name.
    pub name: String,
    /// CNN feature map after the block.
    pub feature: Option<Var>,
    /// Activated 3×3 output of the first bottleneck.
    pub mid: Option<Var>,
    /// Tokens after the block, class token first.
    pub tokens: Option<Var>,
    /// `[N, heads, T, T]` attention weights.
    pub attention: Option<Var>,
    /// Tokens immediately before and after the FCU down path.
    pub fcu_tokens: Option<(Var, Var)>,
    /// `[N, K, 1, n]` attention-sampler weights.
    pub sampler: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct Taps {
    pub stem: Option<Var>,
    pub blocks: Vec<BlockTaps>,
}

pub struct ForwardPass<T: Element> {
    pub cnn_logits: Option<Var>,
    pub trans_logits: Option<Var>,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
    pub taps: Option<Taps>,
    pub plan: Plan,
}

/// Eager logits of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T: Element = f32> {
    pub cnn: Option<Tensor<T>>,
    pub trans: Option<Tensor<T>>,
}

impl<T: Element> Logits<T> {
    /// Sum of the available heads' logits.
    pub fn predict(&self) -> Result<Tensor<T>> {
        match (&self.cnn, &self.trans) {
            (Some(a), Some(b)) => predict(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a.clone()),
            (None, None) => Err(Error::Contract("model has no classifier".into())),
        }
    }
}

/// Elementwise sum of the two classifiers' outputs.
pub fn predict<T: Element>(cnn: &Tensor<T>, trans: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(conformer_tensor::ops::add(cnn, trans)?)
}

/// Row-wise argmax.
pub fn argmax<T: Element>(scores: &Tensor<T>) -> Vec<usize> {
    let classes = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(classes.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conformer<T: Element = f32> {
    pub config: ConformerConfig,
    pub params: ModelParams<T>,
    pub buffers: Buffers<T>,
}

impl Conformer<f32> {
    pub fn new(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed)?;
        let buffers = initial_buffers(&config)?;
        Ok(Conformer { config, params, buffers })
    }
}

impl<T: Element> Conformer<T> {
    pub fn num_params(&self) -> usize {
        element_count(&self.params)
    }

    pub fn cast<U: Element>(&self) -> Conformer<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Conformer { config: self.config.clone(), params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// Places every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, value)| {
                let v = tape.leaf(value.clone(), trainable);
                tape.set_label(v, name.as_str());
                (name.clone(), v)
            })
            .collect()
    }

    /// Zeroes every coupling parameter, isolating the two branches.
    pub fn zero_fcu(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("fcu.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::from_f64(BATCH_NORM_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{prefix}.{suffix}");
                let buf =
                    self.buffers.get_mut(&key).ok_or_else(|| Error::Contract(format!("buffer `{key}` is missing")))?;
                for (b, &v) in buf.data_mut().iter_mut().zip(values) {
                    *b = keep * *b + m * v;
                }
            }
        }
        Ok(())
    }

    /// Records a full forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &Tape<T>,
        vars: &BTreeMap<String, Var>,
        images: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
            return Err(conformer_tensor::TensorError::Dimension {
                op: "forward",
                detail: format!("expected square [N, 3, S, S] images, got {shape:?}"),
            }
            .into());
        }
        let plan = cfg.check_input_size(shape[2])?;
        let n = shape[0];
        let ctx = Ctx::new(tape, vars, &self.buffers, opts.train);
        let mut taps = Taps::default();

        let stem = blocks::stem(&ctx, &cfg.stem, images)?;
        taps.stem = Some(stem);

        let mut tokens = if cfg.has_transformer() {
            let patches = blocks::patch_embed(&ctx, stem, cfg.patch_stride)?;
            let cls = ctx.param("trans.cls_token")?;
            let zeros = tape.constant(Tensor::zeros([n, 1, cfg.embed_dim]));
            let cls = tape.add(zeros, cls)?;
            let mut t = tape.concat(&[cls, patches], 1)?;
            if cfg.positional_embeddings {
                t = tape.add(t, ctx.param("trans.pos_embed")?)?;
            }
            Some(t)
        } else {
            None
        };
        let mut x = if cfg.has_cnn() { Some(stem) } else { None };
        let k = plan.patches;

        for block in &plan.blocks {
            let mut bt =
                BlockTaps { name: format!("{}.b{:02}", block.stage_name(), block.index), ..Default::default() };
            let coupled = cfg.is_dual() && block.fusion;
            let fshape =
                FcuShape { hw: block.hw, grid: plan.grid, sampling: cfg.sampling, activation: cfg.fcu_activation };
            let fprefix = block.prefix("fcu");
            let mut cache: Option<SamplerCache> = None;
            let mut bottlenecks = block.bottlenecks.iter();

            // first bottleneck and the pixel-to-token coupling
            if let (Some(xin), Some(first)) = (x, bottlenecks.next()) {
                let (y, mid) =
                    blocks::bottleneck(&ctx, &bottleneck_prefix(block, first), first, xin, None, cfg.injection)?;
                x = Some(y);
                bt.mid = Some(mid);
                if coupled {
                    let t = tokens.expect("dual model has tokens");
                    let cls = tape.narrow(t, 1, 0, 1)?;
                    let patches = tape.narrow(t, 1, 1, k)?;
                    let (d, c) = fcu::down(&ctx, &fprefix, fshape, mid, patches)?;
                    let patches = tape.add(patches, d)?;
                    let after = tape.concat(&[cls, patches], 1)?;
                    bt.fcu_tokens = Some((t, after));
                    bt.sampler = c.map(|c| c.weights);
                    cache = c;
                    tokens = Some(after);
                }
            }

            if let Some(t) = tokens {
                let (t, attn) = blocks::transformer_block(&ctx, &block.prefix("trans"), t, cfg.num_heads)?;
                tokens = Some(t);
                bt.tokens = Some(t);
                bt.attention = Some(attn);
            }

            if let Some(mut xin) = x {
                for b in bottlenecks {
                    let injected = if coupled && b.role == Role::Inject {
                        let patches = tape.narrow(tokens.expect("dual model has tokens"), 1, 1, k)?;
                        Some(fcu::up(&ctx, &fprefix, fshape, patches, cache.as_ref())?)
                    } else {
                        None
                    };
                    xin = blocks::bottleneck(&ctx, &bottleneck_prefix(block, b), b, xin, injected, cfg.injection)?.0;
                }
                x = Some(xin);
                bt.feature = Some(xin);
            }
            taps.blocks.push(bt);
        }

        let cnn_logits = x.map(|x| blocks::cnn_head(&ctx, x)).transpose()?;
        let trans_logits = tokens.map(|t| blocks::trans_head(&ctx, t)).transpose()?;
        Ok(ForwardPass { cnn_logits, trans_logits, bn_stats: ctx.take_stats(), taps: opts.taps.then_some(taps), plan })
    }

    /// Eval-mode logits, processed in chunks of `chunk` images.
    pub fn logits_chunked(&self, images: &Tensor<T>, chunk: usize) -> Result<Logits<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut cnn = Vec::new();
        let mut trans = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let tape = Tape::new();
            let vars = self.bind(&tape, false);
            let img = tape.constant(images.narrow(0, start, len)?);
            let pass = self.forward_on(&tape, &vars, img, ForwardOptions::default())?;
            if let Some(v) = pass.cnn_logits {
                cnn.extend_from_slice(tape.value(v).data());
            }
            if let Some(v) = pass.trans_logits {
                trans.extend_from_slice(tape.value(v).data());
            }
            start += len;
        }
        let classes = self.config.num_classes;
        let wrap = |v: Vec<T>| -> Result<Option<Tensor<T>>> {
            if v.is_empty() && n > 0 {
                Ok(None)
            } else {
                Ok(Some(Tensor::new([n, classes], v)?))
            }
        };
        Ok(Logits {
            cnn: if self.config.has_cnn() { wrap(cnn)? } else { None },
            trans: if self.config.has_transformer() { wrap(trans)? } else { None },
        })
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Logits<T>> {
        self.logits_chunked(images, 64)
    }
}
