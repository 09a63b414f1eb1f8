//! Named parameter stores and their seeded initialization.

use std::collections::BTreeMap;

use conformer_tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{BlockPlan, BottleneckPlan, ConformerConfig, Plan, Sampling};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    /// He-normal with fan-out = out_channels · kh · kw.
    HeFanOut,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A learnable tensor store keyed by hierarchical names such as
/// `cnn.c3.b05.bneck0.conv2.weight`.
pub type ModelParams<T = f32> = BTreeMap<String, Tensor<T>>;

/// Non-learnable state (batch-norm running statistics).
pub type Buffers<T = f32> = BTreeMap<String, Tensor<T>>;

pub fn element_count<T: Element>(params: &ModelParams<T>) -> usize {
    params.values().map(Tensor::numel).sum()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-parameter generator: independent of construction order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

pub fn initialize(spec: &ParamSpec, seed: u64) -> Tensor<f32> {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal(std) => {
            let mut rng = param_rng(seed, &spec.name);
            (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break (z * std) as f32;
                    }
                })
                .collect()
        }
        Init::HeFanOut => {
            let fan_out = spec.shape[0] * spec.shape[2..].iter().product::<usize>();
            let std = (2.0 / fan_out as f64).sqrt();
            let mut rng = param_rng(seed, &spec.name);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches data")
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[cout, cin, k, k], Init::HeFanOut);
        if bias {
            self.push(format!("{prefix}.bias"), &[cout], Init::Zeros);
        }
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[out, inp], Init::TruncNormal(0.02));
        if bias {
            self.push(format!("{prefix}.bias"), &[out], Init::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), &[c], Init::Ones);
        self.push(format!("{prefix}.bias"), &[c], Init::Zeros);
    }
}

pub fn bottleneck_prefix(block: &BlockPlan, b: &BottleneckPlan) -> String {
    format!("{}.bneck{}", block.prefix("cnn"), b.slot)
}

/// Every batch-norm in the model, as `(prefix, channels)`.
pub fn batch_norms(cfg: &ConformerConfig, plan: &Plan) -> Vec<(String, usize)> {
    let mut out = vec![("stem.bn".to_string(), cfg.stem.out_channels)];
    if cfg.has_cnn() {
        for block in &plan.blocks {
            for b in &block.bottlenecks {
                let p = bottleneck_prefix(block, b);
                out.push((format!("{p}.bn1"), b.mid_channels));
                out.push((format!("{p}.bn2"), b.mid_channels));
                out.push((format!("{p}.bn3"), b.out_channels));
                if b.has_shortcut() {
                    out.push((format!("{p}.shortcut.bn"), b.out_channels));
                }
            }
        }
    }
    if cfg.is_dual() {
        for block in plan.blocks.iter().filter(|b| b.fusion) {
            out.push((format!("{}.up.bn", block.prefix("fcu")), block.mid_channels));
        }
    }
    out
}

/// Names, shapes and initializers of every learnable parameter.
pub fn param_specs(cfg: &ConformerConfig) -> Result<Vec<ParamSpec>> {
    let plan = cfg.plan(cfg.input_size)?;
    let mut s = Specs(Vec::new());
    let e = cfg.embed_dim;
    let c0 = cfg.stem.out_channels;

    s.conv("stem.conv", c0, 3, cfg.stem.kernel, false);
    s.norm("stem.bn", c0);

    if cfg.has_cnn() {
        for block in &plan.blocks {
            for b in &block.bottlenecks {
                let p = bottleneck_prefix(block, b);
                s.conv(&format!("{p}.conv1"), b.mid_channels, b.in_channels, 1, false);
                s.norm(&format!("{p}.bn1"), b.mid_channels);
                s.conv(&format!("{p}.conv2"), b.mid_channels, b.mid_channels, 3, false);
                s.norm(&format!("{p}.bn2"), b.mid_channels);
                s.conv(&format!("{p}.conv3"), b.out_channels, b.mid_channels, 1, false);
                s.norm(&format!("{p}.bn3"), b.out_channels);
                if b.has_shortcut() {
                    s.conv(&format!("{p}.shortcut.conv"), b.out_channels, b.in_channels, 1, false);
                    s.norm(&format!("{p}.shortcut.bn"), b.out_channels);
                }
            }
        }
        let last = cfg.out_channels[3];
        s.linear("head.cnn", cfg.num_classes, last, true);
    }

    if cfg.has_transformer() {
        s.conv("trans.patch_embed", e, c0, cfg.patch_stride, true);
        s.push("trans.cls_token".into(), &[1, 1, e], Init::TruncNormal(0.02));
        if cfg.positional_embeddings {
            s.push("trans.pos_embed".into(), &[1, plan.tokens(), e], Init::TruncNormal(0.02));
        }
        for block in &plan.blocks {
            let p = block.prefix("trans");
            s.norm(&format!("{p}.norm1"), e);
            s.linear(&format!("{p}.attn.qkv"), 3 * e, e, true);
            s.linear(&format!("{p}.attn.proj"), e, e, true);
            s.norm(&format!("{p}.norm2"), e);
            s.linear(&format!("{p}.mlp.fc1"), 4 * e, e, true);
            s.linear(&format!("{p}.mlp.fc2"), e, 4 * e, true);
        }
        s.norm("head.trans.norm", e);
        s.linear("head.trans", cfg.num_classes, e, true);
    }

    if cfg.is_dual() {
        for block in plan.blocks.iter().filter(|b| b.fusion) {
            let p = block.prefix("fcu");
            let mid = block.mid_channels;
            s.conv(&format!("{p}.down.conv"), e, mid, 1, true);
            match cfg.sampling {
                Sampling::Conv => {
                    let r = if block.hw > plan.grid { block.hw / plan.grid } else { 1 };
                    s.conv(&format!("{p}.down.sample"), e, e, r, true);
                }
                Sampling::Attention => {
                    for m in ["q", "k", "v"] {
                        s.linear(&format!("{p}.sampler.{m}"), e, e, false);
                    }
                }
                Sampling::Avgpool | Sampling::Maxpool => {}
            }
            s.norm(&format!("{p}.down.norm"), e);
            s.conv(&format!("{p}.up.conv"), mid, e, 1, true);
            s.norm(&format!("{p}.up.bn"), mid);
        }
    }
    Ok(s.0)
}

/// Deterministic parameters for `cfg`.
pub fn build_params(cfg: &ConformerConfig, seed: u64) -> Result<ModelParams> {
    Ok(param_specs(cfg)?.iter().map(|spec| (spec.name.clone(), initialize(spec, seed))).collect())
}

/// Running statistics at their initial values (mean 0, variance 1).
pub fn initial_buffers(cfg: &ConformerConfig) -> Result<Buffers> {
    let plan = cfg.plan(cfg.input_size)?;
    let mut out = Buffers::new();
    for (prefix, c) in batch_norms(cfg, &plan) {
        out.insert(format!("{prefix}.running_mean"), Tensor::zeros([c]));
        out.insert(format!("{prefix}.running_var"), Tensor::ones([c]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ConformerConfig::preset("micro").unwrap();
        assert_eq!(build_params(&cfg, 3).unwrap(), build_params(&cfg, 3).unwrap());
        assert_ne!(build_params(&cfg, 3).unwrap(), build_params(&cfg, 4).unwrap());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let spec = ParamSpec { name: "x".into(), shape: vec![5000], init: Init::TruncNormal(0.02) };
        let t = initialize(&spec, 1);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean: f32 = t.data().iter().sum::<f32>() / 5000.0;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn he_fan_out_scale() {
        let spec = ParamSpec { name: "w".into(), shape: vec![64, 16, 3, 3], init: Init::HeFanOut };
        let t = initialize(&spec, 1);
        let var: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.numel() as f64;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    }

    #[test]
    fn degenerate_shares_weights() {
        use crate::config::Structure;
        let cfg = ConformerConfig::preset("micro").unwrap();
        let full = build_params(&cfg, 9).unwrap();
        for which in [Structure::CnnOnly, Structure::TransformerOnly] {
            for (name, t) in build_params(&cfg.degenerate(which), 9).unwrap() {
                assert_eq!(&full[&name], &t, "{name}");
            }
        }
    }
}
