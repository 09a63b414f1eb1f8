//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use conformer_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { weight_decay: 0.05, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

/// Normalization parameters and the class token are not decayed.
pub fn is_decay_exempt(name: &str) -> bool {
    name == "trans.cls_token" || name.split('.').any(|seg| seg.starts_with("bn") || seg.starts_with("norm"))
}

/// One AdamW update of a single tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("optimizer steps are numbered from 1".into()));
    }
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::Contract("parameter, gradient and moment sizes differ".into()));
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let p = param[i] as f64 * decay;
        param[i] = (p - lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// Optimizer state for a whole parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Exempt norm parameters and the class token from decay.
    pub exclude_norms: bool,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        AdamW { cfg, exclude_norms: true, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Contract(format!("no optimizer state for `{name}`"))),
            };
            let wd = if self.exclude_norms && is_decay_exempt(name) { 0.0 } else { self.cfg.weight_decay };
            adamw_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, lr, wd, &self.cfg)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = vec![0.5f32, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, 0.0, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn zero_grad_decay_only() {
        let mut p = vec![1.0f32, -3.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, 0.05, &AdamWConfig::default()).unwrap();
        assert!((p[0] as f64 - (1.0 - 5e-5)).abs() < 1e-7);
        assert!((p[1] as f64 + 3.0 * (1.0 - 5e-5)).abs() < 1e-6);
    }

    #[test]
    fn first_step_by_hand() {
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        let mut p = vec![1.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, 0.0, &AdamWConfig::default()).unwrap();
        assert!((p[0] as f64 - 0.999).abs() < 1e-6);
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut p = vec![1.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        assert!(adamw_step(&mut p, &[1.0], &mut m, &mut v, 0, 1e-3, 0.0, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn exemptions() {
        for name in [
            "stem.bn.weight",
            "cnn.c2.b01.bneck0.bn2.bias",
            "trans.c2.b01.norm1.weight",
            "fcu.c3.b03.down.norm.bias",
            "head.trans.norm.weight",
            "trans.cls_token",
            "fcu.c2.b02.up.bn.weight",
        ] {
            assert!(is_decay_exempt(name), "{name}");
        }
        for name in ["stem.conv.weight", "trans.c2.b01.attn.qkv.weight", "head.cnn.bias", "trans.pos_embed"] {
            assert!(!is_decay_exempt(name), "{name}");
        }
    }

    #[test]
    fn cosine_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0), 1e-3);
        assert_eq!(cosine_lr(10, 100, 1e-3, 10), 1e-3);
        assert_eq!(cosine_lr(5, 100, 1e-3, 10), 5e-4);
        assert_eq!(cosine_lr(100, 100, 1e-3, 0), 0.0);
        assert!((cosine_lr(50, 100, 1e-3, 0) - 5e-4).abs() < 1e-15);
    }
}
