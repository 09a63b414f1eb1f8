//! Closed-form parameter and MAC accounting.
//!
//! Everything here is derived from the configuration by arithmetic alone: no
//! tensors are allocated and the parameter builder is never consulted, so the
//! counts can be checked against a built model as an independent route.

use serde::{Deserialize, Serialize};

use crate::config::{ConformerConfig, Sampling};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Stem, bottlenecks, FCUs and the CNN classifier.
    Cnn,
    /// Patch embedding, class token, positional embeddings, transformer
    /// blocks and the transformer classifier.
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub side: Side,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub input_size: usize,
    pub modules: Vec<ModuleCost>,
    pub stages: Vec<StageShape>,
    pub total_params: u64,
    pub total_macs: u64,
    pub cnn_params: u64,
    pub transformer_params: u64,
    /// Parameters in the two classifiers (already included in the sides).
    pub head_params: u64,
    /// CNN-side over transformer-side parameters; 0 when either side is absent.
    pub p_p: f64,
}

impl AuditReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "params" => self.total_params as f64,
            "macs" => self.total_macs as f64,
            "cnn_params" => self.cnn_params as f64,
            "transformer_params" => self.transformer_params as f64,
            "head_params" => self.head_params as f64,
            "p_p" => self.p_p,
            _ => return None,
        })
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.modules.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        out.push_str(&format!("{:<width$}  {:<11}  {:>12}  {:>16}\n", "module", "side", "params", "MACs"));
        for m in &self.modules {
            let side = match m.side {
                Side::Cnn => "cnn",
                Side::Transformer => "transformer",
            };
            out.push_str(&format!("{:<width$}  {:<11}  {:>12}  {:>16}\n", m.name, side, m.params, m.macs));
        }
        out.push('\n');
        for s in &self.stages {
            out.push_str(&format!("{:<8} {:?}\n", s.name, s.shape));
        }
        out.push('\n');
        out.push_str(&format!("params       {:>10.3} M\n", self.total_params as f64 / 1e6));
        out.push_str(&format!(
            "MACs         {:>10.3} G  @ {}x{}\n",
            self.total_macs as f64 / 1e9,
            self.input_size,
            self.input_size
        ));
        out.push_str(&format!("cnn side     {:>10.3} M\n", self.cnn_params as f64 / 1e6));
        out.push_str(&format!("trans side   {:>10.3} M\n", self.transformer_params as f64 / 1e6));
        out.push_str(&format!("heads        {:>10.3} M\n", self.head_params as f64 / 1e6));
        out.push_str(&format!("p_p          {:>10.3}\n", self.p_p));
        out
    }
}

struct Acc {
    modules: Vec<ModuleCost>,
}

impl Acc {
    fn add(&mut self, name: String, side: Side, params: u64, macs: u64) {
        self.modules.push(ModuleCost { name, side, params, macs });
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// `(params, macs)` of a bias-free k×k convolution followed by a batch norm.
fn conv_bn(cin: usize, cout: usize, k: usize, out_hw: usize) -> (u64, u64) {
    let w = u(cin * cout * k * k);
    (w + u(2 * cout), w * u(out_hw * out_hw))
}

fn bottleneck(cin: usize, mid: usize, cout: usize, in_hw: usize, stride: usize) -> (u64, u64) {
    let out_hw = (in_hw + 2 - 3) / stride + 1;
    let parts = [
        conv_bn(cin, mid, 1, in_hw),
        conv_bn(mid, mid, 3, out_hw),
        conv_bn(mid, cout, 1, out_hw),
        if cin != cout || stride != 1 { conv_bn(cin, cout, 1, out_hw) } else { (0, 0) },
    ];
    parts.iter().fold((0, 0), |(p, m), &(a, b)| (p + a, m + b))
}

fn transformer_block(e: usize, tokens: usize) -> (u64, u64) {
    let (e, t) = (u(e), u(tokens));
    // qkv + proj + fc1 + fc2 weights and biases, two LayerNorms
    let params = 3 * e * e + 3 * e + e * e + e + 4 * e * e + 4 * e + 4 * e * e + e + 4 * e;
    let attention = 4 * t * e * e + 2 * t * t * e;
    let mlp = 8 * t * e * e;
    (params, attention + mlp)
}

fn fcu(cfg: &ConformerConfig, mid: usize, hw: usize, grid: usize) -> (u64, u64) {
    let e = cfg.embed_dim;
    let (mut p, mut m) = (0u64, 0u64);
    // down: 1×1 conv with bias, LayerNorm
    p += u(mid * e + e + 2 * e);
    m += u(mid * e * hw * hw);
    // up: 1×1 conv with bias on the grid, BatchNorm
    p += u(e * mid + mid + 2 * mid);
    m += u(e * mid * grid * grid);
    match cfg.sampling {
        Sampling::Avgpool | Sampling::Maxpool => {}
        Sampling::Conv => {
            let r = if hw > grid { hw / grid } else { 1 };
            p += u(e * e * r * r + e);
            m += u(e * e * r * r * grid * grid);
        }
        Sampling::Attention => {
            let n = if hw > grid { (hw / grid).pow(2) } else { 1 };
            let k = grid * grid;
            p += u(3 * e * e);
            // queries, keys and values, scores, weighted sum
            m += u(k * e * e + 2 * k * n * e * e + 2 * k * n * e);
        }
    }
    (p, m)
}

/// Full cost breakdown at a square input of side `input_size`.
pub fn audit(cfg: &ConformerConfig, input_size: usize) -> Result<AuditReport> {
    let mut acc = Acc { modules: Vec::new() };
    let mut stages = Vec::new();
    let c0 = cfg.stem.out_channels;
    let e = cfg.embed_dim;
    let k = cfg.stem.kernel;

    if input_size + 2 * (k / 2) < k {
        return Err(Error::config("input_size", format!("{input_size} is smaller than the stem kernel")));
    }
    let conv_hw = (input_size + 2 * (k / 2) - k) / cfg.stem.stride + 1;
    let (sp, sm) = conv_bn(3, c0, k, conv_hw);
    acc.add("stem".into(), Side::Cnn, sp, sm);
    let mut hw = if cfg.stem.pool { (conv_hw + 2 - 3) / 2 + 1 } else { conv_hw };
    stages.push(StageShape { name: "stem".into(), shape: vec![c0, hw, hw] });
    if hw % cfg.patch_stride != 0 {
        return Err(Error::config(
            "input_size",
            format!("stem output {hw}x{hw} is not divisible by patch_stride {}", cfg.patch_stride),
        ));
    }
    let grid = hw / cfg.patch_stride;
    let tokens = grid * grid + 1;

    if cfg.has_transformer() {
        let ps = cfg.patch_stride;
        acc.add(
            "trans.patch_embed".into(),
            Side::Transformer,
            u(c0 * e * ps * ps + e),
            u(c0 * e * ps * ps * grid * grid),
        );
        acc.add("trans.cls_token".into(), Side::Transformer, u(e), 0);
        if cfg.positional_embeddings {
            acc.add("trans.pos_embed".into(), Side::Transformer, u(tokens * e), 0);
        }
        stages.push(StageShape { name: "tokens".into(), shape: vec![tokens, e] });
    }

    let mut cin = c0;
    let mut index = 0;
    for (stage, &count) in cfg.blocks_per_stage.iter().enumerate() {
        let (mid, out) = (cfg.mid_channels[stage], cfg.out_channels[stage]);
        for b in 0..count {
            index += 1;
            let name = format!("c{}.b{index:02}", stage + 2);
            let fusion = index >= 2 && (index - 1) % cfg.fusion_interval == 0;
            if cfg.has_cnn() {
                let n_c = cfg.n_c[index - 1];
                // non-coupled blocks drop the injection bottleneck
                let bottlenecks = if n_c == 1 || fusion { n_c } else { n_c - 1 };
                let (mut p, mut m) = (0, 0);
                for j in 0..bottlenecks {
                    let stride = if j == 0 && b == 0 && stage > 0 { 2 } else { 1 };
                    let (bp, bm) = bottleneck(cin, mid, out, hw, stride);
                    p += bp;
                    m += bm;
                    hw = (hw + 2 - 3) / stride + 1;
                    cin = out;
                }
                acc.add(format!("cnn.{name}"), Side::Cnn, p, m);
            } else if b == 0 && stage > 0 {
                hw = (hw + 2 - 3) / 2 + 1;
            }
            if cfg.has_transformer() {
                let (p, m) = transformer_block(e, tokens);
                acc.add(format!("trans.{name}"), Side::Transformer, p, m);
            }
            if cfg.is_dual() && fusion {
                if hw % grid != 0 && !grid.is_multiple_of(hw) {
                    return Err(Error::config(
                        "input_size",
                        format!("stage c{} map {hw}x{hw} does not align with the {grid}x{grid} token grid", stage + 2),
                    ));
                }
                let (p, m) = fcu(cfg, mid, hw, grid);
                acc.add(format!("fcu.{name}"), Side::Cnn, p, m);
            }
        }
        if cfg.has_cnn() {
            stages.push(StageShape { name: format!("c{}", stage + 2), shape: vec![out, hw, hw] });
        }
    }

    let classes = cfg.num_classes;
    let mut head_params = 0;
    if cfg.has_cnn() {
        let last = cfg.out_channels[3];
        let p = u(last * classes + classes);
        head_params += p;
        acc.add("head.cnn".into(), Side::Cnn, p, u(last * classes));
    }
    if cfg.has_transformer() {
        let p = u(2 * e + e * classes + classes);
        head_params += p;
        acc.add("head.trans".into(), Side::Transformer, p, u(e * classes));
    }

    let side_sum = |s: Side| acc.modules.iter().filter(|m| m.side == s).map(|m| m.params).sum::<u64>();
    let cnn_params = side_sum(Side::Cnn);
    let transformer_params = side_sum(Side::Transformer);
    let total_params = acc.modules.iter().map(|m| m.params).sum();
    let total_macs = acc.modules.iter().map(|m| m.macs).sum();
    let p_p = if cfg.is_dual() { cnn_params as f64 / transformer_params as f64 } else { 0.0 };
    Ok(AuditReport {
        input_size,
        modules: acc.modules,
        stages,
        total_params,
        total_macs,
        cnn_params,
        transformer_params,
        head_params,
        p_p,
    })
}

pub fn count_params(cfg: &ConformerConfig) -> Result<u64> {
    Ok(audit(cfg, cfg.input_size)?.total_params)
}

pub fn count_macs(cfg: &ConformerConfig, input_size: usize) -> Result<u64> {
    Ok(audit(cfg, input_size)?.total_macs)
}

/// One published figure to compare against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    pub value: f64,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub name: String,
    pub preset: String,
    /// Config fields replaced on top of the preset.
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
    pub input_size: usize,
    pub checks: Vec<Check>,
}

impl ReferenceEntry {
    pub fn config(&self) -> Result<ConformerConfig> {
        let base = ConformerConfig::preset(&self.preset)?;
        let mut v = serde_json::to_value(&base)?;
        for (key, value) in &self.overrides {
            v[key] = value.clone();
        }
        ConformerConfig::from_json(&v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub entry: String,
    pub metric: String,
    pub reference: f64,
    pub computed: f64,
    pub rel_error: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

/// The shipped table of published budgets.
pub fn reference_tables() -> Result<Vec<ReferenceEntry>> {
    Ok(serde_json::from_str(include_str!("../data/reference_tables.json"))?)
}

pub fn compare(report: &AuditReport, entry: &ReferenceEntry) -> Result<Vec<ComparisonRow>> {
    entry
        .checks
        .iter()
        .map(|c| {
            let computed = report
                .metric(&c.metric)
                .ok_or_else(|| Error::Data(format!("unknown metric `{}` in entry `{}`", c.metric, entry.name)))?;
            let rel_error = (computed - c.value).abs() / c.value.abs();
            Ok(ComparisonRow {
                entry: entry.name.clone(),
                metric: c.metric.clone(),
                reference: c.value,
                computed,
                rel_error,
                rel_tol: c.rel_tol,
                pass: rel_error <= c.rel_tol,
            })
        })
        .collect()
}

/// Compares `cfg` against every reference entry describing the same
/// architecture. Errors when none does.
pub fn compare_with_references(cfg: &ConformerConfig) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for entry in reference_tables()? {
        if &entry.config()? == cfg {
            rows.extend(compare(&audit(cfg, entry.input_size)?, &entry)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Argument("no reference entry matches this configuration".into()));
    }
    Ok(rows)
}

/// Every reference entry, each against its own configuration.
pub fn compare_all() -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for entry in reference_tables()? {
        let cfg = entry.config()?;
        rows.extend(compare(&audit(&cfg, entry.input_size)?, &entry)?);
    }
    Ok(rows)
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<30} {:<20} {:>14} {:>14} {:>9} {:>7}  result\n",
        "entry", "metric", "reference", "computed", "rel.err", "tol"
    );
    for r in rows {
        let (refv, comp) = match r.metric.as_str() {
            "p_p" => (format!("{:.3}", r.reference), format!("{:.3}", r.computed)),
            "macs" => (format!("{:.2} G", r.reference / 1e9), format!("{:.2} G", r.computed / 1e9)),
            _ => (format!("{:.2} M", r.reference / 1e6), format!("{:.2} M", r.computed / 1e6)),
        };
        out.push_str(&format!(
            "{:<30} {:<20} {:>14} {:>14} {:>8.2}% {:>6.1}%  {}\n",
            r.entry,
            r.metric,
            refv,
            comp,
            100.0 * r.rel_error,
            100.0 * r.rel_tol,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    out
}
