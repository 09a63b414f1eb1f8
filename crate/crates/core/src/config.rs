//! Architecture description and the block schedule derived from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
    pub out_channels: usize,
}

/// How the FCU moves features between the pixel grid and the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Avgpool,
    Maxpool,
    Conv,
    Attention,
}

/// Where the FCU up-path joins the receiving bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Added to the normalized 3×3 output, before its activation.
    PostNorm,
    /// Added to the input of the 3×3 convolution.
    PreConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Dual,
    CnnOnly,
    TransformerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub input_size: usize,
    pub stem: StemConfig,
    pub blocks_per_stage: [usize; 4],
    /// Bottlenecks per block, one entry per block.
    pub n_c: Vec<usize>,
    pub mid_channels: [usize; 4],
    pub out_channels: [usize; 4],
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_stride: usize,
    pub fusion_interval: usize,
    pub sampling: Sampling,
    pub positional_embeddings: bool,
    pub num_classes: usize,
    pub fcu_activation: bool,
    pub injection: Injection,
    pub structure: Structure,
}

pub const PRESETS: [&str; 5] = ["conformer_ti", "conformer_s", "conformer_s32", "conformer_b", "micro"];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "conformer_ti" => include_str!("../configs/conformer_ti.json"),
        "conformer_s" => include_str!("../configs/conformer_s.json"),
        "conformer_s32" => include_str!("../configs/conformer_s32.json"),
        "conformer_b" => include_str!("../configs/conformer_b.json"),
        "micro" => include_str!("../configs/micro.json"),
        _ => return None,
    })
}

/// Spatial output of a convolution or pooling window.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// First bottleneck of a block; exposes its 3×3 output to the FCU.
    Tap,
    /// Receives the FCU up-path.
    Inject,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottleneckPlan {
    pub slot: usize,
    pub role: Role,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub in_hw: usize,
    pub out_hw: usize,
}

impl BottleneckPlan {
    pub fn has_shortcut(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    /// 1-based block number.
    pub index: usize,
    /// 0-based stage (c2..c5).
    pub stage: usize,
    /// Whether the two branches are coupled in this block.
    pub fusion: bool,
    pub mid_channels: usize,
    /// Feature-map side length after this block.
    pub hw: usize,
    pub bottlenecks: Vec<BottleneckPlan>,
}

impl BlockPlan {
    pub fn stage_name(&self) -> String {
        format!("c{}", self.stage + 2)
    }

    /// Name prefix shared by every parameter of this block in `branch`.
    pub fn prefix(&self, branch: &str) -> String {
        format!("{branch}.c{}.b{:02}", self.stage + 2, self.index)
    }
}

/// Fully resolved schedule for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub input_size: usize,
    pub stem_hw: usize,
    /// Token grid side length.
    pub grid: usize,
    /// Patch tokens, excluding the class token.
    pub patches: usize,
    pub blocks: Vec<BlockPlan>,
}

impl Plan {
    pub fn tokens(&self) -> usize {
        self.patches + 1
    }

    pub fn final_hw(&self) -> usize {
        self.blocks.last().map_or(self.stem_hw, |b| b.hw)
    }
}

impl ConformerConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name)
            .ok_or_else(|| Error::Argument(format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?;
        Self::from_json(src)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn has_cnn(&self) -> bool {
        self.structure != Structure::TransformerOnly
    }

    pub fn has_transformer(&self) -> bool {
        self.structure != Structure::CnnOnly
    }

    pub fn is_dual(&self) -> bool {
        self.structure == Structure::Dual
    }

    /// Single-branch sub-structure of this configuration.
    pub fn degenerate(&self, which: Structure) -> Self {
        ConformerConfig { structure: which, ..self.clone() }
    }

    /// Blocks `i >= 2` with `(i - 1) % fusion_interval == 0` are coupled.
    pub fn is_fusion_block(&self, index: usize) -> bool {
        index >= 2 && (index - 1).is_multiple_of(self.fusion_interval)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("stem.kernel", self.stem.kernel),
            ("stem.stride", self.stem.stride),
            ("stem.out_channels", self.stem.out_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("patch_stride", self.patch_stride),
            ("fusion_interval", self.fusion_interval),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("blocks_per_stage", "every stage needs at least one block"));
        }
        if self.mid_channels.iter().chain(&self.out_channels).any(|&c| c == 0) {
            return Err(Error::config("mid_channels", "channel counts must be positive"));
        }
        if self.n_c.len() != self.num_blocks() {
            return Err(Error::config("n_c", format!("{} entries for {} blocks", self.n_c.len(), self.num_blocks())));
        }
        if self.n_c[0] != 1 {
            return Err(Error::config("n_c", "the first block has exactly one bottleneck"));
        }
        if let Some(i) = self.n_c.iter().skip(1).position(|&n| n < 2) {
            return Err(Error::config("n_c", format!("block {} needs at least two bottlenecks", i + 2)));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.num_heads),
            ));
        }
        if self.stem.kernel.is_multiple_of(2) {
            return Err(Error::config("stem.kernel", "must be odd"));
        }
        self.plan(self.input_size).map(|_| ())
    }

    /// Resolves the block schedule for a square input of side `size`.
    pub fn plan(&self, size: usize) -> Result<Plan> {
        let k = self.stem.kernel;
        if size + 2 * (k / 2) < k {
            return Err(Error::config("input_size", format!("{size} is smaller than the stem kernel")));
        }
        let mut hw = conv_out(size, k, self.stem.stride, k / 2);
        if self.stem.pool {
            hw = conv_out(hw, 3, 2, 1);
        }
        let stem_hw = hw;
        if !stem_hw.is_multiple_of(self.patch_stride) {
            return Err(Error::config(
                "input_size",
                format!("stem output {stem_hw}x{stem_hw} is not divisible by patch_stride {}", self.patch_stride),
            ));
        }
        let grid = stem_hw / self.patch_stride;

        let mut blocks = Vec::with_capacity(self.num_blocks());
        let mut cin = self.stem.out_channels;
        let mut index = 0;
        for (stage, &count) in self.blocks_per_stage.iter().enumerate() {
            let (mid, out) = (self.mid_channels[stage], self.out_channels[stage]);
            for b in 0..count {
                index += 1;
                let fusion = self.is_fusion_block(index);
                let n_c = self.n_c[index - 1];
                let slots: Vec<usize> = if n_c == 1 {
                    vec![0]
                } else if fusion {
                    (0..n_c).collect()
                } else {
                    std::iter::once(0).chain(2..n_c).collect()
                };
                let mut bottlenecks = Vec::with_capacity(slots.len());
                for slot in slots {
                    let stride = if slot == 0 && b == 0 && stage > 0 { 2 } else { 1 };
                    let out_hw = conv_out(hw, 3, stride, 1);
                    let role = match slot {
                        0 => Role::Tap,
                        1 => Role::Inject,
                        _ => Role::Plain,
                    };
                    bottlenecks.push(BottleneckPlan {
                        slot,
                        role,
                        in_channels: cin,
                        mid_channels: mid,
                        out_channels: out,
                        stride,
                        in_hw: hw,
                        out_hw,
                    });
                    hw = out_hw;
                    cin = out;
                }
                if self.is_dual() && fusion && !hw.is_multiple_of(grid) && !grid.is_multiple_of(hw) {
                    return Err(Error::config(
                        "input_size",
                        format!(
                            "input {size}: stage c{} map {hw}x{hw} is neither a multiple nor a divisor of the {grid}x{grid} token grid",
                            stage + 2
                        ),
                    ));
                }
                blocks.push(BlockPlan { index, stage, fusion, mid_channels: mid, hw, bottlenecks });
            }
        }
        Ok(Plan { input_size: size, stem_hw, grid, patches: grid * grid, blocks })
    }

    /// Checks that an input side length is usable with these weights.
    pub fn check_input_size(&self, size: usize) -> Result<Plan> {
        if self.positional_embeddings && self.has_transformer() && size != self.input_size {
            return Err(Error::config(
                "input_size",
                format!(
                    "positional embeddings are fixed to {0}x{0} inputs; got {size}x{size}. \
                     Interpolating embeddings is not supported for this model",
                    self.input_size
                ),
            ));
        }
        self.plan(size)
    }
}
