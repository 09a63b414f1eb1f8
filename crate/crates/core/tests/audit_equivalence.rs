//! The closed-form auditor against models that are actually built.

use conformer::audit::{audit, count_params};
use conformer::config::{ConformerConfig, StemConfig, PRESETS};
use conformer::{Conformer, Sampling, Structure};
use proptest::prelude::*;

#[test]
fn every_preset_counts_match_built_models() {
    for name in PRESETS {
        let cfg = ConformerConfig::preset(name).unwrap();
        for structure in [Structure::Dual, Structure::CnnOnly, Structure::TransformerOnly] {
            let cfg = cfg.degenerate(structure);
            let built = Conformer::new(cfg.clone(), 0).unwrap().num_params() as u64;
            assert_eq!(count_params(&cfg).unwrap(), built, "{name} {structure:?}");
        }
    }
}

#[test]
fn micro_total_by_hand() {
    // stem conv 3·16·49 + bn 32, then the five blocks, heads and FCUs,
    // summed independently from the module table
    let cfg = ConformerConfig::preset("micro").unwrap();
    let report = audit(&cfg, 64).unwrap();
    let stem: u64 = report.modules.iter().filter(|m| m.name == "stem").map(|m| m.params).sum();
    assert_eq!(stem, 3 * 16 * 49 + 2 * 16);
    let block1_trans = 12 * 32 * 32 + 13 * 32;
    let t1: u64 = report.modules.iter().filter(|m| m.name == "trans.c2.b01").map(|m| m.params).sum();
    assert_eq!(t1, block1_trans);
    assert_eq!(report.modules.iter().map(|m| m.params).sum::<u64>(), report.total_params);
}

fn arb_config() -> impl Strategy<Value = ConformerConfig> {
    (
        (prop::sample::select(vec![3usize, 5, 7]), 1usize..3, any::<bool>(), 4usize..17),
        prop::array::uniform4(1usize..3),
        prop::array::uniform4(1usize..5),
        prop::array::uniform4(1usize..9),
        (1usize..5, prop::sample::select(vec![1usize, 2, 4])),
        (
            1usize..4,
            prop::sample::select(vec![Sampling::Avgpool, Sampling::Maxpool, Sampling::Conv, Sampling::Attention]),
        ),
        (
            any::<bool>(),
            2usize..6,
            prop::sample::select(vec![Structure::Dual, Structure::CnnOnly, Structure::TransformerOnly]),
        ),
        prop::collection::vec(2usize..4, 8),
    )
        .prop_map(
            |(stem, blocks, mid, out_mul, (heads, ps), (k, sampling), (pos, classes, structure), n_c_tail)| {
                let num_blocks: usize = blocks.iter().sum();
                let mut n_c = vec![1];
                n_c.extend(n_c_tail.into_iter().take(num_blocks - 1));
                ConformerConfig {
                    input_size: 64,
                    stem: StemConfig { kernel: stem.0, stride: stem.1, pool: stem.2, out_channels: stem.3 },
                    blocks_per_stage: blocks,
                    n_c,
                    mid_channels: mid,
                    out_channels: std::array::from_fn(|i| mid[i] * out_mul[i]),
                    embed_dim: heads * 4,
                    num_heads: heads,
                    patch_stride: ps,
                    fusion_interval: k,
                    sampling,
                    positional_embeddings: pos,
                    num_classes: classes,
                    fcu_activation: true,
                    injection: conformer::Injection::PostNorm,
                    structure,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_configs_count_exactly(cfg in arb_config()) {
        prop_assume!(cfg.validate().is_ok());
        let built = Conformer::new(cfg.clone(), 1).unwrap();
        prop_assert_eq!(count_params(&cfg).unwrap(), built.num_params() as u64);
        let report = audit(&cfg, cfg.input_size).unwrap();
        prop_assert_eq!(report.cnn_params + report.transformer_params, report.total_params);
    }
}
