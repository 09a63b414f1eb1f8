#![allow(clippy::needless_range_loop)]

use conformer::viz::{
    attention_rollout, cam, cam_raw, encode_png, export_feature_maps, rollout_from_pass, rollout_matrices, Colormap,
};
use conformer::{Conformer, ConformerConfig, Error, ForwardOptions};
use conformer_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> Conformer {
    Conformer::new(ConformerConfig::preset("micro").unwrap(), 21).unwrap()
}

fn image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, size, size], |_| rng.gen_range(-2.0..2.0))
}

/// Random row-softmaxed `[heads, t, t]` attention.
fn random_attention(rng: &mut ChaCha8Rng, heads: usize, t: usize) -> Tensor<f32> {
    let mut data: Vec<f32> = (0..heads * t * t).map(|_| rng.gen_range(-3.0f32..3.0).exp()).collect();
    for row in data.chunks_mut(t) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new([heads, t, t], data).unwrap()
}

proptest! {
    #[test]
    fn rollout_rows_stay_stochastic(seed in any::<u64>(), heads in 1usize..5, t in 2usize..10, depth in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn: Vec<_> = (0..depth).map(|_| random_attention(&mut rng, heads, t)).collect();
        for joint in rollout_matrices(&attn).unwrap() {
            for row in joint.data().chunks(t) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn cam_peak_ignores_positive_scaling(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn([6, 4, 4], |_| rng.gen_range(-1.0f32..1.0));
        let w: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let scaled: Vec<f32> = w.iter().map(|v| v * scale).collect();
        let argmax = |v: &[f32]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
        let a = cam_raw(&f, &w).unwrap();
        let b = cam_raw(&f, &scaled).unwrap();
        if a.iter().any(|&v| v > 1e-3) {
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}

#[test]
fn two_block_rollout_matches_a_hand_product() {
    // two heads, three tokens
    let a1 = Tensor::new(
        [2, 3, 3],
        vec![
            1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5, //
            0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 0.6, 0.2, 0.2,
        ],
    )
    .unwrap();
    let a2 = Tensor::new(
        [2, 3, 3],
        vec![
            0.2, 0.2, 0.6, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, //
            0.4, 0.4, 0.2, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5,
        ],
    )
    .unwrap();
    let prep = |a: &Tensor<f32>| -> [[f64; 3]; 3] {
        let d = a.data();
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (d[i * 3 + j] as f64 + d[9 + i * 3 + j] as f64) / 2.0 + if i == j { 1.0 } else { 0.0 };
            }
            let s: f64 = m[i].iter().sum();
            m[i].iter_mut().for_each(|v| *v /= s);
        }
        m
    };
    let (m1, m2) = (prep(&a1), prep(&a2));
    let joint = rollout_matrices(&[a1, a2]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((joint[0].data()[i * 3 + j] - m1[i][j]).abs() <= 1e-6);
            let want: f64 = (0..3).map(|k| m2[i][k] * m1[k][j]).sum();
            assert!((joint[1].data()[i * 3 + j] - want).abs() <= 1e-6, "({i},{j})");
        }
    }
}

#[test]
fn rollout_without_taps_is_a_contract_error() {
    let model = micro();
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let x = tape.constant(image(64, 1).reshape([1, 3, 64, 64]).unwrap());
    let pass = model.forward_on(&tape, &vars, x, ForwardOptions { train: false, taps: false }).unwrap();
    assert!(matches!(rollout_from_pass(&tape, &pass), Err(Error::Contract(_))));
}

#[test]
fn maps_cover_the_input_and_stay_in_unit_range() {
    let model = micro();
    let x = image(64, 2);
    for map in [cam(&model, &x, 1).unwrap(), attention_rollout(&model, &x).unwrap()] {
        assert_eq!((map.height, map.width), (64, 64));
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)), "{}", map.tag);
    }
    assert!(cam(&model, &x, 4).is_err());
}

#[test]
fn small_model_feature_maps_have_the_stage_grids() {
    let model = micro();
    let x = image(64, 3);
    let one = |sel: &str| export_feature_maps(&model, &x, sel).unwrap().remove(0);
    assert_eq!(one("stem").raw.shape()[2..], [16, 16]);
    assert_eq!(one("c5").raw.shape()[2..], [2, 2]);
    assert_eq!(one("trans.final").raw.shape()[1], 1 + 16);
    // every block contributes a CNN map and a token map
    let all = export_feature_maps(&model, &x, "all").unwrap();
    assert_eq!(all.len(), 2 * model.config.plan(64).unwrap().blocks.len());
    assert!(export_feature_maps(&micro(), &image(64, 3), "c9").is_err());
}

#[test]
fn full_size_feature_maps_have_the_stage_grids() {
    let model = Conformer::new(ConformerConfig::preset("conformer_s").unwrap(), 0).unwrap();
    let x = image(224, 4);
    let c5 = export_feature_maps(&model, &x, "c5").unwrap().remove(0);
    assert_eq!(c5.raw.shape()[2..], [7, 7]);
    assert_eq!((c5.heatmap.height, c5.heatmap.width), (224, 224));
    // nearest upsampling: each 32×32 cell is constant
    assert_eq!(c5.heatmap.at(0, 0), c5.heatmap.at(31, 31));
    let t = export_feature_maps(&model, &x, "trans.final").unwrap().remove(0);
    assert_eq!(t.raw.shape()[1], 1 + 14 * 14);
    assert_eq!(t.heatmap.at(0, 0), t.heatmap.at(15, 15));
}

#[test]
fn rendering_is_byte_identical_across_invocations() {
    let x = image(64, 5);
    let render = || {
        let map = cam(&micro(), &x, 0).unwrap();
        (encode_png(&map, Colormap::Viridis, Some(&x)).unwrap(), encode_png(&map, Colormap::Gray, None).unwrap())
    };
    let (a, b) = (render(), render());
    assert_eq!(a, b);
    assert_eq!(&a.0[1..4], b"PNG");
}
