use std::collections::BTreeMap;
use std::path::Path;

use conformer::data::{load_image_folder, synth_shapes};
use conformer::optim::{adamw_step, AdamWConfig};
use conformer::trainer::accuracy;
use conformer::Error;
use conformer_tensor::{PoolKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, w: u32, h: u32, rgb: bool, seed: u8) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(file, w, h);
    let channels = if rgb { 3 } else { 1 };
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = (0..w * h * channels).map(|i| (i as u8).wrapping_mul(seed)).collect();
    enc.write_header().unwrap().write_image_data(&data).unwrap();
}

#[test]
fn folder_classes_are_sorted_by_name() {
    let dir = tempfile::tempdir().unwrap();
    for (class, seed) in [("b", 3u8), ("a", 5)] {
        let d = dir.path().join(class);
        std::fs::create_dir(&d).unwrap();
        for i in 0..3 {
            write_png(&d.join(format!("{i}.png")), 8, 8, i != 1, seed + i);
        }
    }
    let ds = load_image_folder(dir.path()).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(ds.class_names, vec!["a", "b"]);
    assert_eq!(ds.images.shape(), &[6, 3, 8, 8]);
    // grayscale files are replicated over the three channels
    let img = ds.images.narrow(0, 1, 1).unwrap();
    assert_eq!(img.narrow(1, 0, 1).unwrap().data(), img.narrow(1, 2, 1).unwrap().data());
}

#[test]
fn empty_class_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    std::fs::create_dir(dir.path().join("b")).unwrap();
    write_png(&dir.path().join("a/0.png"), 4, 4, true, 1);
    assert!(matches!(load_image_folder(dir.path()), Err(Error::Data(_))));
}

#[test]
fn non_square_and_mixed_sizes_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    write_png(&dir.path().join("a/0.png"), 4, 6, true, 1);
    assert!(matches!(load_image_folder(dir.path()), Err(Error::Data(_))));

    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    write_png(&dir.path().join("a/0.png"), 4, 4, true, 1);
    write_png(&dir.path().join("a/1.png"), 8, 8, true, 1);
    assert!(matches!(load_image_folder(dir.path()), Err(Error::Data(_))));
}

#[test]
fn generator_is_deterministic() {
    let a = synth_shapes(4, 64, 64, 7, "train").unwrap();
    assert_eq!(a, synth_shapes(4, 64, 64, 7, "train").unwrap());
}

/// Two conv layers with pooling, then a linear readout, trained briefly. If
/// this cannot separate the classes the generator is broken.
#[test]
fn two_layer_probe_separates_the_shapes() {
    let train = synth_shapes(4, 64, 2048, 11, "train").unwrap();
    let test = synth_shapes(4, 64, 256, 11, "test").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = |shape: &[usize], fan_in: usize| {
        let s = (2.0 / fan_in as f32).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-s..s))
    };
    let mut params: BTreeMap<&'static str, Tensor<f32>> = BTreeMap::new();
    params.insert("c1", init(&[16, 3, 7, 7], 147));
    params.insert("b1", Tensor::zeros([16]));
    params.insert("c2", init(&[32, 16, 5, 5], 400));
    params.insert("b2", Tensor::zeros([32]));
    params.insert("fc", init(&[4, 32], 32));
    params.insert("fb", Tensor::zeros([4]));
    let forward = |p: &BTreeMap<&'static str, Tensor<f32>>, x: Tensor<f32>, labels: Option<&[usize]>| {
        let tape = Tape::new();
        let v: BTreeMap<&'static str, _> =
            p.iter().map(|(k, t)| (*k, tape.leaf(t.clone(), labels.is_some()))).collect();
        let x = tape.constant(x);
        let h = tape.relu(tape.conv2d(x, v["c1"], Some(v["b1"]), 2, 3).unwrap()).unwrap();
        let h = tape.pool2d(h, PoolKind::Max, 3, 2, 1).unwrap();
        let h = tape.relu(tape.conv2d(h, v["c2"], Some(v["b2"]), 1, 2).unwrap()).unwrap();
        let h = tape.pool2d(h, PoolKind::Max, 2, 2, 0).unwrap();
        let h = tape.global_avg_pool(h).unwrap();
        let logits = tape.linear(h, v["fc"], Some(v["fb"])).unwrap();
        let out = tape.value(logits);
        let grads = labels.map(|l| {
            let loss = tape.cross_entropy(logits, l).unwrap();
            let g = tape.backward(loss).unwrap();
            v.iter().map(|(k, &var)| (*k, g.wrt(var))).collect::<BTreeMap<_, _>>()
        });
        (out, grads)
    };
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut moments: BTreeMap<&str, (Vec<f32>, Vec<f32>)> =
        params.iter().map(|(k, t)| (*k, (vec![0.0; t.numel()], vec![0.0; t.numel()]))).collect();
    let mut step = 0;
    for _epoch in 0..12 {
        for b in 0..train.len() / 64 {
            let idx: Vec<usize> = (b * 64..(b + 1) * 64).collect();
            let (x, y) = train.batch(&idx).unwrap();
            let (_, grads) = forward(&params, x, Some(&y));
            step += 1;
            for (k, g) in grads.unwrap() {
                let (m, v) = moments.get_mut(k).unwrap();
                adamw_step(params.get_mut(k).unwrap().data_mut(), g.data(), m, v, step, 3e-3, 0.0, &cfg).unwrap();
            }
        }
    }
    let (logits, _) = forward(&params, test.images.clone(), None);
    let acc = accuracy(&logits, &test.labels);
    assert!(acc >= 0.9, "two-layer probe reached only {acc}");
}
