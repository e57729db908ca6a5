use std::fs;

use pixmatch::inference::{run_sequence, MaskResolution};
use pixmatch::io::dataset::{read_dataset, write_sequence};
use pixmatch::model::Pass;
use pixmatch::synth::{gen_corpus, CorpusConfig, Motion};
use pixmatch::{build_model, gaussian_init, Graph, ModelConfig, SegmentationMask, Tensor, Variant, VideoSequence};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig { height: 32, width: 32, embed_dim: 8, variant, embed_channels: vec![8, 8, 8], init_std: 0.1, ..ModelConfig::default() }
}

fn frames(n: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..n).map(|i| gaussian_init([3, 32, 32], 0.3, seed + i as u64).unwrap()).collect()
}

#[test]
fn every_variant_has_finite_gradients_and_quarter_offsets() {
    let expected = [
        (Variant::Deform, 3),
        (Variant::Conv(1), 0),
        (Variant::Conv(3), 0),
        (Variant::Conv(5), 0),
        (Variant::Dilation(3), 0),
        (Variant::Dilation(9), 0),
    ];
    for (variant, offset_convs) in expected {
        let p = build_model(&small(variant)).unwrap();
        assert_eq!(p.offset_conv_count(), offset_convs, "{variant}");

        let f = frames(2, 11);
        let batch = |t: &Tensor<f32>| Tensor::new([1, 3, 32, 32], t.data().to_vec()).unwrap();
        let mut g = Graph::new();
        let (rv, tv) = (g.input(batch(&f[0])), g.input(batch(&f[1])));
        let out = p.forward_train(&mut g, rv, tv, &mut Pass::train()).unwrap();
        assert_eq!(g.value(out.offsets).shape(), &[1, 2, 8, 8], "{variant}");
        let l = g.reconstruction_loss(out.prediction, out.target).unwrap();
        g.backward(l).unwrap();
        for (name, kind, _) in p.named_tensors() {
            if kind.trainable() {
                let grad = g.param_grad(&name).unwrap_or_else(|| panic!("{variant}: no grad for {name}"));
                assert!(grad.data().iter().all(|v| v.is_finite()), "{variant}: {name}");
            }
        }
    }
}

#[test]
fn inference_leaves_parameters_alone() {
    let p = build_model(&small(Variant::Deform)).unwrap();
    let before: Vec<Vec<f32>> = p.named_tensors().iter().map(|(_, _, t)| t.data().to_vec()).collect();
    let video = VideoSequence::new("v", frames(4, 3)).unwrap();
    let first = SegmentationMask::from_fn(32, 32, |y, x| u8::from(y > 10 && x < 20));
    run_sequence(&p, &video, &first, MaskResolution::Quarter).unwrap();
    let after: Vec<Vec<f32>> = p.named_tensors().iter().map(|(_, _, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn masks_depend_only_on_past_frames() {
    let p = build_model(&small(Variant::Deform)).unwrap();
    let clean = frames(5, 21);
    let first = SegmentationMask::from_fn(32, 32, |y, x| if y < 12 { 1 } else if x > 20 { 2 } else { 0 });
    for res in [MaskResolution::Quarter, MaskResolution::Full] {
        let base = run_sequence(&p, &VideoSequence::new("v", clean.clone()).unwrap(), &first, res).unwrap();
        for t in 0..4 {
            let mut corrupted = clean.clone();
            corrupted[t + 1] = gaussian_init([3, 32, 32], 5.0, 999 + t as u64).unwrap();
            let out = run_sequence(&p, &VideoSequence::new("v", corrupted).unwrap(), &first, res).unwrap();
            assert_eq!(out[..=t], base[..=t], "{res:?} t={t}");
        }
    }
}

#[test]
fn dataset_reader_ignores_unrelated_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig { height: 32, width: 32, frames: 3, motion: Motion::Slow, min_size: 8.0, max_size: 12.0, ..CorpusConfig::default() };
    let data = gen_corpus(&cfg, 2, 4).unwrap();
    for s in &data {
        write_sequence(tmp.path(), s).unwrap();
    }
    let clean = read_dataset(tmp.path()).unwrap();
    fs::write(tmp.path().join("README"), "notes").unwrap();
    fs::create_dir(tmp.path().join("scratch")).unwrap();
    let seq = tmp.path().join(&data[0].name);
    fs::write(seq.join("frames/thumbs.db"), "x").unwrap();
    fs::write(seq.join("masks/00000.txt"), "x").unwrap();
    fs::write(seq.join("notes.md"), "x").unwrap();

    let read = read_dataset(tmp.path()).unwrap();
    assert_eq!(read.len(), 2);
    assert_eq!(read, clean);
    assert_eq!(read[0].masks, data[0].masks);
}
