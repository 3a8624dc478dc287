use clim::encoders::{ResAttnBlock, TextConfig, TextEncoder, VisionConfig, VisionEncoder, VisionPaths};
use clim::image::Image;
use clim::params::{Bound, ParamStore};
use clim::synth::Vocabulary;
use clim_tensor::gradcheck::{check_gradients, GradCheck};
use clim_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 16;

fn block(seed: u64) -> (ParamStore<f64>, ResAttnBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = ResAttnBlock::new(&mut store, "b", WIDTH, 4, 2, 2, &mut rng);
    // Non-trivial gains and biases so every parameter matters.
    for e in store.entries_mut() {
        if !e.decay {
            e.value = Tensor::uniform(e.value.shape().to_vec(), 0.5, 1.5, &mut rng);
        }
    }
    (store, b)
}

fn tokens(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn([n, WIDTH], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_raw(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn modified_block_is_local_bit_exactly() {
    let (store, b) = block(1);
    let x = tokens(9, 2);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let base = b.forward_modified(&p, tape.constant(x.clone())).unwrap().to_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for j in 0..9 {
        let mut data = x.data().to_vec();
        for v in &mut data[j * WIDTH..(j + 1) * WIDTH] {
            *v += rng.random_range(-1.0..1.0);
        }
        let moved = b
            .forward_modified(&p, tape.constant(Tensor::new([9, WIDTH], data).unwrap()))
            .unwrap()
            .to_tensor();
        for i in 0..9 {
            let same = base.row(i) == moved.row(i);
            assert_eq!(same, i != j, "token {i} after perturbing {j}");
        }
    }
}

#[test]
fn modified_block_matches_per_token_recomputation() {
    let (store, b) = block(4);
    let x = tokens(7, 5);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let all = b.forward_modified(&p, tape.constant(x.clone())).unwrap().to_tensor();
    for i in 0..7 {
        let single = Tensor::new([1, WIDTH], x.row(i).to_vec()).unwrap();
        let one = b.forward_modified(&p, tape.constant(single)).unwrap().to_tensor();
        assert_eq!(one.row(0), all.row(i));
    }
}

#[test]
fn modified_block_with_zero_proj_and_ffn_is_identity() {
    let (mut store, b) = block(6);
    for id in [b.proj.w, b.fc_2.w]
        .into_iter()
        .chain([b.proj.b, b.fc_2.b].into_iter().flatten())
    {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = tokens(5, 7);
    let tape = Tape::new();
    let out = b
        .forward_modified(&store.bind_frozen(&tape), tape.constant(x.clone()))
        .unwrap()
        .to_tensor();
    assert_eq!(out.data(), x.data());
}

#[test]
fn standard_block_on_one_token_equals_the_modified_block() {
    let (store, b) = block(8);
    let x = tokens(1, 9);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let standard = b.forward(&p, tape.constant(x.clone()), 1, 1, None).unwrap().to_tensor();
    let modified = b.forward_modified(&p, tape.constant(x)).unwrap().to_tensor();
    for (s, m) in standard.data().iter().zip(modified.data()) {
        assert!((s - m).abs() < 1e-12);
    }
}

#[test]
fn standard_block_is_permutation_equivariant() {
    let (store, b) = block(10);
    let x = tokens(6, 11);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let out = b.forward(&p, tape.constant(x.clone()), 1, 6, None).unwrap().to_tensor();
    let xp = tape.constant(x).gather_rows(&perm).unwrap();
    let outp = b.forward(&p, xp, 1, 6, None).unwrap().to_tensor();
    for (k, &src) in perm.iter().enumerate() {
        for (a, c) in outp.row(k).iter().zip(out.row(src)) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn fused_forward_matches_both_variants() {
    let (store, b) = block(12);
    let x = tokens(10, 13);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let xv = tape.constant(x);
    let (s, m) = b.forward_both(&p, xv, 2, 5).unwrap();
    assert_eq!(s.to_tensor(), b.forward(&p, xv, 2, 5, None).unwrap().to_tensor());
    assert_eq!(m.to_tensor(), b.forward_modified(&p, xv).unwrap().to_tensor());
}

#[test]
fn block_gradients_match_finite_differences() {
    let (store, b) = block(14);
    let mut inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
    inputs.push(tokens(4, 15));
    let n = store.len();
    for modified in [false, true] {
        let report = check_gradients(
            &inputs,
            |_, v| {
                let p = Bound::from_vars(v[..n].to_vec());
                Ok(if modified {
                    b.forward_modified(&p, v[n])
                } else {
                    b.forward(&p, v[n], 1, 4, None)
                }
                .expect("block forward"))
            },
            &GradCheck {
                samples: 60,
                ..GradCheck::default()
            },
            &mut ChaCha8Rng::seed_from_u64(16),
        )
        .unwrap();
        assert!(report.checked >= 20);
        assert!(report.max_rel_err < 1e-4, "modified = {modified}: {report:?}");
    }
}

fn small_vision() -> VisionConfig {
    VisionConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        width: WIDTH,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
    }
}

#[test]
fn vision_encoder_shapes_and_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f64>::new();
    let enc = VisionEncoder::new(small_vision(), &mut store, &mut rng).unwrap();
    let imgs = [random_image(16, &mut rng), random_image(16, &mut rng)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let tape = Tape::new();
    let out = enc
        .forward(&store.bind_frozen(&tape), &refs, VisionPaths::Both)
        .unwrap();
    let global = out.global.unwrap().to_tensor();
    assert_eq!(global.shape(), &[2, 8]);
    for i in 0..2 {
        assert!((global.row(i).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let dense = out.dense.unwrap();
    assert_eq!((dense.batch, dense.h, dense.w, dense.stride), (2, 4, 4, 4.0));
    assert_eq!(dense.features.shape(), vec![2 * 16, 8]);
    let only = enc
        .forward(&store.bind_frozen(&tape), &refs, VisionPaths::Dense)
        .unwrap();
    assert!(only.global.is_none());
    assert_eq!(only.dense.unwrap().features.to_tensor(), dense.features.to_tensor());
    assert!(enc
        .forward(&store.bind_frozen(&tape), &[&Image::new(8, 8)], VisionPaths::Both)
        .is_err());
}

#[test]
fn depth_one_dense_features_change_only_at_the_edited_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut store = ParamStore::<f64>::new();
    let config = VisionConfig {
        depth: 1,
        ..small_vision()
    };
    let enc = VisionEncoder::new(config, &mut store, &mut rng).unwrap();
    let a = random_image(16, &mut rng);
    let mut b = a.clone();
    // Patch (row 2, col 1) covers pixels x in 4..8, y in 8..12.
    b.set_pixel(5, 9, [1.0, 0.0, 0.25]);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let fa = enc
        .forward(&p, &[&a], VisionPaths::Dense)
        .unwrap()
        .dense
        .unwrap()
        .features
        .to_tensor();
    let fb = enc
        .forward(&p, &[&b], VisionPaths::Dense)
        .unwrap()
        .dense
        .unwrap()
        .features
        .to_tensor();
    for cell in 0..16 {
        assert_eq!(fa.row(cell) == fb.row(cell), cell != 2 * 4 + 1, "cell {cell}");
    }
}

#[test]
fn vision_encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::<f64>::new();
    let enc = VisionEncoder::new(small_vision(), &mut store, &mut rng).unwrap();
    let imgs = [random_image(16, &mut rng), random_image(16, &mut rng)];
    let inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
    for paths in [VisionPaths::Global, VisionPaths::Dense] {
        let report = check_gradients(
            &inputs,
            |_, v| {
                let p = Bound::from_vars(v.to_vec());
                let out = enc.forward(&p, &[&imgs[0], &imgs[1]], paths).expect("vision forward");
                Ok(match paths {
                    VisionPaths::Dense => out.dense.expect("dense").normalized().expect("normalize"),
                    _ => out.global.expect("global"),
                })
            },
            &GradCheck {
                samples: 60,
                ..GradCheck::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(report.checked >= 20);
        assert!(report.max_rel_err < 1e-4, "{paths:?}: {report:?}");
    }
}

fn text_setup(seed: u64) -> (ParamStore<f64>, TextEncoder, Vocabulary) {
    let vocab = Vocabulary::new(12);
    let config = TextConfig {
        vocab_size: vocab.len(),
        width: WIDTH,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
        ..TextConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, enc, vocab)
}

#[test]
fn text_encoder_is_deterministic_and_unit_norm() {
    let (store, enc, vocab) = text_setup(20);
    let seqs: Vec<Vec<usize>> = [
        "a red circle",
        "a blue ring and a green cross",
        "a photo of a red circle",
        "",
    ]
    .iter()
    .map(|c| vocab.tokenize(c).unwrap())
    .collect();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let out = enc.forward(&p, &seqs, Vocabulary::END).unwrap().pooled.to_tensor();
    let again = enc.forward(&p, &seqs, Vocabulary::END).unwrap().pooled.to_tensor();
    assert_eq!(out, again);
    for i in 0..seqs.len() {
        assert!((out.row(i).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // Batching does not change a sequence's embedding.
    let alone = enc
        .forward(&p, &seqs[1..2], Vocabulary::END)
        .unwrap()
        .pooled
        .to_tensor();
    for (a, b) in alone.row(0).iter().zip(out.row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn text_encoder_is_causal() {
    let (store, enc, vocab) = text_setup(21);
    let a = vocab.tokenize("a red circle").unwrap();
    let b = vocab.tokenize("a red circle and a blue square").unwrap();
    let tape = Tape::new();
    let out = enc
        .forward(&store.bind_frozen(&tape), &[a.clone(), b], Vocabulary::END)
        .unwrap();
    let tokens = out.tokens.to_tensor();
    // Positions up to the last shared word see identical prefixes.
    let shared = a.iter().position(|&t| t == Vocabulary::END).unwrap();
    for pos in 0..shared {
        assert_eq!(tokens.row(pos), tokens.row(a.len() + pos));
    }
}

#[test]
fn text_encoder_rejects_malformed_sequences() {
    let (store, enc, vocab) = text_setup(22);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let mut no_end = vocab.tokenize("a red circle").unwrap();
    no_end.iter_mut().for_each(|t| {
        if *t == Vocabulary::END {
            *t = Vocabulary::PAD
        }
    });
    assert!(enc.forward(&p, &[no_end], Vocabulary::END).is_err());
    assert!(enc.forward(&p, &[vec![Vocabulary::END; 3]], Vocabulary::END).is_err());
    let mut unknown = vocab.tokenize("a red circle").unwrap();
    unknown[1] = vocab.len();
    assert!(enc.forward(&p, &[unknown], Vocabulary::END).is_err());
    assert!(enc.forward(&p, &[], Vocabulary::END).is_err());
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    let (store, enc, vocab) = text_setup(23);
    let seqs: Vec<Vec<usize>> = ["a red circle", "a photo of a blue ring"]
        .iter()
        .map(|c| vocab.tokenize(c).unwrap())
        .collect();
    let inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
    let report = check_gradients(
        &inputs,
        |_, v| {
            let p = Bound::from_vars(v.to_vec());
            Ok(enc.forward(&p, &seqs, Vocabulary::END).expect("text forward").pooled)
        },
        &GradCheck {
            samples: 60,
            ..GradCheck::default()
        },
        &mut ChaCha8Rng::seed_from_u64(24),
    )
    .unwrap();
    assert!(report.checked >= 20);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
