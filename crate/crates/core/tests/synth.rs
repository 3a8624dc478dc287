use std::collections::HashSet;

use clim::synth::{
    class_prompts, generate_sample, parse_caption, sample_rng, Concept, Split, SplitPolicy, SynthConfig, SynthDataset,
    Vocabulary,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generation_is_reproducible() {
    let cfg = SynthConfig::default();
    for i in 0..20 {
        let a = generate_sample(&mut sample_rng(9, i, SplitPolicy::Eval), SplitPolicy::Eval, &cfg);
        let b = generate_sample(&mut sample_rng(9, i, SplitPolicy::Eval), SplitPolicy::Eval, &cfg);
        assert_eq!(a, b);
    }
}

#[test]
fn training_draws_never_contain_novel_concepts() {
    let cfg = SynthConfig {
        image_size: 16,
        object_size: [0.3, 0.45],
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let s = generate_sample(&mut rng, SplitPolicy::Train, &cfg);
        for c in parse_caption(&s.caption).unwrap() {
            assert_eq!(c.split(), Split::Base, "{}", s.caption);
            seen.insert(c);
        }
        assert!(s.objects.iter().all(|o| o.concept.split() == Split::Base));
    }
    assert_eq!(seen.len(), Concept::base().len());
}

#[test]
fn captions_tags_and_objects_agree() {
    let cfg = SynthConfig::default();
    let vocab = Vocabulary::new(cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let s = generate_sample(&mut rng, SplitPolicy::Eval, &cfg);
        let concepts: Vec<Concept> = s.objects.iter().map(|o| o.concept).collect();
        assert!(!concepts.is_empty() && concepts.len() <= cfg.max_objects);
        assert_eq!(parse_caption(&s.caption).unwrap(), concepts);
        assert_eq!(s.tags, concepts.iter().map(|c| c.id()).collect::<Vec<_>>());
        assert_eq!(vocab.detokenize(&s.tokens).unwrap(), s.caption);
    }
}

#[test]
fn object_boxes_enclose_their_shape_pixels() {
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let s = generate_sample(&mut rng, SplitPolicy::Eval, &cfg);
        let n = cfg.image_size;
        for (k, obj) in s.objects.iter().enumerate() {
            let rgb = obj.concept.color.rgb();
            // Pixels of this object's color, attributed to the nearest box.
            let dist = |b: &clim::mosaic::BBox, x: f64, y: f64| {
                let dx = (b.x0 - x).max(x - b.x1).max(0.0);
                let dy = (b.y0 - y).max(y - b.y1).max(0.0);
                dx.max(dy)
            };
            let (mut total, mut inside) = (0usize, 0usize);
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for y in 0..n {
                for x in 0..n {
                    if s.image.pixel(x, y) != rgb {
                        continue;
                    }
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let nearest = s
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|(_, o)| o.concept.color == obj.concept.color)
                        .min_by(|a, b| dist(&a.1.bbox, cx, cy).total_cmp(&dist(&b.1.bbox, cx, cy)))
                        .unwrap()
                        .0;
                    if nearest != k {
                        continue;
                    }
                    total += 1;
                    if dist(&obj.bbox, cx, cy) == 0.0 {
                        inside += 1;
                        x0 = x0.min(x as f64);
                        y0 = y0.min(y as f64);
                        x1 = x1.max(x as f64 + 1.0);
                        y1 = y1.max(y as f64 + 1.0);
                    }
                }
            }
            assert!(total > 0);
            assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
            let b = &obj.bbox;
            let margin = (x0 - b.x0).max(y0 - b.y0).max(b.x1 - x1).max(b.y1 - y1);
            assert!(margin <= 2.0, "margin {margin} for {:?}", obj.bbox);
        }
    }
}

#[test]
fn tokenization_round_trips_every_template_caption() {
    let vocab = Vocabulary::new(SynthConfig::default().max_len);
    let concepts: Vec<Concept> = Concept::all().collect();
    let mut count = 0;
    for a in &concepts {
        let one = clim::synth::caption_for(&[*a]);
        assert_eq!(vocab.detokenize(&vocab.tokenize(&one).unwrap()).unwrap(), one);
        for b in &concepts {
            let two = clim::synth::caption_for(&[*a, *b]);
            let ids = vocab.tokenize(&two).unwrap();
            assert_eq!(ids.len(), vocab.max_len());
            assert_eq!(vocab.detokenize(&ids).unwrap(), two);
            count += 1;
        }
    }
    assert_eq!(count, 1600);
}

#[test]
fn empty_and_invalid_captions() {
    let vocab = Vocabulary::new(12);
    let ids = vocab.tokenize("").unwrap();
    assert_eq!(&ids[..2], &[Vocabulary::START, Vocabulary::END]);
    assert!(ids[2..].iter().all(|&t| t == Vocabulary::PAD));
    let err = vocab.tokenize("a purple circle").unwrap_err();
    assert!(err.to_string().contains("purple"));
    assert!(vocab.tokenize("<end>").is_err());
    assert!(Vocabulary::new(4).tokenize("a red circle").is_err());
}

#[test]
fn class_prompts_cover_all_concepts() {
    let vocab = Vocabulary::new(12);
    let concepts: Vec<Concept> = Concept::all().collect();
    let prompts = class_prompts(&vocab, &concepts).unwrap();
    assert_eq!(prompts.len(), 40);
    assert_eq!(prompts.iter().collect::<HashSet<_>>().len(), 40);
    assert_eq!(
        vocab.detokenize(&prompts[0]).unwrap(),
        format!("a photo of a {}", concepts[0])
    );
}

#[test]
fn cache_round_trip_and_stale_manifest() {
    let cfg = SynthConfig {
        image_size: 24,
        train_size: 12,
        eval_size: 5,
        ..SynthConfig::default()
    };
    let ds = SynthDataset::generate(4, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_cache(dir.path()).unwrap();
    let back = SynthDataset::read_cache(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.eval, ds.eval);
    assert_eq!(back.config_hash(), ds.config_hash());
    // Regeneration from the same seed reproduces the cache.
    assert_eq!(SynthDataset::generate(4, &cfg).unwrap().train, back.train);

    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"seed\": 4", "\"seed\": 5");
    std::fs::write(&path, text).unwrap();
    assert!(SynthDataset::read_cache(dir.path()).is_err());
}
