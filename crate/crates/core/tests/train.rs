use std::collections::HashSet;

use clim::config::{Mode, OptimConfig, Precision, RunConfig, SamplingMode};
use clim::losses::{LossKind, LossWeights};
use clim::mosaic::GridPolicy;
use clim::params::ParamStore;
use clim::synth::{SynthConfig, SynthDataset};
use clim::train::{
    adamw_step, assemble_batch, clip_grad_norm, learning_rate, read_metrics, AdamState, Checkpoint, MetricsRow,
    MetricsWriter, Trainer,
};
use clim_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig {
        precision: Precision::F64,
        canvas_size: 32,
        steps: 6,
        eval_every: 3,
        log_every: 1,
        eval_limit: 6,
        data: SynthConfig {
            image_size: 32,
            train_size: 40,
            eval_size: 8,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    c.vision.width = 16;
    c.vision.depth = 2;
    c.vision.heads = 2;
    c.vision.embed_dim = 8;
    c.text.width = 16;
    c.text.depth = 1;
    c.text.heads = 2;
    c.losses = LossWeights {
        info_nce: 1.0,
        bce_tag: 0.5,
        grounding: 0.5,
        ..LossWeights::default()
    };
    c.validate().unwrap();
    c
}

fn data(c: &RunConfig) -> SynthDataset {
    SynthDataset::generate(c.data_seed, &c.data).unwrap()
}

fn hyper(lr: f64, weight_decay: f64) -> OptimConfig {
    OptimConfig {
        lr,
        weight_decay,
        ..OptimConfig::default()
    }
}

#[test]
fn adamw_matches_a_scalar_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64([2], &[0.5, -1.0]).unwrap(), true);
    store.add("b", Tensor::from_f64([1], &[2.0]).unwrap(), false);
    let mut state = AdamState::new(&store);
    let h = hyper(0.01, 0.1);
    let grads = [[0.3, -2.0, 0.7], [-0.1, 0.4, 0.7]];
    let mut expect = [0.5, -1.0, 2.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (t, g) in grads.iter().enumerate() {
        let slots = vec![
            Some(Tensor::from_f64([2], &g[..2]).unwrap()),
            Some(Tensor::from_f64([1], &g[2..]).unwrap()),
        ];
        adamw_step(&mut store, &slots, &mut state, &h, 0.01);
        for k in 0..3 {
            if k < 2 {
                expect[k] *= 1.0 - 0.01 * 0.1;
            }
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v[k] / (1.0 - 0.999f64.powi(t as i32 + 1));
            expect[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
    }
    let got: Vec<f64> = store.entries().iter().flat_map(|e| e.value.data().to_vec()).collect();
    for (g, e) in got.iter().zip(expect) {
        assert!((g - e).abs() < 1e-14, "{g} vs {e}");
    }
}

#[test]
fn adamw_zero_rate_decay_only_and_missing_gradients() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64([2], &[0.5, -1.0]).unwrap(), true);
    store.add("b", Tensor::from_f64([1], &[2.0]).unwrap(), false);
    let before = store.clone();
    let mut state = AdamState::new(&store);
    let g = vec![Some(Tensor::from_f64([2], &[1.0, 1.0]).unwrap()), None];
    adamw_step(&mut store, &g, &mut state, &hyper(0.0, 0.1), 0.0);
    assert_eq!(store, before);
    assert_eq!(state.v[1].data(), &[0.0]);

    let zero = vec![Some(Tensor::zeros([2])), Some(Tensor::zeros([1]))];
    let mut store = before.clone();
    let mut state = AdamState::new(&store);
    for _ in 0..3 {
        adamw_step(&mut store, &zero, &mut state, &hyper(0.1, 0.5), 0.1);
    }
    let shrink = 0.95f64.powi(3);
    assert!((store.entries()[0].value.data()[0] - 0.5 * shrink).abs() < 1e-15);
    assert!((store.entries()[0].value.data()[1] + shrink).abs() < 1e-15);
    assert_eq!(store.entries()[1].value.data(), &[2.0]);
}

#[test]
fn schedule_and_clipping() {
    let h = OptimConfig {
        lr: 2.0,
        warmup_steps: 4,
        ..OptimConfig::default()
    };
    assert_eq!(
        learning_rate(&h, 0, 100),
        2.0 * 0.25 * 0.5 * (1.0 + (std::f64::consts::PI * 0.0).cos())
    );
    assert!((learning_rate(&h, 50, 100) - 1.0).abs() < 1e-12);
    assert!(learning_rate(&h, 100, 100).abs() < 1e-12);
    let mut g: Vec<Option<Tensor<f64>>> = vec![
        Some(Tensor::from_f64([2], &[3.0, 0.0]).unwrap()),
        None,
        Some(Tensor::from_f64([1], &[4.0]).unwrap()),
    ];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn a_single_pair_batch_has_zero_contrastive_loss() {
    let mut c = tiny_config();
    c.n_plain = 1;
    c.n_mosaic = 0;
    c.losses = LossWeights::only(LossKind::InfoNce);
    let d = data(&c);
    let mut t = Trainer::<f64>::new(c, &d.vocab).unwrap();
    let report = t.train_step(&d).unwrap();
    assert_eq!(report.loss, 0.0);
}

#[test]
fn batch_regions_match_their_source_captions() {
    let mut c = tiny_config();
    c.grid = GridPolicy::Random(vec![1, 2, 3]);
    let d = data(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let b = assemble_batch(&d.train, &c, &mut rng).unwrap();
        let cells: usize = b.grids.iter().map(|g| g.cells()).sum();
        assert_eq!(b.regions.len(), c.n_plain + cells);
        assert_eq!(b.images.len(), c.n_plain + c.n_mosaic);
        assert_eq!(b.texts.iter().collect::<HashSet<_>>().len(), b.texts.len());
        for r in &b.regions {
            assert_eq!(b.texts[r.text], d.train[r.source].tokens);
            assert_eq!(r.tags, d.train[r.source].tags);
            assert!(r.bbox.contains(&r.tag_box, 1e-9));
        }
        for comp in &b.composed {
            assert!(comp.members.len() >= 2);
            let texts: HashSet<usize> = comp.members.iter().map(|&m| b.regions[m].text).collect();
            assert_eq!(texts, comp.texts.iter().copied().collect());
            for &m in &comp.members {
                assert_eq!(b.regions[m].image, comp.image);
                assert!(comp.bbox.contains(&b.regions[m].bbox, 1e-9));
            }
        }
    }
}

#[test]
fn baseline_batches_hold_only_plain_images() {
    let mut c = tiny_config();
    c.mode = Mode::Baseline;
    let d = data(&c);
    let b = assemble_batch(&d.train, &c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(
        (b.n_plain, b.grids.len(), b.composed.len()),
        (c.n_plain + c.n_mosaic, 0, 0)
    );
}

#[test]
fn similarity_sampling_builds_full_mosaics() {
    for mode in [SamplingMode::TextSimilarity, SamplingMode::ImageSimilarity] {
        let mut c = tiny_config();
        c.sampling = mode;
        c.similarity_pool = 40;
        let d = data(&c);
        let mut t = Trainer::<f64>::new(c.clone(), &d.vocab).unwrap();
        let b = t.next_batch(&d).unwrap();
        let cells: usize = b.grids.iter().map(|g| g.cells()).sum();
        assert_eq!(b.regions.len(), c.n_plain + cells);
        let mosaic = &b.regions[b.n_plain..];
        let sources: HashSet<usize> = mosaic.iter().map(|r| r.source).collect();
        assert_eq!(sources.len(), mosaic.len());
        t.step_on(&b).unwrap();
    }
}

fn run_rows(c: &RunConfig, d: &SynthDataset) -> (Vec<MetricsRow>, Trainer<f64>) {
    let mut t = Trainer::<f64>::new(c.clone(), &d.vocab).unwrap();
    let mut rows = Vec::new();
    t.fit(d, c.steps, |r| {
        rows.push(r.clone());
        Ok(())
    })
    .unwrap();
    (rows, t)
}

#[test]
fn seeded_runs_are_identical() {
    let c = tiny_config();
    let d = data(&c);
    let (a, ta) = run_rows(&c, &d);
    let (b, tb) = run_rows(&c, &d);
    assert_eq!(a, b);
    assert_eq!(ta.model.store, tb.model.store);
    assert_eq!(a.len(), 6);
    assert!(a[2].top1_all.is_some() && a[1].top1_all.is_none());
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(run_rows(&other, &d).0, a);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    let c = tiny_config();
    let d = data(&c);
    let (full_rows, full) = run_rows(&c, &d);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::<f64>::new(c.clone(), &d.vocab).unwrap();
    let mut rows = Vec::new();
    first
        .fit(&d, 4, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
    let path = dir.path().join("ckpt.bin");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f64>::load(&path).unwrap(), &d.vocab).unwrap();
    assert_eq!(resumed.step, 4);
    resumed
        .fit(&d, c.steps, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(rows, full_rows);
    assert_eq!(resumed.model.store, full.model.store);
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn metrics_files_round_trip() {
    let c = tiny_config();
    let d = data(&c);
    let (rows, _) = run_rows(&c, &d);
    let dir = tempfile::tempdir().unwrap();
    {
        let mut w = MetricsWriter::open(dir.path(), false).unwrap();
        for r in &rows[..3] {
            w.write(r, 0.5).unwrap();
        }
    }
    {
        let mut w = MetricsWriter::open(dir.path(), true).unwrap();
        for r in &rows[3..] {
            w.write(r, 0.5).unwrap();
        }
    }
    let back = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.abs().max(1.0));
        assert_eq!(a.top1_all.is_some(), b.top1_all.is_some());
    }
    let timing = std::fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), rows.len() + 1);
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_rejected() {
    let c = tiny_config();
    let d = data(&c);
    let t = Trainer::<f64>::new(c.clone(), &d.vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    t.checkpoint().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5a;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::<f64>::load(&path).is_err());
    assert!(Checkpoint::<f64>::load(&dir.path().join("missing.bin")).is_err());

    let mut ck = t.checkpoint();
    ck.config.vision.width = 32;
    ck.config.vision.heads = 2;
    assert!(Trainer::from_checkpoint(ck, &d.vocab).is_err());
}
