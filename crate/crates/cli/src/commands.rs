//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clim::config::Precision;
use clim::eval::{
    cell_accuracy, eval_zero_shot_region, heatmap as response_map, localization_mosaics, mosaic_localization, palette,
    per_pixel_classify as classify_cells, to_canvas,
};
use clim::image::Image;
use clim::mosaic::{
    build_mosaic, cell_box, plan_grid, verify_composed, verify_tiling, BBox, CellBlock, ComposedRegion, GridSpec,
    SourcePair,
};
use clim::synth::{class_prompts, config_hash, Concept, Manifest, SynthObject, Vocabulary};
use clim::train::{draw_indices, peek_precision, Checkpoint, MetricsWriter, Model, Trainer};
use clim::{Error, Result, RunConfig};
use clim_tensor::Real;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::paths::{check_data_dir, dataset, fresh_run_dir, load_config, prepare_dir, write_json};
use crate::{ConfigArgs, ImageSource};

pub const CHECKPOINT: &str = "checkpoint.bin";
const DEFAULT_ROOT: &str = "runs";

/// Writes to stdout. A reader that closed the pipe early (`| head`) ends
/// the process quietly instead of panicking.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        warn!("writing to stdout: {e}");
    }
}

fn resolve_root(cli: Option<&Path>, from_file: Option<PathBuf>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or(from_file)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

pub fn generate_data(root: Option<&Path>, args: &ConfigArgs, out: Option<PathBuf>, force: bool) -> Result<()> {
    let loaded = load_config(args)?;
    let config = loaded.config;
    let hash = config_hash(config.data_seed, &config.data);
    let dir = out
        .or(loaded.paths.data)
        .unwrap_or_else(|| resolve_root(root, loaded.paths.runs).join(format!("data-{}", &hash[..12])));
    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() {
        let existing: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if existing.config_hash == hash && !force {
            info!("{} is up to date", dir.display());
            emit(&format!("{}\n", dir.display()));
            return Ok(());
        }
        if existing.config_hash != hash && !force {
            return Err(Error::Config(format!(
                "{} holds a dataset from a different configuration (use --force to replace it)",
                dir.display()
            )));
        }
        for sub in ["train", "eval"] {
            if dir.join(sub).exists() {
                fs::remove_dir_all(dir.join(sub))?;
            }
        }
        fs::remove_file(&manifest_path)?;
    } else {
        prepare_dir(&dir, force)?;
    }
    let ds = dataset(&config, None)?;
    ds.write_cache(&dir)?;
    info!(
        "wrote {} train and {} eval samples to {}",
        ds.train.len(),
        ds.eval.len(),
        dir.display()
    );
    emit(&format!("{}\n", dir.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    root: Option<&Path>,
    args: &ConfigArgs,
    data: Option<PathBuf>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    if let Some(dir) = resume {
        if !args.overrides.is_empty() || run_dir.is_some() {
            return Err(Error::Config(
                "--resume takes its configuration from the checkpoint".into(),
            ));
        }
        let path = dir.join(CHECKPOINT);
        if !path.is_file() {
            return Err(Error::Config(format!("{} has no {CHECKPOINT}", dir.display())));
        }
        if let Some(d) = &data {
            check_data_dir(d)?;
        }
        return match precision_of(&path)? {
            Precision::F32 => resume_run::<f32>(&dir, &path, data.as_deref(), steps),
            Precision::F64 => resume_run::<f64>(&dir, &path, data.as_deref(), steps),
        };
    }

    let loaded = load_config(args)?;
    let mut config = loaded.config;
    if let Some(s) = steps {
        config.steps = s;
        config.validate()?;
    }
    let data = data.or(loaded.paths.data);
    if let Some(d) = &data {
        check_data_dir(d)?;
    }
    let dir = run_dir.unwrap_or_else(|| fresh_run_dir(&resolve_root(root, loaded.paths.runs), &config));
    prepare_dir(&dir, force)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    info!("run directory {}", dir.display());
    let ds = dataset(&config, data.as_deref())?;
    match config.precision {
        Precision::F32 => drive(Trainer::<f32>::new(config, &ds.vocab)?, &ds, &dir, false),
        Precision::F64 => drive(Trainer::<f64>::new(config, &ds.vocab)?, &ds, &dir, false),
    }
}

fn precision_of(path: &Path) -> Result<Precision> {
    match peek_precision(path)?.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unknown precision {other:?}"),
        }),
    }
}

fn resume_run<T: Real>(dir: &Path, path: &Path, data: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let ck = Checkpoint::<T>::load(path)?;
    let vocab = Vocabulary::new(ck.config.data.max_len);
    let mut trainer = Trainer::from_checkpoint(ck, &vocab)?;
    if let Some(s) = steps {
        if s < trainer.step {
            return Err(Error::Config(format!(
                "--steps {s} is below the checkpoint's step {}",
                trainer.step
            )));
        }
        trainer.config.steps = s;
        fs::write(dir.join("config.toml"), trainer.config.to_toml()?)?;
    }
    info!("resuming {} at step {}", dir.display(), trainer.step);
    for name in ["metrics.csv", "timing.csv"] {
        truncate_after(&dir.join(name), trainer.step)?;
    }
    let ds = dataset(&trainer.config, data)?;
    drive(trainer, &ds, dir, true)
}

/// Drops CSV rows whose leading step column exceeds `step`, so rows logged
/// after the last checkpoint are not repeated on resume.
fn truncate_after(path: &Path, step: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Trains to `config.steps`, checkpointing at every evaluation step and at
/// the end.
fn drive<T: Real>(mut trainer: Trainer<T>, data: &clim::synth::SynthDataset, dir: &Path, append: bool) -> Result<()> {
    let ckpt = dir.join(CHECKPOINT);
    let total = trainer.config.steps;
    let every = trainer.config.eval_every;
    let start = Instant::now();
    let mut last_loss = None;
    if trainer.step < total {
        let mut writer = MetricsWriter::open(dir, append)?;
        while trainer.step < total {
            let until = match every {
                0 => total,
                e => ((trainer.step / e + 1) * e).min(total),
            };
            let report = trainer.fit(data, until, |row| writer.write(row, start.elapsed().as_secs_f64()))?;
            trainer.checkpoint().save(&ckpt)?;
            last_loss = report.map(|r| r.loss).or(last_loss);
        }
    } else {
        trainer.checkpoint().save(&ckpt)?;
    }
    if let Some(l) = last_loss.filter(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            step: trainer.step,
            detail: format!("final loss {l}"),
        });
    }
    let summary = json!({
        "run_dir": dir,
        "step": trainer.step,
        "final_loss": last_loss,
        "logit_scale": trainer.model.logit_scale(),
        "checkpoint": ckpt,
        "seconds": start.elapsed().as_secs_f64(),
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&summary)?));
    Ok(())
}

struct Loaded<T: Real> {
    config: RunConfig,
    step: u64,
    model: Model<T>,
}

fn load_model<T: Real>(path: &Path) -> Result<Loaded<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let (config, step) = (ck.config.clone(), ck.step);
    let vocab = Vocabulary::new(config.data.max_len);
    let model = Trainer::from_checkpoint(ck, &vocab)?.model;
    Ok(Loaded { config, step, model })
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

pub fn eval(
    checkpoint: &Path,
    data: Option<PathBuf>,
    limit: Option<usize>,
    mosaics: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    require_file(checkpoint)?;
    if let Some(d) = &data {
        check_data_dir(d)?;
    }
    match precision_of(checkpoint)? {
        Precision::F32 => eval_with::<f32>(checkpoint, data.as_deref(), limit, mosaics, out),
        Precision::F64 => eval_with::<f64>(checkpoint, data.as_deref(), limit, mosaics, out),
    }
}

fn eval_with<T: Real>(
    checkpoint: &Path,
    data: Option<&Path>,
    limit: Option<usize>,
    mosaics: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let m = load_model::<T>(checkpoint)?;
    let ds = dataset(&m.config, data)?;
    let n = limit.unwrap_or(ds.eval.len()).min(ds.eval.len());
    let report = eval_zero_shot_region(
        &m.model,
        &ds.eval[..n],
        &ds.vocab,
        m.config.canvas_size,
        m.config.roi_sampling,
    )?;
    let localization = if mosaics > 0 {
        let set = localization_mosaics(
            &ds.eval,
            mosaics,
            m.config.canvas_size,
            &m.config.crop,
            m.config.data_seed,
        )?;
        Some(mosaic_localization(&m.model, &set)?)
    } else {
        None
    };
    let result = json!({
        "checkpoint": checkpoint,
        "step": m.step,
        "samples": n,
        "chance_top1": 1.0 / Concept::COUNT as f64,
        "zero_shot": report,
        "mosaic_localization": localization,
        "mosaics": mosaics,
    });
    let path = out.unwrap_or_else(|| checkpoint_dir(checkpoint).join(format!("eval-{}.json", m.step)));
    write_json(&path, &result)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&result)?));
    Ok(())
}

/// The image to analyse, the ground truth when it is a dataset sample, and
/// a short name for output files.
fn source_image(
    source: &ImageSource,
    config: &RunConfig,
    data: Option<&Path>,
) -> Result<(Image, Option<Vec<SynthObject>>, String)> {
    let size = config.canvas_size;
    if let Some(path) = &source.image {
        let img = Image::load_png(path)?;
        let img = if img.width() != size || img.height() != size {
            warn!(
                "resizing {}x{} input to the {size}x{size} canvas",
                img.width(),
                img.height()
            );
            img.resize(size, size)
        } else {
            img
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        return Ok((img, None, stem));
    }
    let id = source.sample.expect("clap requires --image or --sample");
    let ds = dataset(config, data)?;
    let sample = ds.eval.get(id).ok_or_else(|| {
        Error::Config(format!(
            "sample {id} is out of range (evaluation split has {})",
            ds.eval.len()
        ))
    })?;
    let (img, objects) = to_canvas(sample, size);
    Ok((img, Some(objects), format!("sample{id}")))
}

fn slug(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join("-")
}

fn prepare_inputs(checkpoint: &Path, source: &ImageSource, data: Option<&PathBuf>) -> Result<Precision> {
    require_file(checkpoint)?;
    if let Some(p) = &source.image {
        require_file(p)?;
    }
    if let Some(d) = data {
        check_data_dir(d)?;
    }
    precision_of(checkpoint)
}

pub fn heatmap(
    checkpoint: &Path,
    source: &ImageSource,
    text: &str,
    window: usize,
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    match prepare_inputs(checkpoint, source, data.as_ref())? {
        Precision::F32 => heatmap_with::<f32>(checkpoint, source, text, window, data.as_deref(), out_dir),
        Precision::F64 => heatmap_with::<f64>(checkpoint, source, text, window, data.as_deref(), out_dir),
    }
}

fn heatmap_with<T: Real>(
    checkpoint: &Path,
    source: &ImageSource,
    text: &str,
    window: usize,
    data: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let m = load_model::<T>(checkpoint)?;
    let vocab = Vocabulary::new(m.config.data.max_len);
    let tokens = vocab.tokenize(text)?;
    let (image, objects, name) = source_image(source, &m.config, data)?;
    let map = response_map(&m.model, &image, &tokens)?;
    let (row, col) = map.argmax();
    let dir = out_dir.unwrap_or_else(|| checkpoint_dir(checkpoint));
    fs::create_dir_all(&dir)?;
    let base = dir.join(format!("heatmap-{name}-{}", slug(text)));
    map.render(m.config.canvas_size).save_png(base.with_extension("png"))?;
    let result = json!({
        "text": text,
        "source": name,
        "h": map.h,
        "w": map.w,
        "stride": map.stride,
        "values": map.values,
        "argmax": { "row": row, "col": col, "bbox": map.cell_box(row, col) },
        "best_box": map.best_box(window, window),
        "window": window,
        "objects": objects,
    });
    write_json(&base.with_extension("json"), &result)?;
    emit(&format!("{}\n", base.with_extension("png").display()));
    Ok(())
}

pub fn per_pixel(
    checkpoint: &Path,
    source: &ImageSource,
    prompts: &[String],
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    match prepare_inputs(checkpoint, source, data.as_ref())? {
        Precision::F32 => per_pixel_with::<f32>(checkpoint, source, prompts, data.as_deref(), out_dir),
        Precision::F64 => per_pixel_with::<f64>(checkpoint, source, prompts, data.as_deref(), out_dir),
    }
}

fn per_pixel_with<T: Real>(
    checkpoint: &Path,
    source: &ImageSource,
    prompts: &[String],
    data: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let m = load_model::<T>(checkpoint)?;
    let vocab = Vocabulary::new(m.config.data.max_len);
    let class_mode = prompts.is_empty();
    let (texts, seqs) = if class_mode {
        let concepts: Vec<Concept> = Concept::all().collect();
        let texts = concepts.iter().map(|c| format!("a photo of a {c}")).collect();
        (texts, class_prompts(&vocab, &concepts)?)
    } else {
        let seqs = prompts.iter().map(|p| vocab.tokenize(p)).collect::<Result<Vec<_>>>()?;
        (prompts.to_vec(), seqs)
    };
    let (image, objects, name) = source_image(source, &m.config, data)?;
    let labels = classify_cells(&m.model, &image, &seqs)?;
    let colors = palette(seqs.len());
    let dir = out_dir.unwrap_or_else(|| checkpoint_dir(checkpoint));
    fs::create_dir_all(&dir)?;
    let base = dir.join(format!("per-pixel-{name}"));
    labels
        .render(m.config.canvas_size, &colors)
        .save_png(base.with_extension("png"))?;
    let stride = m.config.vision.patch_size as f64;
    let accuracy = match (&objects, class_mode) {
        (Some(objs), true) => {
            let (hit, total) = cell_accuracy(&labels, objs, stride);
            Some(json!({ "hit": hit, "total": total }))
        }
        _ => None,
    };
    let result = json!({
        "source": name,
        "prompts": texts,
        "palette": colors,
        "h": labels.h,
        "w": labels.w,
        "labels": labels.labels,
        "object_cell_accuracy": accuracy,
    });
    write_json(&base.with_extension("json"), &result)?;
    emit(&format!("{}\n", base.with_extension("png").display()));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionEntry {
    bbox: BBox,
    cell: usize,
    caption: String,
    /// Training-split index of the source sample.
    sample: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComposedEntry {
    bbox: BBox,
    block: CellBlock,
    cells: Vec<usize>,
    regions: Vec<usize>,
    captions: Vec<String>,
}

/// Geometry written by `inspect-mosaic` and checked by `validate-boxes`.
#[derive(Debug, Serialize, Deserialize)]
struct BoxesFile {
    canvas_size: usize,
    grid: GridSpec,
    regions: Vec<RegionEntry>,
    composed: Vec<ComposedEntry>,
}

pub fn inspect_mosaic(
    root: Option<&Path>,
    args: &ConfigArgs,
    seed: u64,
    grid: Option<usize>,
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let loaded = load_config(args)?;
    let config = loaded.config;
    let data = data.or(loaded.paths.data);
    if let Some(d) = &data {
        check_data_dir(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = match grid {
        Some(0) => return Err(Error::Config("--grid must be at least 1".into())),
        Some(n) => GridSpec::square(n),
        None => plan_grid(&mut rng, &config.grid)?,
    };
    let dir = out_dir.unwrap_or_else(|| fresh_run_dir(&resolve_root(root, loaded.paths.runs), &config));
    fs::create_dir_all(&dir)?;
    let ds = dataset(&config, data.as_deref())?;
    let picked = draw_indices(&mut rng, ds.train.len(), grid.cells())?;
    let pairs: Vec<SourcePair<'_>> = picked
        .iter()
        .map(|&i| SourcePair {
            image: &ds.train[i].image,
            caption: &ds.train[i].tokens,
            tags: &ds.train[i].tags,
        })
        .collect();
    let mosaic = build_mosaic(
        &pairs,
        grid,
        config.canvas_size,
        config.composed_groups,
        &config.crop,
        &mut rng,
    )?;

    let caption = |ids: &[usize]| vocab_text(&ds.vocab, ids);
    let file = BoxesFile {
        canvas_size: config.canvas_size,
        grid,
        regions: mosaic
            .regions
            .iter()
            .map(|r| {
                Ok(RegionEntry {
                    bbox: r.bbox,
                    cell: r.cell,
                    caption: caption(&r.caption)?,
                    sample: picked[r.source],
                })
            })
            .collect::<Result<_>>()?,
        composed: mosaic
            .composed
            .iter()
            .map(|c| {
                Ok(ComposedEntry {
                    bbox: c.bbox,
                    block: c.block,
                    cells: c.cells.clone(),
                    regions: c.regions.clone(),
                    captions: c.captions.iter().map(|ids| caption(ids)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?,
    };

    let mut annotated = mosaic.canvas.clone();
    for r in &mosaic.regions {
        let b = r.bbox;
        annotated.draw_rect(b.x0, b.y0, b.x1, b.y1, [1.0, 1.0, 1.0]);
    }
    let colors = palette(mosaic.composed.len().max(1));
    for (c, color) in mosaic.composed.iter().zip(&colors) {
        let b = c.bbox;
        annotated.draw_rect(b.x0, b.y0, b.x1, b.y1, *color);
    }
    let base = dir.join(format!("mosaic-seed{seed}"));
    mosaic.canvas.save_png(dir.join(format!("mosaic-seed{seed}-raw.png")))?;
    annotated.save_png(base.with_extension("png"))?;
    write_json(&base.with_extension("json"), &file)?;
    emit(&format!("{}\n", base.with_extension("png").display()));
    Ok(())
}

fn vocab_text(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    vocab.detokenize(ids)
}

pub fn validate_config(args: &ConfigArgs) -> Result<()> {
    let loaded = load_config(args)?;
    emit(&format!(
        "{}# config hash {}\n",
        loaded.config.to_toml()?,
        loaded.config.hash()
    ));
    Ok(())
}

pub fn validate_boxes(path: &Path) -> Result<()> {
    require_file(path)?;
    let file: BoxesFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let (grid, size) = (file.grid, file.canvas_size);
    if file.regions.len() != grid.cells() {
        return Err(Error::Mosaic(format!(
            "{} regions for a {}x{} grid",
            file.regions.len(),
            grid.rows,
            grid.cols
        )));
    }
    for r in &file.regions {
        let expected = cell_box(grid, r.cell, size)?;
        if r.bbox != expected {
            return Err(Error::Mosaic(format!(
                "region of cell {} is {:?}, expected {expected:?}",
                r.cell, r.bbox
            )));
        }
    }
    let boxes: Vec<BBox> = file.regions.iter().map(|r| r.bbox).collect();
    verify_tiling(&boxes, size)?;
    for c in &file.composed {
        let region = ComposedRegion {
            bbox: c.bbox,
            block: c.block,
            cells: c.cells.clone(),
            regions: c.regions.clone(),
            captions: Vec::new(),
            tags: Vec::new(),
        };
        verify_composed(&region, grid, size)?;
        if c.block.bbox(grid, size) != c.bbox || c.block.cells(grid) != c.cells {
            return Err(Error::Mosaic(format!(
                "composed block {:?} disagrees with its box or cells",
                c.block
            )));
        }
        for (&cell, &ri) in c.cells.iter().zip(&c.regions) {
            if file.regions.get(ri).map(|r| r.cell) != Some(cell) {
                return Err(Error::Mosaic(format!("composed member {ri} does not fill cell {cell}")));
            }
        }
    }
    emit(&format!(
        "ok: {} regions tile the {size}x{size} canvas, {} composed regions are contiguous\n",
        file.regions.len(),
        file.composed.len()
    ));
    Ok(())
}
