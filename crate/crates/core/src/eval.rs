//! Evaluation protocols: zero-shot region classification, text-response
//! heatmaps and per-cell classification of the dense feature map.

use clim_tensor::{Real, Tape, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mosaic::{build_mosaic, BBox, CropConfig, GridSpec, SourcePair};
use crate::region::{region_embeddings, Sampling};
use crate::synth::{Concept, Split, SynthObject, SynthSample, Vocabulary};
use crate::train::Model;

/// Images per frozen forward pass.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub base: SplitAccuracy,
    pub novel: SplitAccuracy,
    pub all: SplitAccuracy,
}

/// Accuracy of ranking `prompts` (`[P, e]`) by cosine similarity against
/// each row of `regions` (`[R, e]`, both unit-norm). `labels[r]` is the
/// correct prompt of region `r`, which is also its concept id.
pub fn rank_accuracy<T: Real>(regions: &Tensor<T>, prompts: &Tensor<T>, labels: &[usize]) -> Result<ZeroShotReport> {
    let (r, e) = regions.dims2()?;
    let (p, ep) = prompts.dims2()?;
    if e != ep || labels.len() != r {
        return Err(Error::Config(format!(
            "rank_accuracy: {r}x{e} regions, {p}x{ep} prompts, {} labels",
            labels.len()
        )));
    }
    let mut hits = [[0usize; 2]; 2];
    let mut counts = [0usize; 2];
    for (i, &label) in labels.iter().enumerate() {
        if label >= p {
            return Err(Error::Config(format!("label {label} outside {p} prompts")));
        }
        let sims: Vec<f64> = (0..p)
            .map(|j| {
                regions
                    .row(i)
                    .iter()
                    .zip(prompts.row(j))
                    .map(|(a, b)| (*a * *b).to_f64().unwrap_or(f64::NAN))
                    .sum()
            })
            .collect();
        // Rank = number of prompts scoring strictly higher than the label.
        let rank = sims.iter().filter(|&&s| s > sims[label]).count();
        let split = usize::from(Concept::from_id(label).split() == Split::Novel);
        counts[split] += 1;
        hits[split][0] += usize::from(rank < 1);
        hits[split][1] += usize::from(rank < 5);
    }
    let acc = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let split = |s: usize| SplitAccuracy {
        top1: acc(hits[s][0], counts[s]),
        top5: acc(hits[s][1], counts[s]),
        count: counts[s],
    };
    let n = counts[0] + counts[1];
    Ok(ZeroShotReport {
        base: split(0),
        novel: split(1),
        all: SplitAccuracy {
            top1: acc(hits[0][0] + hits[1][0], n),
            top5: acc(hits[0][1] + hits[1][1], n),
            count: n,
        },
    })
}

/// Resizes an evaluation image to the canvas and scales its object boxes.
pub fn to_canvas(sample: &SynthSample, canvas_size: usize) -> (Image, Vec<SynthObject>) {
    let factor = canvas_size as f64 / sample.image.width() as f64;
    let image = if sample.image.width() == canvas_size && sample.image.height() == canvas_size {
        sample.image.clone()
    } else {
        sample.image.resize(canvas_size, canvas_size)
    };
    let objects = sample
        .objects
        .iter()
        .map(|o| SynthObject {
            concept: o.concept,
            bbox: o.bbox.scaled(factor),
        })
        .collect();
    (image, objects)
}

/// Unit-norm embeddings of every concept prompt, in concept-id order.
pub fn prompt_embeddings<T: Real>(model: &Model<T>, vocab: &Vocabulary) -> Result<Tensor<T>> {
    let concepts: Vec<Concept> = Concept::all().collect();
    model.embed_texts(&crate::synth::class_prompts(vocab, &concepts)?)
}

/// Zero-shot classification of every ground-truth object box: the box is
/// pooled from the dense map of its whole image and ranked against all
/// concept prompts.
pub fn eval_zero_shot_region<T: Real>(
    model: &Model<T>,
    samples: &[SynthSample],
    vocab: &Vocabulary,
    canvas_size: usize,
    sampling: Sampling,
) -> Result<ZeroShotReport> {
    let prompts = prompt_embeddings(model, vocab)?;
    rank_regions(model, samples, &prompts, canvas_size, sampling)
}

/// [`eval_zero_shot_region`] against precomputed prompt embeddings
/// (`[40, e]`, concept-id order).
pub fn rank_regions<T: Real>(
    model: &Model<T>,
    samples: &[SynthSample],
    prompts: &Tensor<T>,
    canvas_size: usize,
    sampling: Sampling,
) -> Result<ZeroShotReport> {
    let mut rows: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let prepared: Vec<_> = chunk.iter().map(|s| to_canvas(s, canvas_size)).collect();
        let images: Vec<&Image> = prepared.iter().map(|(i, _)| i).collect();
        let boxes: Vec<(usize, BBox)> = prepared
            .iter()
            .enumerate()
            .flat_map(|(i, (_, objs))| objs.iter().map(move |o| (i, o.bbox)))
            .collect();
        if boxes.is_empty() {
            continue;
        }
        labels.extend(
            prepared
                .iter()
                .flat_map(|(_, objs)| objs.iter().map(|o| o.concept.id())),
        );
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let out = model.vision.forward(&p, &images, crate::encoders::VisionPaths::Dense)?;
        let map = out.dense.expect("dense path requested");
        rows.extend_from_slice(region_embeddings(&map, &boxes, sampling)?.value().data());
    }
    let e = prompts.shape()[1];
    let regions = Tensor::new([labels.len(), e], rows)?;
    rank_accuracy(&regions, prompts, &labels)
}

/// Per-cell cosine response of a dense map to one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    /// Canvas pixels per cell.
    pub stride: f64,
    /// Row-major cosine similarities.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Cosines between unit-norm cell features `[h·w, e]` and a unit text
    /// embedding `[e]`.
    pub fn from_features(h: usize, w: usize, stride: f64, cells: &[f64], text: &[f64]) -> Result<Self> {
        let e = text.len();
        if e == 0 || cells.len() != h * w * e {
            return Err(Error::Config(format!(
                "{} cell values for a {h}x{w} map of width {e}",
                cells.len()
            )));
        }
        let values = cells
            .chunks_exact(e)
            .map(|c| c.iter().zip(text).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Self { h, w, stride, values })
    }

    /// Min-max normalized to `[0, 1]`; a flat map normalizes to zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        self.values
            .iter()
            .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect()
    }

    /// `(row, col)` of the strongest response; the first in row-major order
    /// on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    pub fn cell_box(&self, row: usize, col: usize) -> BBox {
        let s = self.stride;
        BBox::new(
            col as f64 * s,
            row as f64 * s,
            (col + 1) as f64 * s,
            (row + 1) as f64 * s,
        )
    }

    /// The `win_h × win_w`-cell window with the highest mean response, in
    /// canvas pixels.
    pub fn best_box(&self, win_h: usize, win_w: usize) -> BBox {
        let (wh, ww) = (win_h.clamp(1, self.h), win_w.clamp(1, self.w));
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for y in 0..=self.h - wh {
            for x in 0..=self.w - ww {
                let sum: f64 = (y..y + wh)
                    .flat_map(|r| self.values[r * self.w + x..r * self.w + x + ww].iter())
                    .sum();
                if sum > best.0 {
                    best = (sum, y, x);
                }
            }
        }
        let (_, y, x) = best;
        self.cell_box(y, x).union(&self.cell_box(y + wh - 1, x + ww - 1))
    }

    /// Normalized response as a blue-to-red ramp, each cell an
    /// upscaled block of `size / w` pixels.
    pub fn render(&self, size: usize) -> Image {
        let norm = self.normalized();
        let mut img = Image::new(size, size);
        for py in 0..size {
            for px in 0..size {
                let (r, c) = (py * self.h / size, px * self.w / size);
                let v = norm[r * self.w + c] as f32;
                img.set_pixel(px, py, [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]);
            }
        }
        img
    }
}

/// Unit-norm dense features of one image, `[h·w, e]` as `f64`, with the map
/// geometry.
pub fn dense_cells<T: Real>(model: &Model<T>, image: &Image) -> Result<(usize, usize, f64, Vec<f64>)> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let out = model
        .vision
        .forward(&p, &[image], crate::encoders::VisionPaths::Dense)?;
    let map = out.dense.expect("dense path requested");
    let cells = map.normalized()?.value().to_f64_vec();
    Ok((map.h, map.w, map.stride, cells))
}

/// Response maps of `image` to each token sequence in `texts`.
pub fn heatmaps<T: Real>(model: &Model<T>, image: &Image, texts: &[Vec<usize>]) -> Result<Vec<Heatmap>> {
    let (h, w, stride, cells) = dense_cells(model, image)?;
    let emb = model.embed_texts(texts)?.to_f64_vec();
    let e = emb.len() / texts.len();
    emb.chunks_exact(e)
        .map(|t| Heatmap::from_features(h, w, stride, &cells, t))
        .collect()
}

pub fn heatmap<T: Real>(model: &Model<T>, image: &Image, text: &[usize]) -> Result<Heatmap> {
    Ok(heatmaps(model, image, &[text.to_vec()])?.remove(0))
}

/// Per-cell index of the most similar prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn from_features(h: usize, w: usize, cells: &[f64], prompts: &[f64], n_prompts: usize) -> Result<Self> {
        if n_prompts == 0 || prompts.len() % n_prompts != 0 {
            return Err(Error::Config(
                "per-pixel classification needs at least one prompt".into(),
            ));
        }
        let e = prompts.len() / n_prompts;
        if cells.len() != h * w * e {
            return Err(Error::Config(format!("{} cell values for {h}x{w}x{e}", cells.len())));
        }
        let labels = cells
            .chunks_exact(e)
            .map(|c| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (j, pr) in prompts.chunks_exact(e).enumerate() {
                    let s: f64 = c.iter().zip(pr).map(|(a, b)| a * b).sum();
                    if s > best.0 {
                        best = (s, j);
                    }
                }
                best.1
            })
            .collect();
        Ok(Self { h, w, labels })
    }

    /// Color-coded label image of `size × size` pixels.
    pub fn render(&self, size: usize, palette: &[Rgb]) -> Image {
        let mut img = Image::new(size, size);
        for py in 0..size {
            for px in 0..size {
                let l = self.labels[(py * self.h / size) * self.w + px * self.w / size];
                img.set_pixel(px, py, palette[l % palette.len()]);
            }
        }
        img
    }
}

/// `n` well-separated colors (evenly spaced hues, alternating brightness).
pub fn palette(n: usize) -> Vec<Rgb> {
    (0..n)
        .map(|i| {
            let h = i as f32 / n.max(1) as f32 * 6.0;
            let v = if i % 2 == 0 { 1.0 } else { 0.6 };
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r * v, g * v, b * v]
        })
        .collect()
}

pub fn per_pixel_classify<T: Real>(model: &Model<T>, image: &Image, prompts: &[Vec<usize>]) -> Result<LabelMap> {
    let (h, w, _, cells) = dense_cells(model, image)?;
    let emb = model.embed_texts(prompts)?.to_f64_vec();
    LabelMap::from_features(h, w, &cells, &emb, prompts.len())
}

/// Fraction of cells whose center lies inside an object box and whose label
/// is that object's concept id. Labels must index concepts.
pub fn cell_accuracy(map: &LabelMap, objects: &[SynthObject], stride: f64) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for r in 0..map.h {
        for c in 0..map.w {
            let (x, y) = ((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride);
            let owner = objects
                .iter()
                .find(|o| x >= o.bbox.x0 && x < o.bbox.x1 && y >= o.bbox.y0 && y < o.bbox.y1);
            if let Some(o) = owner {
                total += 1;
                hit += usize::from(map.labels[r * map.w + c] == o.concept.id());
            }
        }
    }
    (hit, total)
}

/// Held-out 2×2 mosaics for the localization measure: `count` canvases built
/// from distinct evaluation samples.
pub fn localization_mosaics(
    samples: &[SynthSample],
    count: usize,
    canvas_size: usize,
    crop: &CropConfig,
    seed: u64,
) -> Result<Vec<crate::mosaic::MosaicSample>> {
    let grid = GridSpec::square(2);
    if samples.len() < grid.cells() {
        return Err(Error::Dataset("too few evaluation samples for a 2x2 mosaic".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let picked = index::sample(&mut rng, samples.len(), grid.cells()).into_vec();
            let pairs: Vec<SourcePair<'_>> = picked
                .iter()
                .map(|&i| SourcePair {
                    image: &samples[i].image,
                    caption: &samples[i].tokens,
                    tags: &samples[i].tags,
                })
                .collect();
            build_mosaic(&pairs, grid, canvas_size, 0, crop, &mut rng)
        })
        .collect()
}

/// Fraction of (mosaic, pseudo region) queries whose caption's argmax
/// response cell has its center inside that pseudo region.
pub fn mosaic_localization<T: Real>(model: &Model<T>, mosaics: &[crate::mosaic::MosaicSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for m in mosaics {
        let texts: Vec<Vec<usize>> = m.regions.iter().map(|r| r.caption.clone()).collect();
        for (map, region) in heatmaps(model, &m.canvas, &texts)?.iter().zip(&m.regions) {
            let (r, c) = map.argmax();
            let (x, y) = ((c as f64 + 0.5) * map.stride, (r as f64 + 0.5) * map.stride);
            let b = &region.bbox;
            hit += usize::from(x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
