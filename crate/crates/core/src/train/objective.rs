//! The weighted training objective of one batch.

use clim_tensor::{lit, Real, Tensor, Var};

use crate::config::RunConfig;
use crate::encoders::{DenseFeatureMap, VisionPaths};
use crate::error::{Error, Result};
use crate::losses::{
    bce_multilabel, contrastive_logits, grounding_loss, grounding_scores, soft_target_ce, uniform_targets, LossKind,
};
use crate::mosaic::BBox;
use crate::params::Bound;
use crate::region::region_embeddings;
use crate::synth::Vocabulary;
use crate::train::batch::Batch;
use crate::train::model::Model;

/// The scalar to minimize and the unweighted value of every enabled loss.
pub struct Objective<'t, T: Real> {
    pub total: Var<'t, T>,
    pub components: Vec<(LossKind, f64)>,
}

/// Feature cells of an `h × w` map whose centers lie inside `bbox`; the cell
/// nearest the box center when none does.
pub fn cells_in_box(h: usize, w: usize, stride: f64, bbox: &BBox) -> Vec<usize> {
    let center = |i: usize| (i as f64 + 0.5) * stride;
    let inside = |c: f64, lo: f64, hi: f64| c >= lo && c < hi;
    let mut ids = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(center(y), bbox.y0, bbox.y1) && inside(center(x), bbox.x0, bbox.x1) {
                ids.push(y * w + x);
            }
        }
    }
    if ids.is_empty() {
        let pick = |c: f64, n: usize| ((c / stride).floor().max(0.0) as usize).min(n - 1);
        ids.push(pick(0.5 * (bbox.y0 + bbox.y1), h) * w + pick(0.5 * (bbox.x0 + bbox.x1), w));
    }
    ids
}

/// Embeddings of every supervised region of `batch`, in batch order: global
/// embeddings for plain images, pooled dense features for pseudo regions
/// (`tag = true` pools the tag boxes instead of the cells).
fn region_rows<'t, T: Real>(
    batch: &Batch,
    global: Option<Var<'t, T>>,
    dense: Option<&DenseFeatureMap<'t, T>>,
    config: &RunConfig,
    tag: bool,
) -> Result<Var<'t, T>> {
    let mut parts = Vec::new();
    if batch.n_plain > 0 {
        let g = global.ok_or_else(|| Error::Loss("plain images need global embeddings".into()))?;
        let ids: Vec<usize> = batch
            .regions
            .iter()
            .take_while(|r| r.image < batch.n_plain)
            .map(|r| r.image)
            .collect();
        parts.push(g.gather_rows(&ids)?);
    }
    let boxes: Vec<(usize, BBox)> = batch
        .regions
        .iter()
        .filter(|r| r.image >= batch.n_plain)
        .map(|r| (r.image, if tag { r.tag_box } else { r.bbox }))
        .collect();
    if !boxes.is_empty() {
        let map = dense.ok_or_else(|| Error::Loss("pseudo regions need a dense map".into()))?;
        parts.push(region_embeddings(map, &boxes, config.roi_sampling)?);
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        Var::concat(&parts, 0)?
    })
}

/// Multi-hot `[rows, prompts]` targets from concept tags.
fn tag_targets<T: Real>(tags: &[&[usize]], prompt_of: &[Option<usize>], prompts: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); tags.len() * prompts];
    for (i, ts) in tags.iter().enumerate() {
        for &c in ts.iter() {
            let j = prompt_of
                .get(c)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Loss(format!("tag {c} has no training prompt")))?;
            data[i * prompts + j] = T::one();
        }
    }
    Ok(Tensor::new([tags.len(), prompts], data)?)
}

/// Forward pass and weighted loss of `batch`.
///
/// `tag_prompts` are the token sequences the tag loss classifies against and
/// `prompt_of` maps a concept id to its index among them.
pub fn batch_objective<'t, T: Real>(
    model: &Model<T>,
    p: &Bound<'t, T>,
    batch: &Batch,
    config: &RunConfig,
    tag_prompts: &[Vec<usize>],
    prompt_of: &[Option<usize>],
) -> Result<Objective<'t, T>> {
    let w = &config.losses;
    let enabled = w.enabled();
    let has_mosaic = batch.images.len() > batch.n_plain;
    let need_dense = has_mosaic || enabled.contains(&LossKind::Grounding);
    let paths = match (batch.n_plain > 0, need_dense) {
        (true, true) => VisionPaths::Both,
        (true, false) => VisionPaths::Global,
        _ => VisionPaths::Dense,
    };
    let vision = model.vision.forward(p, &batch.images(), paths)?;
    let dense = vision.dense;

    let m = batch.texts.len();
    let mut seqs = batch.texts.clone();
    if enabled.contains(&LossKind::BceTag) {
        seqs.extend(tag_prompts.iter().cloned());
    }
    let text = model.text.forward(p, &seqs, Vocabulary::END)?;
    let texts = text.pooled.slice(0, 0, m)?;
    let scale = model.temperature.scale(p);
    let matches = batch.matches();

    let use_composed = w.composed > 0.0 && !batch.composed.is_empty();
    let composed = if use_composed {
        let map = dense.as_ref().expect("mosaics imply a dense map");
        let boxes: Vec<_> = batch.composed.iter().map(|c| (c.image, c.bbox)).collect();
        Some(region_embeddings(map, &boxes, config.roi_sampling)?)
    } else {
        None
    };
    let composed_ce = |c: Var<'t, T>| -> Result<Var<'t, T>> {
        let targets: Vec<Vec<usize>> = batch.composed.iter().map(|c| c.texts.clone()).collect();
        soft_target_ce(c.matmul_t(texts)?.mul_scalar(scale)?, &uniform_targets(&targets, m)?)
    };

    let mut total: Option<Var<'t, T>> = None;
    let mut components = Vec::with_capacity(enabled.len());
    for kind in enabled {
        let mut loss = match kind {
            LossKind::InfoNce | LossKind::SoftTargetCe => {
                let regions = region_rows(batch, vision.global, dense.as_ref(), config, false)?;
                let logits = regions.matmul_t(texts)?.mul_scalar(scale)?;
                if kind == LossKind::InfoNce {
                    contrastive_logits(logits, &matches)?
                } else {
                    soft_target_ce(logits, &uniform_targets(&matches, m)?)?
                }
            }
            LossKind::BceTag => {
                let k = tag_prompts.len();
                let prompts = text.pooled.slice(0, m, k)?;
                let regions = region_rows(batch, vision.global, dense.as_ref(), config, true)?;
                let tags: Vec<&[usize]> = batch.regions.iter().map(|r| r.tags.as_slice()).collect();
                let targets = tag_targets(&tags, prompt_of, k)?;
                let bias = p[model.bce_bias];
                let mut loss = bce_multilabel(regions, prompts, &targets, scale, bias)?;
                if let Some(c) = composed {
                    let tags: Vec<&[usize]> = batch.composed.iter().map(|c| c.tags.as_slice()).collect();
                    let targets = tag_targets(&tags, prompt_of, k)?;
                    let extra = bce_multilabel(c, prompts, &targets, scale, bias)?;
                    loss = loss.add(extra.scale(lit(w.composed)))?;
                }
                loss
            }
            LossKind::Grounding => {
                let map = dense.as_ref().expect("grounding requests a dense map");
                let cells = map.cells();
                let normalized = map.normalized()?;
                let grids = batch
                    .regions
                    .iter()
                    .map(|r| {
                        let ids: Vec<usize> = cells_in_box(map.h, map.w, map.stride, &r.bbox)
                            .into_iter()
                            .map(|c| r.image * cells + c)
                            .collect();
                        normalized.gather_rows(&ids)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let words = (0..m)
                    .map(|i| text.words(i, model.text.config.max_len))
                    .collect::<Result<Vec<_>>>()?;
                grounding_loss(grounding_scores(&grids, &words)?, &matches, scale)?
            }
        };
        if kind != LossKind::BceTag && kind != LossKind::Grounding {
            if let Some(c) = composed {
                loss = loss.add(composed_ce(c)?.scale(lit(w.composed)))?;
            }
        }
        let value = loss.item()?.to_f64().unwrap_or(f64::NAN);
        components.push((kind, value));
        let weighted = loss.scale(lit(w.weight(kind)));
        total = Some(match total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss is enabled".into()))?;
    Ok(Objective { total, components })
}
