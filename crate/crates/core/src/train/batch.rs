//! Batches mixing plain images and mosaicked canvases.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mosaic::{build_mosaic, jittered_boxes, max_size_box, plan_grid, BBox, GridSpec, MosaicSample, SourcePair};
use crate::synth::SynthSample;

/// A region supervised by one caption: a pseudo region of a mosaic, or a
/// whole plain image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRegion {
    pub image: usize,
    pub bbox: BBox,
    /// Index into [`Batch::texts`].
    pub text: usize,
    /// Concept ids of the source image.
    pub tags: Vec<usize>,
    /// Largest jittered candidate inside the region, used by the tag loss.
    pub tag_box: BBox,
    /// Dataset index of the source sample.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchComposed {
    pub image: usize,
    pub bbox: BBox,
    /// Indices into [`Batch::texts`], deduplicated, in member order.
    pub texts: Vec<usize>,
    pub tags: Vec<usize>,
    /// Indices into [`Batch::regions`] of the member pseudo regions.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Canvas-sized images: the plain ones first, then the mosaics.
    pub images: Vec<Image>,
    pub n_plain: usize,
    pub grids: Vec<GridSpec>,
    /// Batch-wide deduplicated caption token sequences.
    pub texts: Vec<Vec<usize>>,
    pub regions: Vec<BatchRegion>,
    pub composed: Vec<BatchComposed>,
}

impl Batch {
    /// For each region, the single text it matches.
    pub fn matches(&self) -> Vec<Vec<usize>> {
        self.regions.iter().map(|r| vec![r.text]).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

struct TextTable {
    index: HashMap<Vec<usize>, usize>,
    texts: Vec<Vec<usize>>,
}

impl TextTable {
    fn id(&mut self, tokens: &[usize]) -> usize {
        if let Some(&i) = self.index.get(tokens) {
            return i;
        }
        self.texts.push(tokens.to_vec());
        self.index.insert(tokens.to_vec(), self.texts.len() - 1);
        self.texts.len() - 1
    }
}

/// Chooses `count` dataset indices, distinct when the dataset is large enough.
pub fn draw_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Dataset("cannot draw a batch from an empty dataset".into()));
    }
    Ok(if count <= len {
        index::sample(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    })
}

/// Random batch: `n_plain` whole images and `n_mosaic` mosaics whose grids
/// follow the grid policy (baseline mode turns every mosaic into a plain image).
pub fn assemble_batch<R: Rng + ?Sized>(samples: &[SynthSample], config: &RunConfig, rng: &mut R) -> Result<Batch> {
    let (n_plain, n_mosaic) = config.batch_mix();
    let grids = (0..n_mosaic)
        .map(|_| plan_grid(rng, &config.grid))
        .collect::<Result<Vec<_>>>()?;
    let total = n_plain + grids.iter().map(GridSpec::cells).sum::<usize>();
    let picked = draw_indices(rng, samples.len(), total)?;
    let (plain, rest) = picked.split_at(n_plain);
    let mut groups = Vec::with_capacity(grids.len());
    let mut at = 0;
    for g in &grids {
        groups.push((*g, rest[at..at + g.cells()].to_vec()));
        at += g.cells();
    }
    assemble_from_indices(samples, plain, &groups, config, rng)
}

/// Builds a batch from explicit plain indices and `(grid, member indices)` groups.
pub fn assemble_from_indices<R: Rng + ?Sized>(
    samples: &[SynthSample],
    plain: &[usize],
    groups: &[(GridSpec, Vec<usize>)],
    config: &RunConfig,
    rng: &mut R,
) -> Result<Batch> {
    let size = config.canvas_size;
    let mut table = TextTable {
        index: HashMap::new(),
        texts: Vec::new(),
    };
    let mut images = Vec::with_capacity(plain.len() + groups.len());
    let mut regions = Vec::new();
    let mut composed = Vec::new();
    let full = BBox::new(0.0, 0.0, size as f64, size as f64);

    let tag_box = |cell: &BBox, rng: &mut R| {
        let candidates = jittered_boxes(cell, config.tag_candidates, config.tag_candidate_area, rng);
        max_size_box(cell, &candidates)
    };

    for &i in plain {
        let s = &samples[i];
        let image = images.len();
        images.push(s.image.resize(size, size));
        regions.push(BatchRegion {
            image,
            bbox: full,
            text: table.id(&s.tokens),
            tags: s.tags.clone(),
            tag_box: tag_box(&full, rng),
            source: i,
        });
    }

    for (grid, members) in groups {
        let pairs: Vec<SourcePair<'_>> = members
            .iter()
            .map(|&i| SourcePair {
                image: &samples[i].image,
                caption: &samples[i].tokens,
                tags: &samples[i].tags,
            })
            .collect();
        let mosaic: MosaicSample = build_mosaic(&pairs, *grid, size, config.composed_groups, &config.crop, rng)?;
        let image = images.len();
        let first = regions.len();
        for r in &mosaic.regions {
            regions.push(BatchRegion {
                image,
                bbox: r.bbox,
                text: table.id(&r.caption),
                tags: r.tags.clone(),
                tag_box: tag_box(&r.bbox, rng),
                source: members[r.source],
            });
        }
        for c in &mosaic.composed {
            let mut texts = Vec::with_capacity(c.captions.len());
            for cap in &c.captions {
                let id = table.id(cap);
                if !texts.contains(&id) {
                    texts.push(id);
                }
            }
            composed.push(BatchComposed {
                image,
                bbox: c.bbox,
                texts,
                tags: c.tags.clone(),
                members: c.regions.iter().map(|&r| first + r).collect(),
            });
        }
        images.push(mosaic.canvas);
    }

    Ok(Batch {
        images,
        n_plain: plain.len(),
        grids: groups.iter().map(|(g, _)| *g).collect(),
        texts: table.texts,
        regions,
        composed,
    })
}

/// Greedy nearest-neighbour grouping: each group starts from a random
/// unused item and grows with the unused items most cosine-similar to that
/// seed. Rows of `embeddings` must be unit-norm.
pub fn group_by_similarity<R: Rng + ?Sized>(
    embeddings: &[Vec<f64>],
    sizes: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let needed: usize = sizes.iter().sum();
    if embeddings.len() < needed {
        return Err(Error::Config(format!(
            "similarity pool of {} cannot fill {needed} cells",
            embeddings.len()
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut free: Vec<usize> = (0..embeddings.len()).collect();
    let mut groups = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let seed = free.swap_remove(rng.random_range(0..free.len()));
        let mut group = vec![seed];
        // stable order: most similar first, ties by index
        let mut ranked: Vec<(f64, usize)> = free
            .iter()
            .map(|&j| (dot(&embeddings[seed], &embeddings[j]), j))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        group.extend(ranked.iter().take(size.saturating_sub(1)).map(|&(_, j)| j));
        free.retain(|j| !group.contains(j));
        groups.push(group);
    }
    Ok(groups)
}
