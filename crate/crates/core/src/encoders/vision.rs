//! ViT-style image encoder with a global `[CLS]` path and a dense path.

use clim_tensor::{Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{LayerNorm, Linear, ResAttnBlock};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            width: 64,
            heads: 4,
            embed_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "vision width {} with {} heads and depth {} is invalid",
                self.width, self.heads, self.depth
            ));
        }
        if self.embed_dim < 2 || self.width < 2 || self.mlp_ratio == 0 {
            return bad("vision widths must be at least 2".into());
        }
        Ok(())
    }

    /// Side length of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }
}

/// Fixed input standardization applied to every channel.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Which outputs [`VisionEncoder::forward`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisionPaths {
    Global,
    Dense,
    Both,
}

impl VisionPaths {
    fn global(self) -> bool {
        self != VisionPaths::Dense
    }

    fn dense(self) -> bool {
        self != VisionPaths::Global
    }
}

/// Per-patch features of a batch of images, `[batch·h·w, embed_dim]` in
/// row-major cell order, before normalization.
#[derive(Clone, Copy)]
pub struct DenseFeatureMap<'t, T: Real> {
    pub features: Var<'t, T>,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    /// Canvas pixels per feature cell.
    pub stride: f64,
}

impl<'t, T: Real> DenseFeatureMap<'t, T> {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Feature rows of image `i`, `[h·w, embed_dim]`.
    pub fn image(&self, i: usize) -> Result<Var<'t, T>> {
        Ok(self.features.slice(0, i * self.cells(), self.cells())?)
    }

    /// Per-cell unit-norm features.
    pub fn normalized(&self) -> Result<Var<'t, T>> {
        Ok(self.features.l2_normalize()?)
    }
}

pub struct VisionOutput<'t, T: Real> {
    /// Unit-norm image embeddings `[batch, embed_dim]`.
    pub global: Option<Var<'t, T>>,
    pub dense: Option<DenseFeatureMap<'t, T>>,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub patch_embed: ParamId,
    pub class_embedding: ParamId,
    pub positional: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<ResAttnBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl VisionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(config: VisionConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let patch_in = 3 * config.patch_size * config.patch_size;
        let scale = (d as f64).powf(-0.5);
        let patch_embed = store.randn("visual.patch_embed", [patch_in, d], (patch_in as f64).powf(-0.5), rng);
        let class_embedding = store.randn("visual.class_embedding", [1, d], scale, rng);
        let positional = store.randn("visual.positional", [config.tokens(), d], scale, rng);
        let ln_pre = LayerNorm::new(store, "visual.ln_pre", d);
        let blocks = (0..config.depth)
            .map(|i| {
                ResAttnBlock::new(
                    store,
                    &format!("visual.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let ln_post = LayerNorm::new(store, "visual.ln_post", d);
        let proj = Linear::new(store, "visual.proj", d, config.embed_dim, scale, false, rng);
        Ok(Self {
            config,
            patch_embed,
            class_embedding,
            positional,
            ln_pre,
            blocks,
            ln_post,
            proj,
        })
    }

    /// Flattens images into `[batch·h·w, 3·p·p]` patch rows, each row ordered
    /// by (row within patch, column within patch, channel). Pixel values are
    /// standardized with [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub fn patchify<T: Real>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (s, p, g) = (self.config.image_size, self.config.patch_size, self.config.grid());
        let row_len = 3 * p * p;
        let mut data = Vec::with_capacity(images.len() * g * g * row_len);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(Error::Config(format!(
                    "vision encoder expects {s}x{s} images, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            let px = img.data();
            for gy in 0..g {
                for gx in 0..g {
                    for y in gy * p..(gy + 1) * p {
                        let start = (y * s + gx * p) * 3;
                        data.extend(
                            px[start..start + 3 * p]
                                .iter()
                                .map(|&v| T::from_f64_lossy((v as f64 - PIXEL_MEAN) / PIXEL_STD)),
                        );
                    }
                }
            }
        }
        Ok(Tensor::new([images.len() * g * g, row_len], data)?)
    }

    /// Token activations entering the final block, `[batch·tokens, width]`.
    pub fn penultimate<'t, T: Real>(&self, p: &Bound<'t, T>, images: &[&Image]) -> Result<Var<'t, T>> {
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Config("vision forward on an empty batch".into()));
        }
        let tape = p[self.patch_embed].tape();
        let cells = self.config.grid() * self.config.grid();
        let patches = tape.constant(self.patchify(images)?).matmul(p[self.patch_embed])?;
        let cls = p[self.class_embedding];
        let mut parts = Vec::with_capacity(2 * batch);
        for i in 0..batch {
            parts.push(cls);
            parts.push(if batch == 1 {
                patches
            } else {
                patches.slice(0, i * cells, cells)?
            });
        }
        let tokens = Var::concat(&parts, 0)?;
        let pos = if batch == 1 {
            p[self.positional]
        } else {
            Var::concat(&vec![p[self.positional]; batch], 0)?
        };
        let mut x = self.ln_pre.forward(p, tokens.add(pos)?)?;
        let t = self.config.tokens();
        for block in &self.blocks[..self.blocks.len() - 1] {
            x = block.forward(p, x, batch, t, None)?;
        }
        Ok(x)
    }

    /// `Emb_out`: final layer norm and output projection.
    pub fn emb_out<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.proj.forward(p, self.ln_post.forward(p, x)?)
    }

    fn gather_tokens<'t, T: Real>(&self, z: Var<'t, T>, batch: usize, cls: bool) -> Result<Var<'t, T>> {
        let t = self.config.tokens();
        let ids: Vec<usize> = if cls {
            (0..batch).map(|i| i * t).collect()
        } else {
            (0..batch).flat_map(|i| i * t + 1..(i + 1) * t).collect()
        };
        Ok(z.gather_rows(&ids)?)
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        images: &[&Image],
        paths: VisionPaths,
    ) -> Result<VisionOutput<'t, T>> {
        let batch = images.len();
        let x = self.penultimate(p, images)?;
        let last = self.blocks.last().expect("depth >= 1");
        let t = self.config.tokens();
        let (z, z_mod) = match paths {
            VisionPaths::Both => {
                let (z, zm) = last.forward_both(p, x, batch, t)?;
                (Some(z), Some(zm))
            }
            VisionPaths::Global => (Some(last.forward(p, x, batch, t, None)?), None),
            VisionPaths::Dense => (None, Some(last.forward_modified(p, x)?)),
        };
        let global = match z.filter(|_| paths.global()) {
            Some(z) => {
                let cls = self.gather_tokens(z, batch, true)?;
                Some(self.emb_out(p, cls)?.l2_normalize()?)
            }
            None => None,
        };
        let dense = match z_mod.filter(|_| paths.dense()) {
            Some(zm) => {
                let cells = self.gather_tokens(zm, batch, false)?;
                Some(DenseFeatureMap {
                    features: self.emb_out(p, cells)?,
                    batch,
                    h: self.config.grid(),
                    w: self.config.grid(),
                    stride: self.config.patch_size as f64,
                })
            }
            None => None,
        };
        Ok(VisionOutput { global, dense })
    }
}
