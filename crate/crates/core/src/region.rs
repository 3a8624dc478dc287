//! RoIAlign over a [`DenseFeatureMap`].
//!
//! Boxes are given in canvas pixels and mapped to continuous feature-cell
//! coordinates by dividing by the stride and subtracting half a cell, so the
//! center of cell `i` sits at coordinate `i`. Each output bin averages
//! bilinear samples taken at the centers of a regular sub-grid of the bin.
//! Samples falling beyond the outermost cell centers clamp to the border.
//!
//! Pooling is a fixed linear map from the feature map to the bins, so it is
//! computed as one constant weight matrix times the features, which also
//! makes it differentiable with respect to the map.

use clim_tensor::{Real, Tensor, Var};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoders::DenseFeatureMap;
use crate::error::{Error, Result};
use crate::mosaic::BBox;

/// Bilinear samples per bin along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Fixed(usize),
    /// `ceil(bin extent in cells)` samples, one per covered cell for
    /// cell-aligned boxes.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub output_size: usize,
    pub sampling: Sampling,
}

impl Default for RoiSpec {
    fn default() -> Self {
        Self {
            output_size: 1,
            sampling: Sampling::Fixed(2),
        }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 || self.sampling == Sampling::Fixed(0) {
            return Err(Error::Config(format!("invalid RoIAlign spec {self:?}")));
        }
        Ok(())
    }

    fn samples(&self, bin_cells: f64) -> usize {
        match self.sampling {
            Sampling::Fixed(n) => n,
            Sampling::Adaptive => (bin_cells.ceil() as usize).max(1),
        }
    }
}

/// Linear-interpolation taps at continuous coordinate `x` on an axis of `n`
/// cells: `(lower, upper, upper weight)`.
#[inline]
fn taps(x: f64, n: usize) -> (usize, usize, f64) {
    let x = x.clamp(0.0, (n - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, x - lo as f64)
}

/// Pooling weights of `bbox` on an `h × w` map: `k·k` rows (bins, row-major)
/// of `h·w` weights each (cells, row-major). Every row sums to 1.
pub fn roi_weights(h: usize, w: usize, stride: f64, bbox: &BBox, spec: &RoiSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if h == 0 || w == 0 || stride <= 0.0 {
        return Err(Error::Region(format!("empty {h}x{w} feature map")));
    }
    let (cw, ch) = (w as f64 * stride, h as f64 * stride);
    let clipped = bbox.clipped(cw, ch);
    if clipped != *bbox {
        warn!("box {bbox:?} leaves the {cw}x{ch} canvas; clipping");
    }
    if !clipped.is_valid() {
        return Err(Error::Region(format!("box {bbox:?} has zero area inside the canvas")));
    }
    let k = spec.output_size;
    let (x0, y0) = (clipped.x0 / stride - 0.5, clipped.y0 / stride - 0.5);
    let (bin_w, bin_h) = (
        clipped.width() / stride / k as f64,
        clipped.height() / stride / k as f64,
    );
    let (nx, ny) = (spec.samples(bin_w), spec.samples(bin_h));
    let share = 1.0 / (nx * ny) as f64;
    let mut weights = vec![0.0; k * k * h * w];
    for by in 0..k {
        for bx in 0..k {
            let row = &mut weights[(by * k + bx) * h * w..(by * k + bx + 1) * h * w];
            for iy in 0..ny {
                let y = y0 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ny as f64;
                let (ylo, yhi, fy) = taps(y, h);
                for ix in 0..nx {
                    let x = x0 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / nx as f64;
                    let (xlo, xhi, fx) = taps(x, w);
                    row[ylo * w + xlo] += share * (1.0 - fy) * (1.0 - fx);
                    row[ylo * w + xhi] += share * (1.0 - fy) * fx;
                    row[yhi * w + xlo] += share * fy * (1.0 - fx);
                    row[yhi * w + xhi] += share * fy * fx;
                }
            }
        }
    }
    Ok(weights)
}

/// Pools every `(image index, box)` pair into `k·k` bins; the result is
/// `[regions, k·k·embed_dim]` with bins in row-major order.
pub fn pool_regions<'t, T: Real>(
    map: &DenseFeatureMap<'t, T>,
    boxes: &[(usize, BBox)],
    spec: &RoiSpec,
) -> Result<Var<'t, T>> {
    if boxes.is_empty() {
        return Err(Error::Region("no boxes to pool".into()));
    }
    let (cells, k2) = (map.cells(), spec.output_size * spec.output_size);
    let cols = map.batch * cells;
    let mut data = vec![T::zero(); boxes.len() * k2 * cols];
    for (r, (image, bbox)) in boxes.iter().enumerate() {
        if *image >= map.batch {
            return Err(Error::Region(format!(
                "image {image} out of range for a batch of {}",
                map.batch
            )));
        }
        let w = roi_weights(map.h, map.w, map.stride, bbox, spec)?;
        for bin in 0..k2 {
            let dst = (r * k2 + bin) * cols + image * cells;
            for (d, &s) in data[dst..dst + cells]
                .iter_mut()
                .zip(&w[bin * cells..(bin + 1) * cells])
            {
                *d = T::from_f64_lossy(s);
            }
        }
    }
    let tape = map.features.tape();
    let weights = tape.constant(Tensor::new([boxes.len() * k2, cols], data)?);
    let pooled = weights.matmul(map.features)?;
    if k2 == 1 {
        Ok(pooled)
    } else {
        let d = pooled.shape()[1];
        Ok(pooled.reshape([boxes.len(), k2 * d])?)
    }
}

/// RoIAlign of one box on image `image` of `map`: `[k, k, embed_dim]`.
pub fn roi_align<'t, T: Real>(
    map: &DenseFeatureMap<'t, T>,
    image: usize,
    bbox: &BBox,
    spec: &RoiSpec,
) -> Result<Var<'t, T>> {
    let pooled = pool_regions(map, &[(image, *bbox)], spec)?;
    let d = pooled.shape()[1] / (spec.output_size * spec.output_size);
    Ok(pooled.reshape([spec.output_size, spec.output_size, d])?)
}

/// Unit-norm `1 × 1` RoIAlign embeddings, one row per box, in box order.
pub fn region_embeddings<'t, T: Real>(
    map: &DenseFeatureMap<'t, T>,
    boxes: &[(usize, BBox)],
    sampling: Sampling,
) -> Result<Var<'t, T>> {
    let spec = RoiSpec {
        output_size: 1,
        sampling,
    };
    Ok(pool_regions(map, boxes, &spec)?.l2_normalize()?)
}
