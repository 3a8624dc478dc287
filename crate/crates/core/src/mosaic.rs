//! Mosaicked canvases built from image-text pairs.
//!
//! A square canvas is split into an `n × n` grid; every cell receives one
//! randomly cropped and resized source image and becomes a *pseudo region*
//! whose ground-truth text is that image's caption. Rectangular blocks of at
//! least two neighbouring cells form *composed regions*, supervised by all of
//! their constituent captions.
//!
//! Cell boundaries sit on integer pixels (`⌊i·S/n⌋`), so region boxes tile
//! the canvas exactly even when `n` does not divide the canvas size.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn square(n: usize) -> Self {
        Self { rows: n, cols: n }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// How the grid of each mosaic is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPolicy {
    /// Always an `n × n` grid.
    Fixed(usize),
    /// Uniform draw over the listed grid sizes.
    Random(Vec<usize>),
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy::Random(vec![2, 3, 4])
    }
}

impl GridPolicy {
    pub fn validate(&self) -> Result<()> {
        let sizes: &[usize] = match self {
            GridPolicy::Fixed(n) => std::slice::from_ref(n),
            GridPolicy::Random(v) => v,
        };
        if sizes.is_empty() {
            return Err(Error::Config("grid policy lists no grid sizes".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        Ok(())
    }

    /// Mean number of cells per mosaic under this policy.
    pub fn expected_cells(&self) -> f64 {
        match self {
            GridPolicy::Fixed(n) => (n * n) as f64,
            GridPolicy::Random(v) => v.iter().map(|n| (n * n) as f64).sum::<f64>() / v.len().max(1) as f64,
        }
    }
}

pub fn plan_grid<R: Rng + ?Sized>(rng: &mut R, policy: &GridPolicy) -> Result<GridSpec> {
    policy.validate()?;
    let n = match policy {
        GridPolicy::Fixed(n) => *n,
        GridPolicy::Random(v) => v[rng.random_range(0..v.len())],
    };
    Ok(GridSpec::square(n))
}

/// Axis-aligned box in canvas pixels, `y` pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    /// `other` lies inside `self`, allowing `tol` pixels of slack per edge.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x0 >= self.x0 - tol && other.y0 >= self.y0 - tol && other.x1 <= self.x1 + tol && other.y1 <= self.y1 + tol
    }

    /// Interiors overlap (touching edges do not count).
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)
    }

    /// Intersection with `[0, w] × [0, h]`.
    pub fn clipped(&self, w: f64, h: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, w),
            self.y0.clamp(0.0, h),
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
        )
    }
}

#[inline]
fn boundary(i: usize, n: usize, size: usize) -> f64 {
    (i * size / n) as f64
}

/// Box of cell `index` (row-major) of `grid` on a `canvas_size` square canvas.
pub fn cell_box(grid: GridSpec, index: usize, canvas_size: usize) -> Result<BBox> {
    if index >= grid.cells() {
        return Err(Error::Mosaic(format!(
            "cell {index} out of range for a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    if grid.rows == 0 || grid.cols == 0 || canvas_size < grid.rows.max(grid.cols) {
        return Err(Error::Mosaic(format!(
            "canvas of {canvas_size}px cannot hold a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let (r, c) = (index / grid.cols, index % grid.cols);
    Ok(BBox::new(
        boundary(c, grid.cols, canvas_size),
        boundary(r, grid.rows, canvas_size),
        boundary(c + 1, grid.cols, canvas_size),
        boundary(r + 1, grid.rows, canvas_size),
    ))
}

/// Random crop window: area fraction and aspect ratio ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub area: [f64; 2],
    pub aspect: [f64; 2],
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            area: [0.5, 1.0],
            aspect: [3.0 / 4.0, 4.0 / 3.0],
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.area;
        let [r0, r1] = self.aspect;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("crop area range {a0}..{a1} must lie in (0, 1]")));
        }
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!("crop aspect range {r0}..{r1} is invalid")));
        }
        Ok(())
    }
}

/// Samples a crop window `(x0, y0, w, h)` inside a `width × height` image.
/// Returns `None` when the window would be narrower than one pixel.
pub fn sample_crop_window<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    crop: &CropConfig,
    rng: &mut R,
) -> Option<[f64; 4]> {
    let (iw, ih) = (width as f64, height as f64);
    let frac = uniform(rng, crop.area[0], crop.area[1]);
    let log_r = uniform(rng, crop.aspect[0].ln(), crop.aspect[1].ln());
    let ratio = log_r.exp();
    let target = frac * iw * ih;
    let w = (target * ratio).sqrt().min(iw);
    let h = (target / ratio).sqrt().min(ih);
    let x0 = rng.random::<f64>() * (iw - w);
    let y0 = rng.random::<f64>() * (ih - h);
    (w >= 1.0 && h >= 1.0).then_some([x0, y0, w, h])
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Randomly crops `image` and resizes the crop to fill `cell`.
pub fn crop_resize_fill<R: Rng + ?Sized>(image: &Image, cell: &BBox, rng: &mut R, crop: &CropConfig) -> Image {
    let (w, h) = (cell.width().round() as usize, cell.height().round() as usize);
    let window = sample_crop_window(image.width(), image.height(), crop, rng).unwrap_or_else(|| {
        warn!("degenerate crop window, resizing the full image instead");
        [0.0, 0.0, image.width() as f64, image.height() as f64]
    });
    image.crop_resize(window, w, h)
}

/// One image-text pair offered to [`build_mosaic`].
#[derive(Debug, Clone, Copy)]
pub struct SourcePair<'a> {
    pub image: &'a Image,
    pub caption: &'a [usize],
    pub tags: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRegion {
    pub bbox: BBox,
    /// Grid cell (row-major) the region fills.
    pub cell: usize,
    pub caption: Vec<usize>,
    pub tags: Vec<usize>,
    /// Index of the source pair within the mosaic's input list.
    pub source: usize,
}

/// A rectangular block of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellBlock {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl CellBlock {
    pub fn cells(&self, grid: GridSpec) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in self.row..self.row + self.rows {
            for c in self.col..self.col + self.cols {
                out.push(r * grid.cols + c);
            }
        }
        out
    }

    pub fn bbox(&self, grid: GridSpec, canvas_size: usize) -> BBox {
        BBox::new(
            boundary(self.col, grid.cols, canvas_size),
            boundary(self.row, grid.rows, canvas_size),
            boundary(self.col + self.cols, grid.cols, canvas_size),
            boundary(self.row + self.rows, grid.rows, canvas_size),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedRegion {
    pub bbox: BBox,
    pub block: CellBlock,
    /// Member cells, row-major.
    pub cells: Vec<usize>,
    /// Pseudo-region indices of the members, in the order of `cells`.
    pub regions: Vec<usize>,
    pub captions: Vec<Vec<usize>>,
    /// Union of the members' tags, sorted.
    pub tags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicSample {
    pub canvas: Image,
    pub grid: GridSpec,
    /// `regions[i]` holds source pair `i`.
    pub regions: Vec<PseudoRegion>,
    pub composed: Vec<ComposedRegion>,
}

impl MosaicSample {
    pub fn canvas_size(&self) -> usize {
        self.canvas.width()
    }

    /// Pseudo-region index occupying each cell.
    pub fn region_of_cell(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.grid.cells()];
        for (i, r) in self.regions.iter().enumerate() {
            out[r.cell] = i;
        }
        out
    }
}

/// Draws `groups` composed blocks, each uniform over all rectangles of at
/// least two cells. Duplicate draws are kept.
pub fn sample_composed_regions<R: Rng + ?Sized>(grid: GridSpec, groups: usize, rng: &mut R) -> Vec<CellBlock> {
    if grid.cells() < 2 {
        if groups > 0 {
            warn!("a 1x1 grid has no composed regions; skipping {groups} draws");
        }
        return Vec::new();
    }
    // Uniform over (row interval, column interval) pairs, rejecting single cells.
    let interval = |rng: &mut R, n: usize| loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a <= b {
            break (a, b - a + 1);
        }
    };
    (0..groups)
        .map(|_| loop {
            let (row, rows) = interval(rng, grid.rows);
            let (col, cols) = interval(rng, grid.cols);
            if rows * cols >= 2 {
                break CellBlock { row, col, rows, cols };
            }
        })
        .collect()
}

/// Builds one mosaic from `samples`, one per grid cell, assigned to cells by
/// a uniform random permutation.
pub fn build_mosaic<R: Rng + ?Sized>(
    samples: &[SourcePair<'_>],
    grid: GridSpec,
    canvas_size: usize,
    composed_groups: usize,
    crop: &CropConfig,
    rng: &mut R,
) -> Result<MosaicSample> {
    if samples.len() != grid.cells() {
        return Err(Error::Mosaic(format!(
            "{} samples offered for a {}x{} grid",
            samples.len(),
            grid.rows,
            grid.cols
        )));
    }
    let mut cells: Vec<usize> = (0..grid.cells()).collect();
    cells.shuffle(rng);

    let mut canvas = Image::new(canvas_size, canvas_size);
    let mut regions = Vec::with_capacity(samples.len());
    for (i, (s, &cell)) in samples.iter().zip(&cells).enumerate() {
        let bbox = cell_box(grid, cell, canvas_size)?;
        let patch = crop_resize_fill(s.image, &bbox, rng, crop);
        canvas.paste(&patch, bbox.x0 as usize, bbox.y0 as usize);
        regions.push(PseudoRegion {
            bbox,
            cell,
            caption: s.caption.to_vec(),
            tags: s.tags.to_vec(),
            source: i,
        });
    }

    let mut owner = vec![0; grid.cells()];
    for (i, &cell) in cells.iter().enumerate() {
        owner[cell] = i;
    }
    let composed = sample_composed_regions(grid, composed_groups, rng)
        .into_iter()
        .map(|block| {
            let member_cells = block.cells(grid);
            let member_regions: Vec<usize> = member_cells.iter().map(|&c| owner[c]).collect();
            let mut tags: Vec<usize> = member_regions
                .iter()
                .flat_map(|&r| regions[r].tags.iter().copied())
                .collect();
            tags.sort_unstable();
            tags.dedup();
            ComposedRegion {
                bbox: block.bbox(grid, canvas_size),
                block,
                captions: member_regions.iter().map(|&r| regions[r].caption.clone()).collect(),
                cells: member_cells,
                regions: member_regions,
                tags,
            }
        })
        .collect();

    Ok(MosaicSample {
        canvas,
        grid,
        regions,
        composed,
    })
}

/// Checks that `boxes` tile the `size × size` canvas: every box inside the
/// canvas, interiors pairwise disjoint, total area equal to the canvas area.
pub fn verify_tiling(boxes: &[BBox], size: usize) -> Result<()> {
    let canvas = BBox::new(0.0, 0.0, size as f64, size as f64);
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() || !canvas.contains(b, 0.0) {
            return Err(Error::Mosaic(format!("box {i} {b:?} is empty or leaves the canvas")));
        }
        for (j, o) in boxes.iter().enumerate().skip(i + 1) {
            if b.overlaps(o) {
                return Err(Error::Mosaic(format!("boxes {i} and {j} overlap")));
            }
        }
    }
    let area: f64 = boxes.iter().map(BBox::area).sum();
    if area != canvas.area() {
        return Err(Error::Mosaic(format!(
            "boxes cover {area} of {} square pixels",
            canvas.area()
        )));
    }
    Ok(())
}

/// Checks that a composed region's members are exactly the cells whose
/// interiors meet its box, and that the box is their union.
pub fn verify_composed(region: &ComposedRegion, grid: GridSpec, size: usize) -> Result<()> {
    let mut touched = Vec::new();
    let mut union: Option<BBox> = None;
    for cell in 0..grid.cells() {
        let cb = cell_box(grid, cell, size)?;
        if cb.overlaps(&region.bbox) {
            touched.push(cell);
        }
        if region.cells.contains(&cell) {
            union = Some(union.map_or(cb, |u| u.union(&cb)));
        }
    }
    if touched != region.cells {
        return Err(Error::Mosaic(format!(
            "composed box {:?} meets cells {touched:?}, members are {:?}",
            region.bbox, region.cells
        )));
    }
    if region.cells.len() < 2 || union != Some(region.bbox) {
        return Err(Error::Mosaic(format!(
            "composed box {:?} is not the union of its {} member cells",
            region.bbox,
            region.cells.len()
        )));
    }
    Ok(())
}

/// Largest candidate lying inside `region` (0.5 px tolerance per edge);
/// ties go to the lowest index. Falls back to the region box itself.
pub fn max_size_box(region: &BBox, candidates: &[BBox]) -> BBox {
    let mut best: Option<&BBox> = None;
    for c in candidates.iter().filter(|c| region.contains(c, 0.5)) {
        if best.is_none_or(|b| c.area() > b.area()) {
            best = Some(c);
        }
    }
    best.copied().unwrap_or(*region)
}

/// Random sub-boxes of `cell` used as stand-in proposals for the tag loss.
pub fn jittered_boxes<R: Rng + ?Sized>(cell: &BBox, count: usize, area: [f64; 2], rng: &mut R) -> Vec<BBox> {
    let crop = CropConfig {
        area,
        aspect: [3.0 / 4.0, 4.0 / 3.0],
    };
    (0..count)
        .map(|_| {
            let [x, y, w, h] = sample_crop_window(
                cell.width().round() as usize,
                cell.height().round() as usize,
                &crop,
                rng,
            )
            .unwrap_or([0.0, 0.0, cell.width(), cell.height()]);
            BBox::new(cell.x0 + x, cell.y0 + y, cell.x0 + x + w, cell.y0 + y + h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cell_boxes() {
        let g2 = GridSpec::square(2);
        assert_eq!(cell_box(g2, 0, 64).unwrap(), BBox::new(0.0, 0.0, 32.0, 32.0));
        assert_eq!(cell_box(g2, 3, 64).unwrap(), BBox::new(32.0, 32.0, 64.0, 64.0));
        let g4 = GridSpec::square(4);
        assert_eq!(cell_box(g4, 5, 64).unwrap(), BBox::new(16.0, 16.0, 32.0, 32.0));
        assert!(cell_box(g2, 4, 64).is_err());
    }

    #[test]
    fn uneven_grid_still_tiles() {
        let g = GridSpec::square(3);
        let boxes: Vec<_> = (0..9).map(|i| cell_box(g, i, 64).unwrap()).collect();
        verify_tiling(&boxes, 64).unwrap();
        assert_eq!(boxes[2].x1, 64.0);
    }

    #[test]
    fn fixed_policy_and_empty_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(plan_grid(&mut rng, &GridPolicy::Fixed(2)).unwrap(), GridSpec::square(2));
        }
        assert!(plan_grid(&mut rng, &GridPolicy::Random(vec![])).is_err());
    }

    #[test]
    fn one_by_one_grid_has_no_composed_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_composed_regions(GridSpec::square(1), 4, &mut rng).is_empty());
    }

    #[test]
    fn composed_top_row_and_full_grid() {
        let g = GridSpec::square(2);
        let top = CellBlock {
            row: 0,
            col: 0,
            rows: 1,
            cols: 2,
        };
        assert_eq!(top.bbox(g, 64), BBox::new(0.0, 0.0, 64.0, 32.0));
        assert_eq!(top.cells(g), vec![0, 1]);
        let all = CellBlock {
            row: 0,
            col: 0,
            rows: 2,
            cols: 2,
        };
        assert_eq!(all.bbox(g, 64), BBox::new(0.0, 0.0, 64.0, 64.0));
        assert_eq!(all.cells(g), vec![0, 1, 2, 3]);
    }

    #[test]
    fn max_size_box_cases() {
        let region = BBox::new(0.0, 0.0, 32.0, 32.0);
        assert_eq!(max_size_box(&region, &[region]), region);
        let inner = BBox::new(4.0, 4.0, 10.0, 10.0);
        let outer = BBox::new(2.0, 2.0, 20.0, 20.0);
        assert_eq!(max_size_box(&region, &[inner, outer]), outer);
        let outside = BBox::new(30.0, 30.0, 40.0, 40.0);
        assert_eq!(max_size_box(&region, &[outside]), region);
        // within the half-pixel tolerance
        let edge = BBox::new(-0.4, 0.0, 32.4, 16.0);
        assert_eq!(max_size_box(&region, &[inner, edge]), edge);
        // ties resolve to the lowest index
        let a = BBox::new(0.0, 0.0, 8.0, 8.0);
        let b = BBox::new(8.0, 8.0, 16.0, 16.0);
        assert_eq!(max_size_box(&region, &[a, b]), a);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let img = Image::new(8, 8);
        let pair = SourcePair {
            image: &img,
            caption: &[],
            tags: &[],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_mosaic(&[pair; 3], GridSpec::square(2), 64, 0, &CropConfig::default(), &mut rng);
        assert!(err.is_err());
    }
}
