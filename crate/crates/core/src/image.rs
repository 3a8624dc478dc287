//! RGB images with `f32` channels in `[0, 1]`, stored row-major as H×W×3.

use std::path::Path;

use clim_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Bilinear sample position for output index `i` when mapping `out_len`
/// pixels onto a source window starting at `start` with length `len`
/// (pixel centers at half-integers, no corner alignment).
#[inline]
fn source_coord(i: usize, out_len: usize, start: f64, len: f64) -> f64 {
    start + (i as f64 + 0.5) * len / out_len as f64 - 0.5
}

/// Lower index, upper index and upper weight for a clamped linear sample.
#[inline]
fn lerp_taps(x: f64, size: usize) -> (usize, usize, f32) {
    let x = x.clamp(0.0, (size - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, (x - lo as f64) as f32)
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Config(format!(
                "image buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resample of the window `(x0, y0, w, h)` (source pixel units)
    /// into an `out_w × out_h` image. Samples outside the image clamp to the border.
    pub fn crop_resize(&self, window: [f64; 4], out_w: usize, out_h: usize) -> Image {
        let [x0, y0, w, h] = window;
        let xs: Vec<_> = (0..out_w)
            .map(|j| lerp_taps(source_coord(j, out_w, x0, w), self.width))
            .collect();
        let mut out = Image::new(out_w, out_h);
        for i in 0..out_h {
            let (ylo, yhi, wy) = lerp_taps(source_coord(i, out_h, y0, h), self.height);
            for (j, &(xlo, xhi, wx)) in xs.iter().enumerate() {
                let (a, b) = (self.pixel(xlo, ylo), self.pixel(xhi, ylo));
                let (c, d) = (self.pixel(xlo, yhi), self.pixel(xhi, yhi));
                let mut px = [0.0f32; 3];
                for k in 0..3 {
                    let top = a[k] + (b[k] - a[k]) * wx;
                    let bot = c[k] + (d[k] - c[k]) * wx;
                    px[k] = top + (bot - top) * wy;
                }
                out.set_pixel(j, i, px);
            }
        }
        out
    }

    /// Bilinear resize of the whole image.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.crop_resize([0.0, 0.0, self.width as f64, self.height as f64], out_w, out_h)
    }

    /// Copies `patch` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &Image, x: usize, y: usize) {
        for r in 0..patch.height {
            let dst = ((y + r) * self.width + x) * 3;
            let src = r * patch.width * 3;
            self.data[dst..dst + patch.width * 3].copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
    }

    /// Rounds every channel to the nearest multiple of 1/255 so that a PNG
    /// round trip is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Pixel values as an `[H, W, 3]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::new([self.height, self.width, 3], data).expect("image buffer is H*W*3")
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Draws a one-pixel rectangle outline; coordinates are clamped to the image.
    pub fn draw_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: Rgb) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let cx = |v: f64| (v.round().max(0.0) as usize).min(self.width - 1);
        let cy = |v: f64| (v.round().max(0.0) as usize).min(self.height - 1);
        let (l, r) = (cx(x0), cx(x1 - 1.0));
        let (t, b) = (cy(y0), cy(y1 - 1.0));
        for x in l..=r {
            self.set_pixel(x, t, rgb);
            self.set_pixel(x, b, rgb);
        }
        for y in t..=b {
            self.set_pixel(l, y, rgb);
            self.set_pixel(r, y, rgb);
        }
    }
}
