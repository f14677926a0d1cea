//! Fundus image normalization and training-time augmentation.
//!
//! The deterministic chain is: crop the dark sensor border, resize to a square
//! target, zero everything outside a centered disc, then smooth with a
//! normalized Gaussian kernel. [`augment`] adds random flips and zoom and is
//! only used on training images.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W×C raster of intensities in `[0, 1]`, stored row-major with interleaved
/// channels (`(y * width + x) * channels + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Callers guarantee the invariants; used by operations that cannot leave `[0, 1]`.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a grid from 8-bit samples, dividing by 255.
    pub fn from_u8(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Loads a PNG or JPEG; grayscale images stay single-channel, everything
    /// else is converted to RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color() {
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 => {
                Self::from_u8(h, w, 1, img.to_luma8().as_raw())
            }
            _ => Self::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        }
    }

    /// Writes an 8-bit PNG/JPEG (format from the extension).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer length matches dimensions")
                .save(path.as_ref())?;
        } else {
            image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer length matches dimensions")
                .save(path.as_ref())?;
        }
        Ok(())
    }

    fn sub_image(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            pixels.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        Self::from_raw(height, width, c, pixels)
    }
}

/// Gaussian smoothing kernel parameters. The window spans `2k + 1` pixels per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernelSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub half_size_k: usize,
}

impl GaussianKernelSpec {
    pub fn new(sigma_x: f64, sigma_y: f64, half_size_k: usize) -> Result<Self> {
        let spec = Self {
            sigma_x,
            sigma_y,
            half_size_k,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Isotropic kernel truncated at `⌈2σ⌉`, with the window capped at `target_size - 1`.
    pub fn for_sigma(sigma: f64, target_size: usize) -> Self {
        let k = (2.0 * sigma).ceil().max(1.0) as usize;
        let cap = (target_size.saturating_sub(2) / 2).max(1);
        Self {
            sigma_x: sigma,
            sigma_y: sigma,
            half_size_k: k.min(cap),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) || !self.sigma_x.is_finite() || !self.sigma_y.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "kernel sigmas must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            )));
        }
        if self.half_size_k == 0 {
            return Err(Error::InvalidConfig("kernel half size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.half_size_k + 1
    }

    /// Normalized 1-D weights along x and y; their outer product is the 2-D kernel.
    pub fn axis_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.half_size_k as i64;
        let axis = |sigma: f64| {
            let w: Vec<f64> = (-k..=k)
                .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                .collect();
            let sum: f64 = w.iter().sum();
            w.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        (axis(self.sigma_x), axis(self.sigma_y))
    }

    /// Full `(2k+1)²` weight matrix indexed `[j + k][i + k]` (row offset j, column offset i).
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let (wx, wy) = self.axis_weights();
        wy.iter()
            .map(|gy| wx.iter().map(|gx| gy * gx).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub dark_threshold: f64,
    pub target_size: usize,
    pub circle_margin: f64,
    pub kernel: GaussianKernelSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dark_threshold: 0.03,
            target_size: 224,
            circle_margin: 0.0,
            kernel: GaussianKernelSpec::for_sigma(10.0, 224),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(0.0..=1.0).contains(&self.dark_threshold) {
            return Err(Error::InvalidConfig(format!(
                "dark_threshold {} outside [0, 1]",
                self.dark_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.circle_margin) {
            return Err(Error::InvalidConfig(format!(
                "circle_margin {} outside [0, 1)",
                self.circle_margin
            )));
        }
        if self.target_size < self.kernel.window() {
            return Err(Error::InvalidConfig(format!(
                "target_size {} is smaller than the blur window {}",
                self.target_size,
                self.kernel.window()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Value written where the zoomed image samples outside the source.
    pub fill_mode: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: 0.15,
            horizontal_flip: true,
            vertical_flip: true,
            fill_mode: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn disabled() -> Self {
        Self {
            zoom_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.zoom_range) {
            return Err(Error::InvalidConfig(format!(
                "zoom_range {} outside [0, 1)",
                self.zoom_range
            )));
        }
        if !(0.0..=1.0).contains(&self.fill_mode) {
            return Err(Error::InvalidConfig(format!(
                "fill value {} outside [0, 1]",
                self.fill_mode
            )));
        }
        Ok(())
    }
}

/// Crops to the bounding box of rows and columns whose maximum intensity
/// exceeds `dark_threshold`. An image with no such row is returned as is.
pub fn crop_dark_border(img: &ImageGrid, dark_threshold: f64) -> ImageGrid {
    let (h, w, c) = img.shape();
    let mut row_bright = vec![false; h];
    let mut col_bright = vec![false; w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            if img.pixels[base..base + c].iter().any(|&v| v > dark_threshold) {
                row_bright[y] = true;
                col_bright[x] = true;
            }
        }
    }
    let span = |flags: &[bool]| {
        let first = flags.iter().position(|&b| b)?;
        let last = flags.iter().rposition(|&b| b)?;
        Some((first, last))
    };
    match (span(&row_bright), span(&col_bright)) {
        (Some((top, bottom)), Some((left, right))) => {
            img.sub_image(top, left, bottom - top + 1, right - left + 1)
        }
        _ => img.clone(),
    }
}

/// Zeroes pixels whose center lies farther than `(size / 2) * (1 - margin)`
/// from the image center.
pub fn apply_circle_mask(img: &ImageGrid, circle_margin: f64) -> Result<ImageGrid> {
    let (h, w, c) = img.shape();
    if h != w {
        return Err(Error::NonSquareInput {
            height: h,
            width: w,
        });
    }
    let radius = (h as f64 / 2.0) * (1.0 - circle_margin);
    let center = h as f64 / 2.0;
    let mut out = img.clone();
    for y in 0..h {
        let dy = y as f64 + 0.5 - center;
        for x in 0..w {
            let dx = x as f64 + 0.5 - center;
            if (dx * dx + dy * dy).sqrt() > radius {
                for ch in 0..c {
                    out.set(y, x, ch, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Zero-pads the shorter side so the image becomes square, keeping it centered.
pub fn pad_to_square(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = img.shape();
    if h == w {
        return img.clone();
    }
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut out = ImageGrid::from_raw(side, side, c, vec![0.0; side * side * c]);
    for y in 0..h {
        let src = y * w * c;
        let dst = ((y + top) * side + left) * c;
        out.pixels[dst..dst + w * c].copy_from_slice(&img.pixels[src..src + w * c]);
    }
    out
}

/// Circle mask for arbitrary input: pads to square first.
pub fn apply_circle_mask_padded(img: &ImageGrid, circle_margin: f64) -> ImageGrid {
    apply_circle_mask(&pad_to_square(img), circle_margin).expect("padded image is square")
}

/// Samples `img` at a fractional position with bilinear interpolation.
/// Coordinates must already be clamped to the valid range.
#[inline]
fn bilinear_at(img: &ImageGrid, fy: f64, fx: f64, c: usize) -> f64 {
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
    let bottom = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Bilinear resize to `target_size × target_size` using pixel-center alignment.
pub fn resize(img: &ImageGrid, target_size: usize) -> ImageGrid {
    let (h, w, c) = img.shape();
    if h == target_size && w == target_size {
        return img.clone();
    }
    let sy = h as f64 / target_size as f64;
    let sx = w as f64 / target_size as f64;
    let mut pixels = Vec::with_capacity(target_size * target_size * c);
    for oy in 0..target_size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for ox in 0..target_size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            for ch in 0..c {
                pixels.push(bilinear_at(img, fy, fx, ch).clamp(0.0, 1.0));
            }
        }
    }
    ImageGrid::from_raw(target_size, target_size, c, pixels)
}

/// Separable Gaussian smoothing with normalized weights and edge replication.
pub fn gaussian_blur(img: &ImageGrid, kernel: &GaussianKernelSpec) -> ImageGrid {
    let (h, w, c) = img.shape();
    let k = kernel.half_size_k as isize;
    let (wx, wy) = kernel.axis_weights();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horizontal = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, weight) in wx.iter().enumerate() {
                    let sx = clamp(x as isize + t as isize - k, w);
                    acc += weight * img.get(y, sx, ch);
                }
                horizontal[(y * w + x) * c + ch] = acc;
            }
        }
    }

    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for (t, weight) in wy.iter().enumerate() {
            let sy = clamp(y as isize + t as isize - k, h);
            let src = &horizontal[sy * w * c..(sy + 1) * w * c];
            let dst = &mut out[y * w * c..(y + 1) * w * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    ImageGrid::from_raw(h, w, c, out)
}

/// Crop, resize, mask, blur.
pub fn preprocess_image(img: &ImageGrid, cfg: &PreprocessConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    let cropped = crop_dark_border(img, cfg.dark_threshold);
    let resized = resize(&cropped, cfg.target_size);
    let masked = apply_circle_mask(&resized, cfg.circle_margin)?;
    Ok(gaussian_blur(&masked, &cfg.kernel))
}

pub fn flip_horizontal(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, img.get(y, w - 1 - x, ch));
            }
        }
    }
    out
}

pub fn flip_vertical(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        let src = (h - 1 - y) * w * c;
        let dst = y * w * c;
        out.pixels[dst..dst + w * c].copy_from_slice(&img.pixels[src..src + w * c]);
    }
    out
}

/// Scales content about the image center by `factor` (> 1 enlarges).
/// Destination pixels that map outside the source get `fill`.
pub fn zoom(img: &ImageGrid, factor: f64, fill: f64) -> ImageGrid {
    let (h, w, c) = img.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let fy = cy + (y as f64 - cy) / factor;
        for x in 0..w {
            let fx = cx + (x as f64 - cx) / factor;
            let inside = fy >= 0.0 && fy <= (h - 1) as f64 && fx >= 0.0 && fx <= (w - 1) as f64;
            for ch in 0..c {
                pixels.push(if inside {
                    bilinear_at(img, fy, fx, ch).clamp(0.0, 1.0)
                } else {
                    fill
                });
            }
        }
    }
    ImageGrid::from_raw(h, w, c, pixels)
}

/// Random flips (probability 0.5 each, when enabled) and a uniform zoom in
/// `[1 - zoom_range, 1 + zoom_range]`. Always consumes three draws from `rng`
/// so the stream position does not depend on the config.
pub fn augment<R: Rng + ?Sized>(img: &ImageGrid, cfg: &AugmentConfig, rng: &mut R) -> ImageGrid {
    let flip_h = rng.gen_bool(0.5);
    let flip_v = rng.gen_bool(0.5);
    let u: f64 = rng.gen();
    let mut out = img.clone();
    if cfg.horizontal_flip && flip_h {
        out = flip_horizontal(&out);
    }
    if cfg.vertical_flip && flip_v {
        out = flip_vertical(&out);
    }
    if cfg.zoom_range > 0.0 {
        let factor = 1.0 - cfg.zoom_range + 2.0 * cfg.zoom_range * u;
        out = zoom(&out, factor, cfg.fill_mode);
    }
    out
}
