//! Image and mask data model.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::seq::index;

use crate::error::{Error, Result};

/// Dense `height × width × channels` pixel grid, row-major with interleaved
/// channels, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width * channels),
                actual: format!("{} values", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[self.index(row, col, channel)]
    }

    /// Sets a value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.pixels[i] = value.clamp(0.0, 1.0);
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.pixels.iter().all(|&v| quantize(v) == v)
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                actual: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }

    pub fn l2_distance(&self, other: &Image) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        let d = self.l2_distance(other)?;
        Ok(d * d / self.pixels.len() as f64)
    }

    /// Peak signal-to-noise ratio in dB against `reference` (peak 1.0).
    /// Identical images give `f64::INFINITY`.
    pub fn psnr(&self, reference: &Image) -> Result<f64> {
        let mse = self.mse(reference)?;
        Ok(if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        })
    }
}

#[inline]
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Set of erased pixel coordinates. Erasing a pixel erases all of its channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    coords: Vec<(usize, usize)>,
}

impl Mask {
    pub fn new(height: usize, width: usize, coords: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(coords.len());
        for &(r, c) in &coords {
            if r >= height || c >= width {
                return Err(Error::InvalidArgument(format!(
                    "mask coordinate ({r}, {c}) outside {height}x{width}"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate mask coordinate ({r}, {c})"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            coords: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Dense row-major membership grid.
    pub fn to_grid(&self) -> Vec<bool> {
        let mut grid = vec![false; self.height * self.width];
        for &(r, c) in &self.coords {
            grid[r * self.width + c] = true;
        }
        grid
    }

    fn check_matches(&self, image: &Image) -> Result<()> {
        if (self.height, self.width) != (image.height(), image.width()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} image", self.height, self.width),
                actual: format!("{}x{} image", image.height(), image.width()),
            });
        }
        Ok(())
    }
}

/// Number of pixels erased for a given fraction: `round(fraction · H · W)`.
pub fn erased_count(height: usize, width: usize, erase_fraction: f64) -> usize {
    (erase_fraction * (height * width) as f64).round() as usize
}

/// Draws `round(erase_fraction · H · W)` distinct pixel positions uniformly
/// without replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    erase_fraction: f64,
    rng: &mut R,
) -> Result<Mask> {
    if !(0.0..=0.5).contains(&erase_fraction) {
        return Err(Error::Precondition(format!(
            "erase fraction must lie in [0, 0.5], got {erase_fraction}"
        )));
    }
    let total = height * width;
    let count = erased_count(height, width, erase_fraction);
    let coords = index::sample(rng, total, count)
        .into_iter()
        .map(|i| (i / width, i % width))
        .collect();
    Ok(Mask {
        height,
        width,
        coords,
    })
}

/// Sets every channel of every masked pixel to `fill`.
pub fn erase(image: &Image, mask: &Mask, fill: f64) -> Result<Image> {
    mask.check_matches(image)?;
    let mut out = image.clone();
    for &(r, c) in mask.coords() {
        for ch in 0..image.channels() {
            out.set(r, c, ch, fill);
        }
    }
    Ok(out)
}

pub(crate) fn check_mask(image: &Image, mask: &Mask) -> Result<()> {
    mask.check_matches(image)
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match image.channels() {
        1 => ::image::ExtendedColorType::L8,
        _ => ::image::ExtendedColorType::Rgb8,
    };
    if let Some(parent) = path.parent()
        && !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    ::image::save_buffer_with_format(
        path,
        &bytes,
        image.width() as u32,
        image.height() as u32,
        color,
        ::image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        ::image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::malformed(path, other.to_string()),
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded.color().channel_count() {
        1 | 2 => (1, decoded.into_luma8().into_raw()),
        _ => (3, decoded.into_rgb8().into_raw()),
    };
    let pixels = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(h, w, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(h: usize, w: usize) -> Image {
        let px = (0..h * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect();
        Image::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(Image::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
    }

    #[test]
    fn mask_size_is_rounded_fraction() {
        let mut s = rng::stream(1, "t", 0);
        assert_eq!(sample_mask(32, 32, 0.10, &mut s).unwrap().len(), 102);
        assert!(sample_mask(32, 32, 0.0, &mut s).unwrap().is_empty());
        assert!(sample_mask(32, 32, 0.6, &mut s).is_err());
    }

    #[test]
    fn mask_rejects_duplicates_and_out_of_bounds() {
        assert!(Mask::new(4, 4, vec![(1, 1), (1, 1)]).is_err());
        assert!(Mask::new(4, 4, vec![(4, 0)]).is_err());
    }

    #[test]
    fn erase_semantics() {
        let img = ramp(8, 8);
        assert_eq!(erase(&img, &Mask::empty(8, 8), 0.0).unwrap(), img);

        let mask = Mask::new(8, 8, vec![(0, 3), (2, 5), (7, 7)]).unwrap();
        let once = erase(&img, &mask, 0.0).unwrap();
        let changed = once
            .pixels()
            .iter()
            .zip(img.pixels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 3);
        assert_eq!(erase(&once, &mask, 0.0).unwrap(), once);

        assert!(erase(&img, &Mask::empty(4, 8), 0.0).is_err());
    }

    #[test]
    fn erase_spans_channels() {
        let img = Image::filled(4, 4, 3, 0.7);
        let mask = Mask::new(4, 4, vec![(1, 2)]).unwrap();
        let out = erase(&img, &mask, 0.0).unwrap();
        assert_eq!((0..3).map(|c| out.get(1, 2, c)).sum::<f64>(), 0.0);
        assert_eq!(out.get(1, 1, 0), 0.7);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.png");
        let img = ramp(7, 9);
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        let max_err = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 255.0);

        let zeros = Image::filled(5, 5, 3, 0.0);
        save_image(&path, &zeros).unwrap();
        assert_eq!(load_image(&path).unwrap(), zeros);
    }

    #[test]
    fn truncated_png_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_image(&path, &ramp(16, 16)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = ramp(4, 4);
        assert!(img.psnr(&img).unwrap().is_infinite());
    }
}
