//! Deterministic synthetic datasets and the on-disk dataset manifest.
//!
//! Two procedurally drawn families stand in for natural-image benchmarks:
//! `shapes10` (ten geometric pattern classes) and `glyphs26` (the letters
//! A-Z from a 5x7 bitmap font under affine jitter). Both are 32x32
//! grayscale, quantized to 8 bits, and a pure function of `(kind, count,
//! seed)`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, load_image, quantize, save_image};
use crate::rng;

pub const SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Shapes10,
    Glyphs26,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Shapes10 => 10,
            DatasetKind::Glyphs26 => 26,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Shapes10 => "shapes10",
            DatasetKind::Glyphs26 => "glyphs26",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes10" => Ok(DatasetKind::Shapes10),
            "glyphs26" => Ok(DatasetKind::Glyphs26),
            other => Err(Error::Unknown {
                kind: "dataset kind",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Unknown {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stratified split: within each class, the trailing `round(test_fraction · n_c)`
    /// samples (in dataset order) go to the test split.
    pub fn train_test_split(&self, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let counts = self.class_counts();
        let test_quota: Vec<usize> = counts
            .iter()
            .map(|&n| (n as f64 * test_fraction).round() as usize)
            .collect();
        let mut seen = vec![0usize; self.num_classes];
        let (mut train, mut test) = (
            LabeledDataset::new(Vec::new(), Vec::new(), self.num_classes, Split::Train)?,
            LabeledDataset::new(Vec::new(), Vec::new(), self.num_classes, Split::Test)?,
        );
        for (img, &label) in self.images.iter().zip(&self.labels) {
            let target = if seen[label] >= counts[label] - test_quota[label] {
                &mut test
            } else {
                &mut train
            };
            seen[label] += 1;
            target.images.push(img.clone());
            target.labels.push(label);
        }
        Ok((train, test))
    }
}

/// Generates `count_per_class` images per class, interleaved by class.
pub fn generate_dataset(kind: DatasetKind, count_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if count_per_class == 0 {
        return Err(Error::Precondition("count_per_class must be at least 1".into()));
    }
    let k = kind.num_classes();
    let mut images = Vec::with_capacity(k * count_per_class);
    let mut labels = Vec::with_capacity(k * count_per_class);
    for i in 0..count_per_class {
        for class in 0..k {
            let mut s = rng::stream(seed, kind.name(), (i * k + class) as u64);
            let img = match kind {
                DatasetKind::Shapes10 => render_shape(class, &mut s),
                DatasetKind::Glyphs26 => render_glyph(class, &mut s),
            };
            images.push(img);
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, k, Split::Train)
}

pub fn generate_named(kind: &str, count_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    generate_dataset(kind.parse()?, count_per_class, seed)
}

/// Background level, foreground level and noise for one image.
struct Palette {
    background: f64,
    foreground: f64,
    noise: f64,
}

impl Palette {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let background: f64 = rng.random_range(0.6..0.9);
        let contrast: f64 = rng.random_range(0.2..0.35);
        let foreground = (background - contrast).max(0.05);
        Palette {
            background,
            foreground,
            noise: rng.random_range(0.01..0.03),
        }
    }
}

/// Renders an implicit shape with 3x3 supersampling, then adds noise and
/// quantizes.
fn rasterize<R: Rng, F: Fn(f64, f64) -> bool>(rng: &mut R, palette: &Palette, inside: F) -> Image {
    let normal = Normal::new(0.0, palette.noise).expect("finite noise level");
    let mut px = Vec::with_capacity(SIDE * SIDE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let y = r as f64 + (sy as f64 + 0.5) / 3.0;
                    let x = c as f64 + (sx as f64 + 0.5) / 3.0;
                    if inside(x, y) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / 9.0;
            let v = palette.background + alpha * (palette.foreground - palette.background)
                + normal.sample(rng);
            px.push(quantize(v));
        }
    }
    Image::new(SIDE, SIDE, 1, px).expect("rendered image is well formed")
}

fn rotate(x: f64, y: f64, cx: f64, cy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (c * dx + s * dy, -s * dx + c * dy)
}

fn render_shape<R: Rng>(class: usize, rng: &mut R) -> Image {
    let palette = Palette::draw(rng);
    let cx = rng.random_range(13.0..19.0);
    let cy = rng.random_range(13.0..19.0);
    let size = rng.random_range(8.0..10.5);
    let theta = rng.random_range(0.0..2.0 * PI);
    match class {
        // circle
        0 => rasterize(rng, &palette, |x, y| (x - cx).hypot(y - cy) <= size),
        // square
        1 => {
            let half = size * 0.85;
            rasterize(rng, &palette, |x, y| {
                let (u, v) = rotate(x, y, cx, cy, theta);
                u.abs() <= half && v.abs() <= half
            })
        }
        // triangle
        2 => {
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = theta + k as f64 * 2.0 * PI / 3.0;
                    (cx + size * 1.3 * a.cos(), cy + size * 1.3 * a.sin())
                })
                .collect();
            rasterize(rng, &palette, |x, y| point_in_triangle((x, y), &verts))
        }
        // cross
        3 => {
            let arm = size * 1.1;
            let half_width = size * 0.3;
            rasterize(rng, &palette, |x, y| {
                let (u, v) = rotate(x, y, cx, cy, theta);
                (u.abs() <= arm && v.abs() <= half_width) || (v.abs() <= arm && u.abs() <= half_width)
            })
        }
        // ring
        4 => {
            let inner = size * rng.random_range(0.45..0.6);
            rasterize(rng, &palette, |x, y| {
                let d = (x - cx).hypot(y - cy);
                d <= size && d >= inner
            })
        }
        // horizontal stripes
        5 => {
            let period = rng.random_range(5.0..9.0);
            let phase = rng.random_range(0.0..period);
            let tilt = rng.random_range(-0.15..0.15);
            rasterize(rng, &palette, |x, y| {
                let (_, v) = rotate(x, y, 16.0, 16.0, tilt);
                (v + phase).rem_euclid(period) < period / 2.0
            })
        }
        // vertical stripes
        6 => {
            let period = rng.random_range(5.0..9.0);
            let phase = rng.random_range(0.0..period);
            let tilt = rng.random_range(-0.15..0.15);
            rasterize(rng, &palette, |x, y| {
                let (u, _) = rotate(x, y, 16.0, 16.0, tilt);
                (u + phase).rem_euclid(period) < period / 2.0
            })
        }
        // checkerboard
        7 => {
            let cell = rng.random_range(4.0..7.0);
            let ox = rng.random_range(0.0..cell);
            let oy = rng.random_range(0.0..cell);
            rasterize(rng, &palette, |x, y| {
                let i = ((x + ox) / cell).floor() as i64;
                let j = ((y + oy) / cell).floor() as i64;
                (i + j).rem_euclid(2) == 0
            })
        }
        // diagonal band
        8 => {
            let angle = PI / 4.0
                + rng.random_range(-0.2..0.2)
                + if rng.random_bool(0.5) { PI / 2.0 } else { 0.0 };
            let half_width = rng.random_range(3.0..5.0);
            let offset = rng.random_range(-4.0..4.0);
            rasterize(rng, &palette, |x, y| {
                let (_, v) = rotate(x, y, 16.0, 16.0, angle);
                (v - offset).abs() <= half_width
            })
        }
        // blob: elongated ellipse
        _ => {
            let a = size * rng.random_range(1.1..1.25);
            let b = a * rng.random_range(0.3..0.4);
            rasterize(rng, &palette, |x, y| {
                let (u, v) = rotate(x, y, cx, cy, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
    }
}

fn point_in_triangle(p: (f64, f64), v: &[(f64, f64)]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign(p, v[0], v[1]);
    let d2 = sign(p, v[1], v[2]);
    let d3 = sign(p, v[2], v[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

const FONT_5X7: [[u8; 7]; 26] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110], // B
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110], // C
    [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100], // D
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // E
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000], // F
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111], // G
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // H
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // I
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100], // J
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001], // K
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // L
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001], // M
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001], // N
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // O
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000], // P
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101], // Q
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001], // R
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110], // S
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // T
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // U
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100], // V
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010], // W
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001], // X
    [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100], // Y
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // Z
];

fn render_glyph<R: Rng>(class: usize, rng: &mut R) -> Image {
    let palette = Palette::draw(rng);
    let glyph = FONT_5X7[class];
    // glyph cell size in pixels before jitter
    let cell = rng.random_range(3.2..3.9);
    let theta = rng.random_range(-0.18..0.18);
    let shear = rng.random_range(-0.15..0.15);
    let cx = 16.0 + rng.random_range(-2.5..2.5);
    let cy = 16.0 + rng.random_range(-2.5..2.5);
    rasterize(rng, &palette, |x, y| {
        let (u, v) = rotate(x, y, cx, cy, theta);
        let u = u - shear * v;
        let gx = u / cell + 2.5;
        let gy = v / cell + 3.5;
        if !(0.0..5.0).contains(&gx) || !(0.0..7.0).contains(&gy) {
            return false;
        }
        let (col, row) = (gx as usize, gy as usize);
        glyph[row] & (0b10000 >> col) != 0
    })
}

/// One manifest row: image path relative to the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Writes images as PNG files next to a `manifest.csv` listing
/// `path,label,split`. The first line records the class count.
pub fn save_datasets(dir: &Path, datasets: &[&LabeledDataset], header_comment: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = datasets.first().map(|d| d.num_classes).unwrap_or(0);
    let mut manifest = String::new();
    manifest.push_str(&format!("# {header_comment}\n"));
    manifest.push_str(&format!("# classes={k}\n"));
    manifest.push_str("path,label,split\n");
    for ds in datasets {
        for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
            let name = format!("{}_{:05}.png", ds.split.name(), i);
            save_image(&dir.join(&name), img)?;
            manifest.push_str(&format!("{name},{label},{}\n", ds.split.name()));
        }
    }
    crate::io::write_atomic(&dir.join("manifest.csv"), manifest.as_bytes())
}

/// Loads one split from a manifest written by [`save_datasets`].
pub fn load_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let path = dir.join("manifest.csv");
    let file = std::fs::File::open(&path).map_err(|_| Error::MissingInput(path.clone()))?;
    let mut k = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if let Some(rest) = line.strip_prefix("# classes=") {
            k = Some(rest.trim().parse::<usize>().map_err(|e| {
                Error::malformed(&path, format!("line {}: {e}", lineno + 1))
            })?);
            continue;
        }
        if line.starts_with('#') || line.starts_with("path,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::malformed(&path, format!("line {}: expected 3 fields", lineno + 1)));
        }
        if fields[2].parse::<Split>()? != split {
            continue;
        }
        let label = fields[1]
            .parse::<usize>()
            .map_err(|e| Error::malformed(&path, format!("line {}: {e}", lineno + 1)))?;
        images.push(load_image(&dir.join(fields[0]))?);
        labels.push(label);
    }
    let k = k.ok_or_else(|| Error::malformed(&path, "missing '# classes=' line"))?;
    LabeledDataset::new(images, labels, k, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_dataset(DatasetKind::Shapes10, 100, 7).unwrap();
        let b = generate_dataset(DatasetKind::Shapes10, 100, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.class_counts(), vec![100; 10]);
        let c = generate_dataset(DatasetKind::Shapes10, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glyphs_have_26_classes() {
        let d = generate_dataset(DatasetKind::Glyphs26, 2, 3).unwrap();
        assert_eq!(d.num_classes, 26);
        assert_eq!(d.class_counts(), vec![2; 26]);
    }

    #[test]
    fn images_are_bounded_and_quantized() {
        let d = generate_dataset(DatasetKind::Shapes10, 3, 1).unwrap();
        for img in &d.images {
            assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.is_quantized());
            assert_eq!(img.shape(), (32, 32, 1));
        }
    }

    #[test]
    fn unknown_kind_and_zero_count() {
        assert!(generate_named("cifar", 1, 0).is_err());
        assert!(generate_dataset(DatasetKind::Shapes10, 0, 0).is_err());
    }

    #[test]
    fn stratified_split() {
        let d = generate_dataset(DatasetKind::Shapes10, 10, 2).unwrap();
        let (train, test) = d.train_test_split(0.2).unwrap();
        assert_eq!(train.class_counts(), vec![8; 10]);
        assert_eq!(test.class_counts(), vec![2; 10]);
        assert_eq!(test.split, Split::Test);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(DatasetKind::Shapes10, 2, 2).unwrap();
        let (train, test) = d.train_test_split(0.5).unwrap();
        save_datasets(dir.path(), &[&train, &test], "test").unwrap();
        assert_eq!(load_split(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(load_split(dir.path(), Split::Test).unwrap(), test);
    }
}
