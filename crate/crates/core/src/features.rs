//! Erase-and-restore transform and the classification-vector features built
//! from it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, erase, sample_mask};
use crate::inpaint::{DEFAULT_RADIUS, median_filter, median_restore_masked, telea_inpaint};
use crate::io::{CsvTable, parse_field};
use crate::model::Model;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Restorer {
    Telea,
    /// 3x3 median over the whole erased image.
    Median,
    /// 3x3 median written back only at erased pixels.
    MedianMasked,
    /// Erase only, no restoration.
    None,
}

impl Restorer {
    pub fn name(self) -> &'static str {
        match self {
            Restorer::Telea => "telea",
            Restorer::Median => "median",
            Restorer::MedianMasked => "median-masked",
            Restorer::None => "none",
        }
    }
}

impl fmt::Display for Restorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Restorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "telea" => Ok(Restorer::Telea),
            "median" => Ok(Restorer::Median),
            "median-masked" => Ok(Restorer::MedianMasked),
            "none" => Ok(Restorer::None),
            other => Err(Error::Unknown {
                kind: "restorer",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// Direct for K <= 16, PCA otherwise.
    Auto,
    Direct,
    Pca,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Auto => "auto",
            FeatureMode::Direct => "direct",
            FeatureMode::Pca => "pca",
        }
    }

    pub fn resolve(self, num_classes: usize) -> FeatureMode {
        match self {
            FeatureMode::Auto if num_classes <= 16 => FeatureMode::Direct,
            FeatureMode::Auto => FeatureMode::Pca,
            m => m,
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FeatureMode::Auto),
            "direct" => Ok(FeatureMode::Direct),
            "pca" => Ok(FeatureMode::Pca),
            other => Err(Error::Unknown {
                kind: "feature mode",
                value: other.to_string(),
            }),
        }
    }
}

/// Coordinate order of the classification vectors in direct mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassOrder {
    /// Model class indices.
    Index,
    /// Classes ranked by the unmodified image's probabilities, highest first,
    /// shared by all n + 1 vectors of that image.
    Ranked,
}

impl ClassOrder {
    pub fn name(self) -> &'static str {
        match self {
            ClassOrder::Index => "index",
            ClassOrder::Ranked => "ranked",
        }
    }
}

impl fmt::Display for ClassOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index" => Ok(ClassOrder::Index),
            "ranked" => Ok(ClassOrder::Ranked),
            other => Err(Error::Unknown {
                kind: "class order",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErConfig {
    pub n: usize,
    pub erase_fraction: f64,
    pub pca_dim: usize,
    pub mode: FeatureMode,
    pub class_order: ClassOrder,
    pub restorer: Restorer,
    pub radius: usize,
    pub median_window: usize,
    pub fill: f64,
}

impl Default for ErConfig {
    fn default() -> Self {
        Self {
            n: 11,
            erase_fraction: 0.10,
            pca_dim: 10,
            mode: FeatureMode::Auto,
            class_order: ClassOrder::Ranked,
            restorer: Restorer::Telea,
            radius: DEFAULT_RADIUS,
            median_window: 3,
            fill: 0.0,
        }
    }
}

impl ErConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.erase_fraction) {
            return Err(Error::InvalidArgument(format!(
                "erase fraction {} outside [0, 0.5]",
                self.erase_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.fill) {
            return Err(Error::InvalidArgument("fill must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Checks the config against a model with `num_classes` outputs.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        self.validate()?;
        if self.mode.resolve(num_classes) == FeatureMode::Pca && self.pca_dim > self.n.min(num_classes) {
            return Err(Error::InvalidArgument(format!(
                "pca dimension {} exceeds min(n = {}, K = {num_classes})",
                self.pca_dim, self.n
            )));
        }
        Ok(())
    }

    /// Feature length for a model with `num_classes` outputs.
    pub fn feature_len(&self, num_classes: usize) -> usize {
        match self.mode.resolve(num_classes) {
            FeatureMode::Pca => (self.n + 1) * self.pca_dim,
            _ => (self.n + 1) * num_classes,
        }
    }

    /// Stable one-line description, used in detector files and config hashes.
    pub fn describe(&self) -> String {
        format!(
            "n={} fraction={} d={} mode={} order={} restorer={} radius={} window={} fill={}",
            self.n,
            self.erase_fraction,
            self.pca_dim,
            self.mode,
            self.class_order,
            self.restorer,
            self.radius,
            self.median_window,
            self.fill
        )
    }
}

/// `T(x)`: random erasure followed by restoration.
pub fn erase_and_restore<R: Rng + ?Sized>(image: &Image, config: &ErConfig, rng: &mut R) -> Result<Image> {
    config.validate()?;
    let mask = sample_mask(image.height(), image.width(), config.erase_fraction, rng)?;
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let erased = erase(image, &mask, config.fill)?;
    match config.restorer {
        Restorer::Telea => telea_inpaint(&erased, &mask, config.radius),
        Restorer::Median => median_filter(&erased, config.median_window),
        Restorer::MedianMasked => median_restore_masked(&erased, &mask, config.median_window),
        Restorer::None => Ok(erased),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Wall time spent per stage while building features.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTiming {
    pub restore: Duration,
    pub classify: Duration,
}

impl std::ops::AddAssign for StageTiming {
    fn add_assign(&mut self, rhs: Self) {
        self.restore += rhs.restore;
        self.classify += rhs.classify;
    }
}

pub fn build_feature<R: Rng + ?Sized>(
    model: &Model,
    image: &Image,
    config: &ErConfig,
    rng: &mut R,
) -> Result<FeatureVector> {
    Ok(build_feature_timed(model, image, config, rng)?.0)
}

pub fn build_feature_timed<R: Rng + ?Sized>(
    model: &Model,
    image: &Image,
    config: &ErConfig,
    rng: &mut R,
) -> Result<(FeatureVector, StageTiming)> {
    let k = model.num_classes();
    config.check_classes(k)?;
    let t0 = Instant::now();
    let mut restored = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        restored.push(erase_and_restore(image, config, rng)?);
    }
    let t1 = Instant::now();
    let mut batch: Vec<&Image> = Vec::with_capacity(config.n + 1);
    batch.push(image);
    batch.extend(restored.iter());
    let probs = model.forward_batch(&batch)?;
    let t2 = Instant::now();

    let values: Vec<f64> = match config.mode.resolve(k) {
        FeatureMode::Pca => {
            let rows: Vec<Vec<f64>> = probs.into_iter().map(|p| p.probs).collect();
            let pca = pca_project(&rows, config.pca_dim)?;
            pca.projected.into_iter().flatten().collect()
        }
        _ => match config.class_order {
            ClassOrder::Index => probs.into_iter().flat_map(|p| p.probs).collect(),
            ClassOrder::Ranked => {
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| probs[0].probs[b].total_cmp(&probs[0].probs[a]));
                probs.iter().flat_map(|p| order.iter().map(|&i| p.probs[i])).collect()
            }
        },
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite feature value".into()));
    }
    Ok((
        FeatureVector { values },
        StageTiming {
            restore: t1 - t0,
            classify: t2 - t1,
        },
    ))
}

/// Builds one feature per image in parallel; image `i` draws its masks from
/// stream `(seed, label, i)`.
pub fn build_features(
    model: &Model,
    images: &[&Image],
    config: &ErConfig,
    seed: u64,
    label: &str,
) -> Result<(Vec<FeatureVector>, StageTiming)> {
    let out: Vec<(FeatureVector, StageTiming)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| build_feature_timed(model, img, config, &mut rng::stream(seed, label, i as u64)))
        .collect::<Result<_>>()?;
    let mut timing = StageTiming::default();
    let mut features = Vec::with_capacity(out.len());
    for (f, t) in out {
        timing += t;
        features.push(f);
    }
    Ok((features, timing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Rows projected onto the basis, after centering.
    pub projected: Vec<Vec<f64>>,
    /// `d` orthonormal components, each of length K.
    pub basis: Vec<Vec<f64>>,
    /// Sample variance along each component, non-increasing.
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Principal components of the row samples, largest variance first. Each
/// component is oriented so its largest-magnitude coordinate is positive.
pub fn pca_project(rows: &[Vec<f64>], d: usize) -> Result<PcaResult> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::InvalidArgument("pca needs at least two rows".into()));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: rows.iter().map(Vec::len).find(|&l| l != k).unwrap_or(k),
        });
    }
    if d > (m - 1).min(k) {
        return Err(Error::InvalidArgument(format!(
            "pca dimension {d} exceeds min({}, {k})",
            m - 1
        )));
    }
    let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
    let centered = DMatrix::from_fn(m, k, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (m - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for &idx in order.iter().take(d) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        orient(&mut v);
        basis.push(v);
        variances.push(eig.eigenvalues[idx].max(0.0));
    }
    let projected = (0..m)
        .map(|i| {
            basis
                .iter()
                .map(|b| (0..k).map(|j| centered[(i, j)] * b[j]).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        projected,
        basis,
        variances,
        mean,
    })
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
pub fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub adversarial: bool,
    pub attack: String,
    pub kappa: f64,
    pub values: Vec<f64>,
}

/// Feature table with the config hash that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub config_hash: String,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.values.len())
    }

    pub fn matrix(&self) -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            self.records.iter().map(|r| r.values.clone()).collect(),
            self.records.iter().map(|r| r.adversarial).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.dim().unwrap_or(0);
        let mut header: Vec<String> = ["image_id", "label", "attack", "kappa"].iter().map(|s| s.to_string()).collect();
        header.extend((0..dim).map(|i| format!("f{i}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut table = CsvTable::new(&self.config_hash, &header_refs);
        for r in &self.records {
            if r.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.values.len(),
                });
            }
            let mut row = vec![
                r.id.clone(),
                if r.adversarial { "adversarial" } else { "benign" }.to_string(),
                r.attack.clone(),
                r.kappa.to_string(),
            ];
            row.extend(r.values.iter().map(f64::to_string));
            table.push(row);
        }
        table.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table = CsvTable::load(path)?;
        if table.header.len() < 4 || table.header[..4] != ["image_id", "label", "attack", "kappa"] {
            return Err(Error::malformed(path, "unexpected feature columns"));
        }
        let records = table
            .rows
            .iter()
            .map(|row| {
                let adversarial = match row[1].as_str() {
                    "adversarial" => true,
                    "benign" => false,
                    other => return Err(Error::malformed(path, format!("bad label {other:?}"))),
                };
                Ok(FeatureRecord {
                    id: row[0].clone(),
                    adversarial,
                    attack: row[2].clone(),
                    kappa: parse_field(path, &row[3], "kappa")?,
                    values: row[4..]
                        .iter()
                        .map(|v| parse_field(path, v, "feature"))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config_hash: table.config_hash,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Layer};
    use ndarray::{Array1, Array2};

    fn constant_model(k: usize, side: usize) -> Model {
        let bias = Array1::from_iter((0..k).map(|i| i as f64 * 0.1));
        Model::from_layers(
            Architecture::Custom,
            (side, side, 1),
            k,
            vec![Layer::Dense {
                weight: Array2::zeros((side * side, k)),
                bias,
            }],
        )
        .unwrap()
    }

    fn noisy_image(seed: u64) -> Image {
        let mut s = rng::stream(seed, "img", 0);
        Image::new(32, 32, 1, (0..1024).map(|_| s.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn feature_lengths() {
        let cfg = ErConfig::default();
        assert_eq!(cfg.feature_len(10), 120);
        assert_eq!(cfg.feature_len(26), 120);
        let mut r = rng::stream(1, "f", 0);
        let f10 = build_feature(&constant_model(10, 32), &noisy_image(1), &cfg, &mut r).unwrap();
        assert_eq!(f10.values.len(), 120);
        let f26 = build_feature(&constant_model(26, 32), &noisy_image(1), &cfg, &mut r).unwrap();
        assert_eq!(f26.values.len(), 120);
    }

    #[test]
    fn constant_model_repeats_vector() {
        let m = constant_model(10, 32);
        let cfg = ErConfig {
            mode: FeatureMode::Direct,
            class_order: ClassOrder::Index,
            ..Default::default()
        };
        let f = build_feature(&m, &noisy_image(2), &cfg, &mut rng::stream(1, "f", 0)).unwrap();
        let p = m.forward(&noisy_image(2)).unwrap().probs;
        for chunk in f.values.chunks(10) {
            assert_eq!(chunk, p.as_slice());
        }
        let ranked = ErConfig {
            class_order: ClassOrder::Ranked,
            ..cfg
        };
        let f = build_feature(&m, &noisy_image(2), &ranked, &mut rng::stream(1, "f", 0)).unwrap();
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for chunk in f.values.chunks(10) {
            assert_eq!(chunk, sorted.as_slice());
        }
    }

    #[test]
    fn erase_and_restore_identities() {
        let img = Image::filled(32, 32, 1, 0.6);
        let out = erase_and_restore(&img, &ErConfig::default(), &mut rng::stream(3, "m", 0)).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 0.6).abs() <= 1e-6));
        let noisy = noisy_image(3);
        let zero = ErConfig {
            erase_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(erase_and_restore(&noisy, &zero, &mut rng::stream(3, "m", 0)).unwrap(), noisy);
    }

    #[test]
    fn pca_dimension_checked() {
        let cfg = ErConfig {
            mode: FeatureMode::Pca,
            pca_dim: 12,
            ..Default::default()
        };
        assert!(cfg.check_classes(26).is_err());
        let rows = vec![vec![0.0; 4]; 3];
        assert!(pca_project(&rows, 3).is_err());
    }

    #[test]
    fn pca_degenerate_rows_give_zero_projection() {
        let rows = vec![vec![0.25, 0.75, 0.0]; 5];
        let p = pca_project(&rows, 2).unwrap();
        assert!(p.projected.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(p.variances.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn orientation_makes_largest_positive() {
        let mut v = vec![0.1, -0.9, 0.3];
        orient(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }

    #[test]
    fn feature_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let set = FeatureSet {
            config_hash: "h".into(),
            records: vec![
                FeatureRecord {
                    id: "b0".into(),
                    adversarial: false,
                    attack: "none".into(),
                    kappa: 0.0,
                    values: vec![0.1, 0.2],
                },
                FeatureRecord {
                    id: "a0".into(),
                    adversarial: true,
                    attack: "cw".into(),
                    kappa: 0.4,
                    values: vec![1.0 / 3.0, 2e-17],
                },
            ],
        };
        set.save(&path).unwrap();
        assert_eq!(FeatureSet::load(&path).unwrap(), set);
    }
}
