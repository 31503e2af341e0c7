//! Adversarial-example classifiers over E&R features, plus detection metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{ClassOrder, ErConfig, FeatureMode, Restorer, build_feature};
use crate::image::Image;
use crate::io::{BinReader, BinWriter};
use crate::model::Model;
use crate::rng;

const DETECTOR_MAGIC: &[u8; 8] = b"ERDDETEC";
const DETECTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Svm,
    AdaBoost,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Svm => "svm",
            DetectorKind::AdaBoost => "adaboost",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(DetectorKind::Svm),
            "adaboost" => Ok(DetectorKind::AdaBoost),
            other => Err(Error::Unknown {
                kind: "detector",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorHyper {
    /// Soft-margin penalty; the regularizer is `1 / (C·N)`.
    pub svm_c: f64,
    pub svm_iterations: usize,
    pub adaboost_rounds: usize,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            svm_c: 1.0,
            svm_iterations: 2000,
            adaboost_rounds: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.weight)
                .zip(self.mean.iter().zip(&self.std))
                .map(|((xi, w), (m, sd))| w * (xi - m) / sd)
                .sum::<f64>()
    }
}

/// Depth-1 tree: votes `polarity` when `x[feature] > threshold`, else `-polarity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: f64,
    pub alpha: f64,
}

impl Stump {
    pub fn vote(&self, x: &[f64]) -> f64 {
        if x[self.feature] > self.threshold {
            self.polarity
        } else {
            -self.polarity
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Svm(LinearSvm),
    AdaBoost(Vec<Stump>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub er_config: ErConfig,
    pub num_classes: usize,
    pub dim: usize,
    pub threshold: f64,
    pub classifier: Classifier,
}

/// Detector output for one input; `adversarial` iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub adversarial: bool,
    pub score: f64,
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self.classifier {
            Classifier::Svm(_) => DetectorKind::Svm,
            Classifier::AdaBoost(_) => DetectorKind::AdaBoost,
        }
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: features.len(),
            });
        }
        Ok(match &self.classifier {
            Classifier::Svm(svm) => svm.margin(features),
            Classifier::AdaBoost(stumps) => stumps.iter().map(|s| s.alpha * s.vote(features)).sum(),
        })
    }

    pub fn classify(&self, features: &[f64]) -> Result<Verdict> {
        let score = self.score(features)?;
        Ok(Verdict {
            adversarial: score >= self.threshold,
            score,
        })
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if model.num_classes() != self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                actual: model.num_classes(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut w = BinWriter::new();
        w.bytes(DETECTOR_MAGIC);
        w.u32(DETECTOR_VERSION);
        w.string(provenance);
        let c = &self.er_config;
        w.u32(c.n as u32);
        w.f64(c.erase_fraction);
        w.u32(c.pca_dim as u32);
        w.string(c.mode.name());
        w.string(c.class_order.name());
        w.string(c.restorer.name());
        w.u32(c.radius as u32);
        w.u32(c.median_window as u32);
        w.f64(c.fill);
        w.u32(self.num_classes as u32);
        w.u32(self.dim as u32);
        w.f64(self.threshold);
        match &self.classifier {
            Classifier::Svm(svm) => {
                w.u8(1);
                w.f64s(&svm.mean);
                w.f64s(&svm.std);
                w.f64s(&svm.weight);
                w.f64(svm.bias);
            }
            Classifier::AdaBoost(stumps) => {
                w.u8(2);
                w.u32(stumps.len() as u32);
                for s in stumps {
                    w.u32(s.feature as u32);
                    w.f64(s.threshold);
                    w.f64(s.polarity);
                    w.f64(s.alpha);
                }
            }
        }
        crate::io::write_atomic(path, &w.into_inner())
    }

    /// Loads a detector file, returning it with its provenance string.
    pub fn load(path: &Path) -> Result<(Detector, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = BinReader::new(&bytes, path);
        r.expect_magic(DETECTOR_MAGIC)?;
        let version = r.u32()?;
        if version != DETECTOR_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DETECTOR_VERSION,
            });
        }
        let provenance = r.string()?;
        let er_config = ErConfig {
            n: r.u32()? as usize,
            erase_fraction: r.f64()?,
            pca_dim: r.u32()? as usize,
            mode: r.string()?.parse::<FeatureMode>().map_err(|e| r.malformed(e.to_string()))?,
            class_order: r.string()?.parse::<ClassOrder>().map_err(|e| r.malformed(e.to_string()))?,
            restorer: r.string()?.parse::<Restorer>().map_err(|e| r.malformed(e.to_string()))?,
            radius: r.u32()? as usize,
            median_window: r.u32()? as usize,
            fill: r.f64()?,
        };
        let num_classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let threshold = r.f64()?;
        let classifier = match r.u8()? {
            1 => Classifier::Svm(LinearSvm {
                mean: r.f64s(dim)?,
                std: r.f64s(dim)?,
                weight: r.f64s(dim)?,
                bias: r.f64()?,
            }),
            2 => {
                let count = r.u32()? as usize;
                let mut stumps = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let s = Stump {
                        feature: r.u32()? as usize,
                        threshold: r.f64()?,
                        polarity: r.f64()?,
                        alpha: r.f64()?,
                    };
                    if s.feature >= dim || !s.alpha.is_finite() {
                        return Err(r.malformed("invalid stump"));
                    }
                    stumps.push(s);
                }
                Classifier::AdaBoost(stumps)
            }
            tag => return Err(r.malformed(format!("unknown classifier tag {tag}"))),
        };
        r.expect_end()?;
        if dim != er_config.feature_len(num_classes) {
            return Err(r.malformed("feature dimension disagrees with feature config"));
        }
        Ok((
            Detector {
                er_config,
                num_classes,
                dim,
                threshold,
                classifier,
            },
            provenance,
        ))
    }
}

fn check_training_set(features: &[Vec<f64>], labels: &[bool]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let dim = features.first().map(Vec::len).unwrap_or(0);
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass(format!(
            "{positives} adversarial of {} samples",
            labels.len()
        )));
    }
    Ok(dim)
}

/// Trains a detector on labelled features (`true` = adversarial).
pub fn train_detector(
    features: &[Vec<f64>],
    labels: &[bool],
    kind: DetectorKind,
    hyper: &DetectorHyper,
    er_config: &ErConfig,
    num_classes: usize,
) -> Result<Detector> {
    let dim = check_training_set(features, labels)?;
    if dim != er_config.feature_len(num_classes) {
        return Err(Error::DimensionMismatch {
            expected: er_config.feature_len(num_classes),
            actual: dim,
        });
    }
    let classifier = match kind {
        DetectorKind::Svm => Classifier::Svm(train_svm(features, labels, hyper)?),
        DetectorKind::AdaBoost => Classifier::AdaBoost(train_adaboost(features, labels, hyper.adaboost_rounds)?),
    };
    Ok(Detector {
        er_config: er_config.clone(),
        num_classes,
        dim,
        threshold: 0.0,
        classifier,
    })
}

/// Soft-margin linear SVM on z-scored features via full-batch Pegasos
/// subgradient steps with iterate averaging. The bias is an extra,
/// regularized weight on a constant feature.
pub fn train_svm(features: &[Vec<f64>], labels: &[bool], hyper: &DetectorHyper) -> Result<LinearSvm> {
    let dim = check_training_set(features, labels)?;
    if !(hyper.svm_c > 0.0) || hyper.svm_iterations == 0 {
        return Err(Error::InvalidArgument("svm needs C > 0 and at least one iteration".into()));
    }
    let n = features.len();
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut row: Vec<f64> = (0..dim).map(|j| (f[j] - mean[j]) / std[j]).collect();
            row.push(1.0);
            row
        })
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();

    let lambda = 1.0 / (hyper.svm_c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; dim + 1];
    let mut avg = vec![0.0; dim + 1];
    let mut averaged = 0usize;
    let start_avg = hyper.svm_iterations / 2;
    let mut grad = vec![0.0; dim + 1];
    for t in 1..=hyper.svm_iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &yi) in z.iter().zip(&y) {
            let m: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            if yi * m < 1.0 {
                for (g, a) in grad.iter_mut().zip(row) {
                    *g += yi * a;
                }
            }
        }
        let eta = 1.0 / (lambda * t as f64);
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi = (1.0 - eta * lambda) * *wi + eta * g / n as f64;
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
        if t > start_avg {
            averaged += 1;
            for (a, wi) in avg.iter_mut().zip(&w) {
                *a += (wi - *a) / averaged as f64;
            }
        }
    }
    if avg.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("svm weights diverged".into()));
    }
    let bias = avg[dim];
    avg.truncate(dim);
    Ok(LinearSvm {
        mean,
        std,
        weight: avg,
        bias,
    })
}

/// Discrete AdaBoost over stumps at midpoints between sorted distinct values.
pub fn train_adaboost(features: &[Vec<f64>], labels: &[bool], rounds: usize) -> Result<Vec<Stump>> {
    let dim = check_training_set(features, labels)?;
    let n = features.len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let sorted: Vec<Vec<usize>> = (0..dim)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| features[a][j].total_cmp(&features[b][j]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut weights = vec![1.0 / n as f64; n];
    let mut stumps = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        // error of "vote +1 above threshold"; the flipped stump has 1 - err
        let mut best: Option<(f64, usize, f64, f64)> = None;
        let total_pos: f64 = (0..n).filter(|&i| y[i] > 0.0).map(|i| weights[i]).sum();
        for (j, idx) in sorted.iter().enumerate() {
            let mut pos_below = 0.0;
            let mut neg_below = 0.0;
            let total_neg = 1.0 - total_pos;
            for k in 0..n - 1 {
                let i = idx[k];
                if y[i] > 0.0 {
                    pos_below += weights[i];
                } else {
                    neg_below += weights[i];
                }
                let (a, b) = (features[i][j], features[idx[k + 1]][j]);
                if a == b {
                    continue;
                }
                let err_plus = pos_below + (total_neg - neg_below);
                let (err, polarity) = if err_plus <= 1.0 - err_plus {
                    (err_plus, 1.0)
                } else {
                    (1.0 - err_plus, -1.0)
                };
                if best.is_none_or(|bst| err < bst.0) {
                    best = Some((err, j, a + (b - a) / 2.0, polarity));
                }
            }
        }
        let Some((err, feature, threshold, polarity)) = best else {
            break;
        };
        if err >= 0.5 - 1e-12 {
            break;
        }
        let e = err.max(1e-10);
        let alpha = 0.5 * ((1.0 - e) / e).ln();
        let stump = Stump {
            feature,
            threshold,
            polarity,
            alpha,
        };
        stumps.push(stump);
        if err <= 1e-12 {
            break;
        }
        let mut sum = 0.0;
        for i in 0..n {
            weights[i] *= (-alpha * y[i] * stump.vote(&features[i])).exp();
            sum += weights[i];
        }
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    if stumps.is_empty() {
        return Err(Error::Precondition("no stump beats chance on the training set".into()));
    }
    Ok(stumps)
}

/// Builds a fresh feature for `image` from `rng` and classifies it.
pub fn detect<R: Rng + ?Sized>(detector: &Detector, model: &Model, image: &Image, rng: &mut R) -> Result<Verdict> {
    detector.check_model(model)?;
    let f = build_feature(model, image, &detector.er_config, rng)?;
    detector.classify(&f.values)
}

/// Scores images in parallel; image `i` uses stream `(seed, label, i)`.
pub fn score_images(detector: &Detector, model: &Model, images: &[&Image], seed: u64, label: &str) -> Result<Vec<f64>> {
    detector.check_model(model)?;
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| Ok(detect(detector, model, img, &mut rng::stream(seed, label, i as u64))?.score))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMetrics {
    pub detection_rate: f64,
    pub fpr: f64,
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC points `(fpr, tpr)` from `(0,0)` to `(1,1)`, one per distinct score,
/// predicting positive when `score >= s`.
pub fn roc_curve(negatives: &[f64], positives: &[f64]) -> Vec<(f64, f64)> {
    roc_with_thresholds(negatives, positives)
        .into_iter()
        .map(|(_, f, t)| (f, t))
        .collect()
}

fn roc_with_thresholds(negatives: &[f64], positives: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, np) = (negatives.len().max(1) as f64, positives.len().max(1) as f64);
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((s, fp as f64 / nn, tp as f64 / np));
    }
    if negatives.is_empty() || positives.is_empty() {
        let last = points.last_mut().expect("non-empty");
        last.1 = 1.0;
        last.2 = 1.0;
    }
    points
}

/// Area under a ROC curve by the trapezoid rule.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Threshold maximizing Youden's J (TPR − FPR); returns `(threshold, fpr, tpr)`.
/// Values `>= threshold` are classified positive.
pub fn youden_split(negatives: &[f64], positives: &[f64]) -> Result<(f64, f64, f64)> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::Precondition("both groups must be non-empty".into()));
    }
    let pts = roc_with_thresholds(negatives, positives);
    let mut best = pts[0];
    for &p in &pts[1..] {
        if p.2 - p.1 > best.2 - best.1 {
            best = p;
        }
    }
    Ok(best)
}

/// DR and FPR at `threshold`, plus the full ROC over scores.
pub fn metrics_from_scores(benign: &[f64], adversarial: &[f64], threshold: f64) -> Result<DetectionMetrics> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::Precondition("evaluation sets must be non-empty".into()));
    }
    let rate = |s: &[f64]| s.iter().filter(|&&v| v >= threshold).count() as f64 / s.len() as f64;
    let roc = roc_curve(benign, adversarial);
    Ok(DetectionMetrics {
        detection_rate: rate(adversarial),
        fpr: rate(benign),
        auc: auc(&roc),
        roc,
    })
}

/// Scores both sets with fresh seeded masks and summarizes.
pub fn evaluate(
    detector: &Detector,
    model: &Model,
    benign: &[&Image],
    adversarial: &[&Image],
    seed: u64,
) -> Result<DetectionMetrics> {
    let b = score_images(detector, model, benign, seed, "eval-benign")?;
    let a = score_images(detector, model, adversarial, seed, "eval-adversarial")?;
    metrics_from_scores(&b, &a, detector.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut s = rng::stream(5, "toy", 0);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..60 {
            let adv = i % 2 == 0;
            let x: f64 = s.random_range(-1.0..1.0);
            let y: f64 = s.random_range(0.2..1.0) * if adv { 1.0 } else { -1.0 };
            f.push(vec![x, y + 0.3 * x]);
            l.push(adv);
        }
        (f, l)
    }

    fn toy_config() -> ErConfig {
        // feature length (n + 1)·K = 2
        ErConfig {
            n: 1,
            mode: FeatureMode::Direct,
            ..Default::default()
        }
    }

    #[test]
    fn svm_separates_toy_data() {
        let (f, l) = toy();
        let d = train_detector(&f, &l, DetectorKind::Svm, &DetectorHyper::default(), &toy_config(), 1).unwrap();
        for (x, &y) in f.iter().zip(&l) {
            assert_eq!(d.classify(x).unwrap().adversarial, y);
        }
    }

    #[test]
    fn adaboost_separates_axis_aligned_data() {
        let f: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let l: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let stumps = train_adaboost(&f, &l, 200).unwrap();
        assert_eq!(stumps.len(), 1);
        assert_eq!(stumps[0].feature, 0);
        assert_eq!(stumps[0].threshold, 9.5);
    }

    #[test]
    fn flipped_labels_mirror_verdicts() {
        let (f, l) = toy();
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        for kind in [DetectorKind::Svm, DetectorKind::AdaBoost] {
            let a = train_detector(&f, &l, kind, &DetectorHyper::default(), &toy_config(), 1).unwrap();
            let b = train_detector(&f, &flipped, kind, &DetectorHyper::default(), &toy_config(), 1).unwrap();
            for x in &f {
                let (sa, sb) = (a.score(x).unwrap(), b.score(x).unwrap());
                assert!((sa + sb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_class_rejected() {
        let f = vec![vec![0.0, 1.0]; 4];
        let err = train_detector(&f, &[true; 4], DetectorKind::Svm, &DetectorHyper::default(), &toy_config(), 1);
        assert!(matches!(err, Err(Error::SingleClass(_))));
    }

    #[test]
    fn dimension_enforced() {
        let (f, l) = toy();
        let d = train_detector(&f, &l, DetectorKind::Svm, &DetectorHyper::default(), &toy_config(), 1).unwrap();
        assert!(matches!(d.score(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rates_and_roc() {
        let benign: Vec<f64> = (0..100).map(|i| if i < 2 { 1.0 } else { -1.0 }).collect();
        let adv: Vec<f64> = (0..100).map(|i| if i < 95 { 1.0 } else { -1.0 }).collect();
        let m = metrics_from_scores(&benign, &adv, 0.0).unwrap();
        assert_eq!(m.detection_rate, 0.95);
        assert_eq!(m.fpr, 0.02);
        assert_eq!(m.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(m.roc.last(), Some(&(1.0, 1.0)));

        let sep = metrics_from_scores(&[-3.0, -2.0], &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(sep.auc, 1.0);
        let (t, fpr, tpr) = youden_split(&[-3.0, -2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((t, fpr, tpr), (1.0, 0.0, 1.0));
    }

    #[test]
    fn detector_file_round_trip() {
        let (f, l) = toy();
        let dir = tempfile::tempdir().unwrap();
        for kind in [DetectorKind::Svm, DetectorKind::AdaBoost] {
            let d = train_detector(&f, &l, kind, &DetectorHyper::default(), &toy_config(), 1).unwrap();
            let p = dir.path().join(format!("{kind}.det"));
            d.save(&p, "cfg").unwrap();
            let (back, prov) = Detector::load(&p).unwrap();
            assert_eq!(back, d);
            assert_eq!(prov, "cfg");
        }
    }
}
