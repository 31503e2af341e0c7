//! Divergence between `f(x)` and `f(T(x))`, sensitivity sweeps and PCA views.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::attack::AdvExample;
use crate::detect::youden_split;
use crate::error::{Error, Result};
use crate::features::{ErConfig, Restorer, erase_and_restore, pca_project};
use crate::image::Image;
use crate::io::CsvTable;
use crate::model::{Model, ProbVector};
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Kl,
    Wd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Kl => "kl",
            Metric::Wd => "wd",
        }
    }

    pub fn divergence(self, p: &[f64], q: &[f64]) -> Result<f64> {
        match self {
            Metric::Kl => kl_divergence(p, q, DEFAULT_EPSILON),
            Metric::Wd => wasserstein_1d(p, q),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Metric::Kl),
            "wd" => Ok(Metric::Wd),
            other => Err(Error::Unknown {
                kind: "metric",
                value: other.to_string(),
            }),
        }
    }
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

fn smooth(p: &[f64], epsilon: f64) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|&v| v.max(epsilon)).collect();
    let sum: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / sum).collect()
}

/// `KL(p || q)` in nats, both sides floored at `epsilon` and renormalized.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    same_len(p, q)?;
    let (p, q) = (smooth(p, epsilon), smooth(q, epsilon));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// W1 over the class indices as a 1-D support with unit spacing.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total)
}

/// Mean of `metric(f(x), f(T_i(x)))` over `repeats` independent E&R draws.
pub fn mean_divergence<R: Rng + ?Sized>(
    model: &Model,
    image: &Image,
    metric: Metric,
    repeats: usize,
    config: &ErConfig,
    rng: &mut R,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let base = model.forward(image)?;
    let mut restored = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        restored.push(erase_and_restore(image, config, rng)?);
    }
    let refs: Vec<&Image> = restored.iter().collect();
    let outs: Vec<ProbVector> = model.forward_batch(&refs)?;
    let mut sum = 0.0;
    for out in &outs {
        sum += metric.divergence(&base.probs, &out.probs)?;
    }
    Ok(sum / repeats as f64)
}

/// Youden-optimal split of divergence values; `(threshold, fpr, tpr)`.
pub fn roc_threshold_split(benign: &[f64], adversarial: &[f64]) -> Result<(f64, f64, f64)> {
    youden_split(benign, adversarial)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSample {
    pub image_id: String,
    pub adversarial: bool,
    pub metric: Metric,
    pub value: f64,
}

/// Mean divergences for benign and adversarial images. Image `i` of each group
/// draws from stream `(seed, "divergence-benign" | "divergence-adversarial", i)`.
pub fn divergence_table(
    model: &Model,
    benign: &[(String, &Image)],
    adversarial: &[(String, &Image)],
    metrics: &[Metric],
    repeats: usize,
    config: &ErConfig,
    seed: u64,
) -> Result<Vec<DivergenceSample>> {
    let mut out = Vec::new();
    for (group, adv, label) in [
        (benign, false, "divergence-benign"),
        (adversarial, true, "divergence-adversarial"),
    ] {
        for &metric in metrics {
            let values: Vec<f64> = group
                .par_iter()
                .enumerate()
                .map(|(i, (_, img))| {
                    mean_divergence(model, img, metric, repeats, config, &mut rng::stream(seed, label, i as u64))
                })
                .collect::<Result<_>>()?;
            out.extend(group.iter().zip(values).map(|((id, _), value)| DivergenceSample {
                image_id: id.clone(),
                adversarial: adv,
                metric,
                value,
            }));
        }
    }
    Ok(out)
}

pub fn divergence_csv(samples: &[DivergenceSample], config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(config_hash, &["image_id", "label", "metric", "value"]);
    for s in samples {
        t.push(vec![
            s.image_id.clone(),
            label_name(s.adversarial).to_string(),
            s.metric.to_string(),
            s.value.to_string(),
        ]);
    }
    t
}

pub fn label_name(adversarial: bool) -> &'static str {
    if adversarial { "adversarial" } else { "benign" }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub fraction: f64,
    pub acc_erase: f64,
    pub acc_er: f64,
    pub ae_success: f64,
}

/// For each erase fraction: benign accuracy after erase-only, benign accuracy
/// after erase+restore, and the fraction of AEs still succeeding after
/// erase+restore. Targeted AEs succeed when the target is still predicted,
/// untargeted ones when the true label is not.
pub fn run_sensitivity_experiment(
    model: &Model,
    benign: &[(&Image, usize)],
    aes: &[AdvExample],
    fractions: &[f64],
    config: &ErConfig,
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    if benign.is_empty() || aes.is_empty() {
        return Err(Error::Precondition("sensitivity needs benign images and AEs".into()));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for (fi, &fraction) in fractions.iter().enumerate() {
        let erase_only = ErConfig {
            erase_fraction: fraction,
            restorer: Restorer::None,
            ..config.clone()
        };
        let restore = ErConfig {
            erase_fraction: fraction,
            ..config.clone()
        };
        let accuracy = |cfg: &ErConfig, label: &str| -> Result<f64> {
            let hits: Vec<bool> = benign
                .par_iter()
                .enumerate()
                .map(|(i, (img, y))| {
                    let mut s = rng::stream(seed, label, (fi * benign.len() + i) as u64);
                    Ok(model.predict(&erase_and_restore(img, cfg, &mut s)?)? == *y)
                })
                .collect::<Result<_>>()?;
            Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
        };
        let acc_erase = accuracy(&erase_only, "sensitivity-erase")?;
        let acc_er = accuracy(&restore, "sensitivity-er")?;
        let survived: Vec<bool> = aes
            .par_iter()
            .enumerate()
            .map(|(i, ae)| {
                let mut s = rng::stream(seed, "sensitivity-ae", (fi * aes.len() + i) as u64);
                let p = model.predict(&erase_and_restore(&ae.image, &restore, &mut s)?)?;
                Ok(match ae.target_label {
                    Some(t) => p == t,
                    None => p != ae.true_label,
                })
            })
            .collect::<Result<_>>()?;
        rows.push(SensitivityRow {
            fraction,
            acc_erase,
            acc_er,
            ae_success: survived.iter().filter(|&&h| h).count() as f64 / survived.len() as f64,
        });
    }
    Ok(rows)
}

pub fn sensitivity_csv(rows: &[SensitivityRow], config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(config_hash, &["fraction", "acc_erase", "acc_er", "ae_success"]);
    for r in rows {
        t.push(vec![
            r.fraction.to_string(),
            r.acc_erase.to_string(),
            r.acc_er.to_string(),
            r.ae_success.to_string(),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaViewRow {
    pub id: String,
    pub label: String,
    pub pcs: [f64; 3],
}

/// Global PCA of `vectors`, keeping the top three components.
pub fn export_pca_view(ids: &[String], labels: &[String], vectors: &[Vec<f64>]) -> Result<Vec<PcaViewRow>> {
    if vectors.len() < 4 {
        return Err(Error::Precondition("pca view needs at least 4 samples".into()));
    }
    if ids.len() != vectors.len() || labels.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            actual: ids.len().min(labels.len()),
        });
    }
    let pca = pca_project(vectors, 3)?;
    Ok(pca
        .projected
        .into_iter()
        .zip(ids.iter().zip(labels))
        .map(|(p, (id, label))| PcaViewRow {
            id: id.clone(),
            label: label.clone(),
            pcs: [p[0], p[1], p[2]],
        })
        .collect())
}

pub fn pca_view_csv(rows: &[PcaViewRow], config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(config_hash, &["id", "label", "pc1", "pc2", "pc3"]);
    for r in rows {
        t.push(vec![
            r.id.clone(),
            r.label.clone(),
            r.pcs[0].to_string(),
            r.pcs[1].to_string(),
            r.pcs[2].to_string(),
        ]);
    }
    t
}

/// Euclidean distance between the centroids of two labelled groups of a view.
pub fn centroid_distance(rows: &[PcaViewRow], a: &str, b: &str) -> Result<f64> {
    let centroid = |label: &str| -> Result<[f64; 3]> {
        let group: Vec<&PcaViewRow> = rows.iter().filter(|r| r.label == label).collect();
        if group.is_empty() {
            return Err(Error::Precondition(format!("no rows labelled {label}")));
        }
        let mut c = [0.0; 3];
        for r in &group {
            for (ck, pk) in c.iter_mut().zip(r.pcs) {
                *ck += pk / group.len() as f64;
            }
        }
        Ok(c)
    };
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p, 1e-12).unwrap().abs() < 1e-15);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 1e-12).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5], 1e-12).is_err());
    }

    #[test]
    fn wd_cases() {
        let mut a = [0.0; 10];
        let mut b = [0.0; 10];
        a[2] = 1.0;
        b[5] = 1.0;
        assert_eq!(wasserstein_1d(&a, &b).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&b, &a).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn split_separated() {
        let (_, fpr, tpr) = roc_threshold_split(&[0.1, 0.2], &[0.5, 0.9]).unwrap();
        assert_eq!((fpr, tpr), (0.0, 1.0));
    }

    #[test]
    fn pca_view_shapes() {
        let vectors: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64, 1.0, -(i as f64)]).collect();
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let labels: Vec<String> = (0..6).map(|i| if i < 3 { "a" } else { "b" }.to_string()).collect();
        let rows = export_pca_view(&ids, &labels, &vectors).unwrap();
        assert_eq!(rows.len(), 6);
        let var = |k: usize| rows.iter().map(|r| r.pcs[k] * r.pcs[k]).sum::<f64>();
        assert!(var(0) >= var(1) && var(1) >= var(2));
        assert!(centroid_distance(&rows, "a", "b").unwrap() > 0.0);
        assert!(export_pca_view(&ids[..3], &labels[..3], &vectors[..3]).is_err());
    }
}
