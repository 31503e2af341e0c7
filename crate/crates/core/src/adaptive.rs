//! Multi-restart CW-L2 that tests intermediate iterates against the model and
//! the detector.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use crate::attack::CwRun;
use crate::detect::{Detector, detect};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::CsvTable;
use crate::model::{Model, argmax};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    /// Number of restarts `T`.
    pub restarts: usize,
    pub iterations: usize,
    /// Iterates between checks.
    pub stride: usize,
    pub c_init: f64,
    pub c_max: f64,
    pub learning_rate: f64,
    /// Half-width of the uniform noise added to the source at each restart.
    pub init_noise: f64,
    pub fresh_checks: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            restarts: 50,
            iterations: 100,
            stride: 1,
            c_init: 1.0,
            c_max: 100.0,
            learning_rate: 1e-2,
            init_noise: 0.1,
            fresh_checks: 20,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("iterations and stride must be positive".into()));
        }
        if !(self.c_init > 0.0 && self.c_max >= self.c_init) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("invalid adaptive c range or learning rate".into()));
        }
        if !(0.0..=1.0).contains(&self.init_noise) {
            return Err(Error::InvalidArgument("init_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A bypassing image together with what is needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct Bypass {
    /// 1-based restart index.
    pub restart: usize,
    /// 0-based iteration inside the restart.
    pub iteration: usize,
    pub image: Image,
    pub l2_distortion: f64,
    /// Seed of the detector check that returned benign.
    pub detector_seed: u64,
    /// Fraction of verdicts under further independent seeds that were benign.
    pub fresh_benign_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveEntry {
    pub image_id: String,
    pub bypass: Option<Bypass>,
    pub detector_checks: usize,
}

/// Runs up to `config.restarts` randomly initialized CW runs with `kappa = 0`
/// and stops at the first quantized iterate that reaches `target` and is
/// judged benign by the detector.
pub fn adaptive_cw<R: Rng + ?Sized>(
    model: &Model,
    detector: &Detector,
    image: &Image,
    true_label: usize,
    target: usize,
    config: &AdaptiveConfig,
    rng: &mut R,
) -> Result<(Option<Bypass>, usize)> {
    config.validate()?;
    if model.predict(image)? != true_label {
        return Err(Error::Precondition("source image is misclassified".into()));
    }
    if target >= model.num_classes() || target == true_label {
        return Err(Error::InvalidArgument(format!("invalid target {target}")));
    }
    let (h, w, ch) = image.shape();
    let source = image.pixels();
    let mut c = config.c_init;
    let mut checks = 0;
    for restart in 1..=config.restarts {
        let start: Vec<f64> = source
            .iter()
            .map(|&x| (x + rng.random_range(-config.init_noise..=config.init_noise)).clamp(0.0, 1.0))
            .collect();
        let mut run = CwRun::new(model, source, &start, target, 0.0, c, config.learning_rate);
        let mut reached = false;
        for it in 0..config.iterations {
            let step = run.step()?;
            if it % config.stride != 0 || argmax(&step.logits) != target {
                continue;
            }
            let q = Image::from_clamped(h, w, ch, step.x)?.quantized();
            if model.predict(&q)? != target {
                continue;
            }
            reached = true;
            let seed: u64 = rng.random();
            checks += 1;
            if !detect(detector, model, &q, &mut rng::from_seed(seed))?.adversarial {
                let mut benign = 0;
                for _ in 0..config.fresh_checks {
                    let fresh: u64 = rng.random();
                    if !detect(detector, model, &q, &mut rng::from_seed(fresh))?.adversarial {
                        benign += 1;
                    }
                }
                let l2_distortion = q.l2_distance(image)?;
                return Ok((
                    Some(Bypass {
                        restart,
                        iteration: it,
                        image: q,
                        l2_distortion,
                        detector_seed: seed,
                        fresh_benign_rate: if config.fresh_checks == 0 {
                            f64::NAN
                        } else {
                            benign as f64 / config.fresh_checks as f64
                        },
                    }),
                    checks,
                ));
            }
        }
        if !reached {
            c = (c * 10.0).min(config.c_max);
        }
    }
    Ok((None, checks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveResult {
    pub entries: Vec<AdaptiveEntry>,
    /// `curve[r - 1]` is the fraction bypassed within the first `r` restarts.
    pub curve: Vec<f64>,
    pub wall_time: Duration,
    pub stride: usize,
}

impl AdaptiveResult {
    pub fn bypass_rate(&self) -> f64 {
        self.curve.last().copied().unwrap_or(0.0)
    }
}

/// Cumulative bypass fraction after each restart `1..=restarts`.
pub fn success_curve(entries: &[AdaptiveEntry], restarts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; restarts];
    for e in entries {
        if let Some(b) = e.bypass.as_ref().filter(|b| (1..=restarts).contains(&b.restart)) {
            counts[b.restart - 1] += 1;
        }
    }
    let n = entries.len().max(1) as f64;
    let mut total = 0;
    counts
        .into_iter()
        .map(|k| {
            total += k;
            total as f64 / n
        })
        .collect()
}

/// One campaign entry per `(id, image, true_label, target)`; image `i` draws
/// restarts and detector seeds from stream `(seed, "adaptive", i)`.
pub fn adaptive_campaign(
    model: &Model,
    detector: &Detector,
    images: &[(String, &Image, usize, usize)],
    config: &AdaptiveConfig,
    seed: u64,
) -> Result<AdaptiveResult> {
    let t0 = Instant::now();
    let entries: Vec<AdaptiveEntry> = images
        .par_iter()
        .enumerate()
        .map(|(i, (id, img, label, target))| {
            let mut s = rng::stream(seed, "adaptive", i as u64);
            let (bypass, detector_checks) = adaptive_cw(model, detector, img, *label, *target, config, &mut s)?;
            Ok(AdaptiveEntry {
                image_id: id.clone(),
                bypass,
                detector_checks,
            })
        })
        .collect::<Result<_>>()?;
    let curve = success_curve(&entries, config.restarts);
    Ok(AdaptiveResult {
        entries,
        curve,
        wall_time: t0.elapsed(),
        stride: config.stride,
    })
}

/// Per-image outcomes.
pub fn campaign_csv(result: &AdaptiveResult, config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(
        config_hash,
        &[
            "image_id",
            "bypassed",
            "restart",
            "iteration",
            "l2_distortion",
            "detector_seed",
            "fresh_benign_rate",
            "stride",
        ],
    );
    for e in &result.entries {
        let row = match &e.bypass {
            Some(b) => vec![
                e.image_id.clone(),
                "1".into(),
                b.restart.to_string(),
                b.iteration.to_string(),
                b.l2_distortion.to_string(),
                b.detector_seed.to_string(),
                b.fresh_benign_rate.to_string(),
                result.stride.to_string(),
            ],
            None => vec![
                e.image_id.clone(),
                "0".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                result.stride.to_string(),
            ],
        };
        t.push(row);
    }
    t
}

pub fn curve_csv(result: &AdaptiveResult, config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(config_hash, &["restart", "cumulative_rate"]);
    for (r, v) in result.curve.iter().enumerate() {
        t.push(vec![(r + 1).to_string(), v.to_string()]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(restart: Option<usize>) -> AdaptiveEntry {
        AdaptiveEntry {
            image_id: String::new(),
            bypass: restart.map(|restart| Bypass {
                restart,
                iteration: 0,
                image: Image::filled(1, 1, 1, 0.0),
                l2_distortion: 0.0,
                detector_seed: 0,
                fresh_benign_rate: 0.0,
            }),
            detector_checks: 0,
        }
    }

    #[test]
    fn curve_is_cumulative() {
        let entries = vec![entry(Some(1)), entry(None), entry(Some(3)), entry(Some(1))];
        assert_eq!(success_curve(&entries, 4), vec![0.5, 0.5, 0.75, 0.75]);
        assert!(success_curve(&entries, 0).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(AdaptiveConfig::default().validate().is_ok());
        let bad = AdaptiveConfig {
            stride: 0,
            ..AdaptiveConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
