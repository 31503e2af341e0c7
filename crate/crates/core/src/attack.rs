//! L2 adversarial example generation: targeted CW-L2 and untargeted DeepFool.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{Image, load_image, save_image};
use crate::io::{CsvTable, parse_field};
use crate::model::{Model, ScalarSpec, argmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    CwL2,
    DeepFool,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::CwL2 => "cw",
            AttackKind::DeepFool => "deepfool",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cw" | "cw_l2" => Ok(AttackKind::CwL2),
            "deepfool" => Ok(AttackKind::DeepFool),
            other => Err(Error::Unknown {
                kind: "attack",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kappa: f64,
    pub c_init: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub binary_steps: usize,
    pub overshoot: f64,
    pub max_deepfool_iterations: usize,
    /// Require the 8-bit quantized image to succeed, not just the continuous iterate.
    pub quantize: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            c_init: 0.1,
            c_min: 1e-3,
            c_max: 1e2,
            learning_rate: 1e-2,
            iterations: 500,
            binary_steps: 6,
            overshoot: 0.02,
            max_deepfool_iterations: 50,
            quantize: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.c_init,
            self.c_min,
            self.c_max,
            self.learning_rate,
            self.overshoot,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("attack parameters must be positive".into()));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::InvalidArgument("kappa must be >= 0".into()));
        }
        if self.c_min > self.c_max || self.iterations == 0 || self.binary_steps == 0 || self.max_deepfool_iterations == 0
        {
            return Err(Error::InvalidArgument("inconsistent attack budget".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvExample {
    pub image: Image,
    pub source_index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub target_label: Option<usize>,
    pub kind: AttackKind,
    pub kappa: f64,
    pub l2_distortion: f64,
    pub seed: u64,
}

impl AdvExample {
    /// Re-checks the stored claims against `model` and the source image.
    pub fn verify(&self, model: &Model, source: &Image) -> Result<()> {
        let logits = model.forward(&self.image)?.logits;
        let predicted = argmax(&logits);
        if predicted != self.predicted_label || predicted == self.true_label {
            return Err(Error::Precondition(format!(
                "example from source {} predicts {predicted}, recorded {} (true {})",
                self.source_index, self.predicted_label, self.true_label
            )));
        }
        if let (AttackKind::CwL2, Some(t)) = (self.kind, self.target_label) {
            let m = margin(&logits, t);
            if m < self.kappa - 1e-4 {
                return Err(Error::Precondition(format!(
                    "example from source {} has margin {m} < kappa {}",
                    self.source_index, self.kappa
                )));
            }
        }
        let l2 = self.image.l2_distance(source)?;
        if (l2 - self.l2_distortion).abs() > 1e-5 {
            return Err(Error::Precondition(format!(
                "example from source {} has distortion {l2}, recorded {}",
                self.source_index, self.l2_distortion
            )));
        }
        Ok(())
    }
}

/// The class after `true_label`, wrapping around.
pub fn next_class_target(true_label: usize, num_classes: usize) -> usize {
    (true_label + 1) % num_classes
}

/// `Z_target - max_{i != target} Z_i`.
pub fn margin(logits: &[f64], target: usize) -> f64 {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[target] - best_other
}

fn best_other(logits: &[f64], target: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &z) in logits.iter().enumerate() {
        if i != target && (best == usize::MAX || z > logits[best]) {
            best = i;
        }
    }
    best
}

fn check_source(model: &Model, image: &Image, label: usize) -> Result<()> {
    let predicted = model.predict(image)?;
    if predicted != label {
        return Err(Error::Precondition(format!(
            "source is misclassified as {predicted} (label {label})"
        )));
    }
    Ok(())
}

/// State for one CW optimization run at a fixed `c`.
pub(crate) struct CwRun<'a> {
    pub model: &'a Model,
    pub source: &'a [f64],
    pub target: usize,
    pub kappa: f64,
    pub c: f64,
    pub learning_rate: f64,
    w: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// One evaluated CW iterate.
pub(crate) struct CwStep {
    pub x: Vec<f64>,
    pub logits: Vec<f64>,
    pub loss: f64,
}

impl<'a> CwRun<'a> {
    pub fn new(model: &'a Model, source: &'a [f64], start: &[f64], target: usize, kappa: f64, c: f64, lr: f64) -> Self {
        let w = start.iter().map(|&x| ((2.0 * x - 1.0) * (1.0 - 1e-6)).atanh()).collect();
        let n = start.len();
        Self {
            model,
            source,
            target,
            kappa,
            c,
            learning_rate: lr,
            w,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Evaluates the current iterate, then takes one Adam step.
    pub fn step(&mut self) -> Result<CwStep> {
        let x: Vec<f64> = self.w.iter().map(|&w| (w.tanh() + 1.0) / 2.0).collect();
        let logits = self.model.logits_raw(&x)?;
        let other = best_other(&logits, self.target);
        let g = logits[other] - logits[self.target];
        let active = g > -self.kappa;
        let l2sq: f64 = x.iter().zip(self.source).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = l2sq + self.c * g.max(-self.kappa);

        let mut grad_x: Vec<f64> = x.iter().zip(self.source).map(|(a, b)| 2.0 * (a - b)).collect();
        if active {
            let spec = ScalarSpec::LogitDifference {
                plus: other,
                minus: self.target,
            };
            let gg = self.model.input_gradient_raw(&x, &spec)?;
            for (gx, d) in grad_x.iter_mut().zip(&gg.gradient) {
                *gx += self.c * d;
            }
        }

        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for i in 0..self.w.len() {
            let th = self.w[i].tanh();
            let gw = grad_x[i] * (1.0 - th * th) / 2.0;
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * gw;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * gw * gw;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            self.w[i] -= self.learning_rate * mhat / (vhat.sqrt() + EPS);
        }
        Ok(CwStep { x, logits, loss })
    }
}

fn quantized_success(
    model: &Model,
    x: &[f64],
    shape: (usize, usize, usize),
    target: usize,
    kappa: f64,
) -> Result<Option<(Image, Vec<f64>)>> {
    let (h, w, c) = shape;
    let q = Image::from_clamped(h, w, c, x.to_vec())?.quantized();
    let logits = model.forward(&q)?.logits;
    let ok = argmax(&logits) == target && margin(&logits, target) >= kappa;
    Ok(ok.then_some((q, logits)))
}

/// Targeted CW-L2 with binary search over `c`. `Ok(None)` means the search
/// found no example that succeeds after quantization.
pub fn cw_l2(
    model: &Model,
    image: &Image,
    true_label: usize,
    target: usize,
    config: &AttackConfig,
) -> Result<Option<AdvExample>> {
    config.validate()?;
    check_source(model, image, true_label)?;
    if target >= model.num_classes() || target == true_label {
        return Err(Error::InvalidArgument(format!("invalid target {target}")));
    }
    let source = image.pixels();
    let (mut lo, mut hi) = (config.c_min, config.c_max);
    let mut c = config.c_init.clamp(lo, hi);
    let mut found_upper = false;
    let mut best: Option<(f64, Image, Vec<f64>)> = None;
    let check_every = (config.iterations / 10).max(1);

    for _ in 0..config.binary_steps {
        let mut run = CwRun::new(model, source, source, target, config.kappa, c, config.learning_rate);
        let mut succeeded = false;
        let mut prev = f64::INFINITY;
        for it in 0..config.iterations {
            let step = run.step()?;
            if argmax(&step.logits) == target && margin(&step.logits, target) >= config.kappa {
                let candidate = if config.quantize {
                    quantized_success(model, &step.x, image.shape(), target, config.kappa)?
                } else {
                    let (h, w, ch) = image.shape();
                    Some((Image::from_clamped(h, w, ch, step.x.clone())?, step.logits.clone()))
                };
                if let Some((img, logits)) = candidate {
                    succeeded = true;
                    let l2 = img.l2_distance(image)?;
                    if best.as_ref().is_none_or(|b| l2 < b.0) {
                        best = Some((l2, img, logits));
                    }
                }
            }
            if it % check_every == 0 {
                if step.loss > prev * 0.9999 {
                    break;
                }
                prev = step.loss;
            }
        }
        if succeeded {
            hi = hi.min(c);
            found_upper = true;
            c = (lo + hi) / 2.0;
        } else {
            lo = lo.max(c);
            c = if found_upper { (lo + hi) / 2.0 } else { (c * 10.0).min(hi) };
        }
    }

    Ok(best.map(|(l2, img, logits)| AdvExample {
        image: img,
        source_index: 0,
        true_label,
        predicted_label: argmax(&logits),
        target_label: Some(target),
        kind: AttackKind::CwL2,
        kappa: config.kappa,
        l2_distortion: l2,
        seed: 0,
    }))
}

/// Result of a DeepFool run, including the number of linearization steps.
#[derive(Debug, Clone)]
pub struct DeepFoolOutcome {
    pub example: AdvExample,
    pub iterations: usize,
}

/// Untargeted multiclass DeepFool with overshoot. `Ok(None)` on budget exhaustion.
pub fn deepfool(model: &Model, image: &Image, true_label: usize, config: &AttackConfig) -> Result<Option<DeepFoolOutcome>> {
    config.validate()?;
    check_source(model, image, true_label)?;
    let (h, w, ch) = image.shape();
    let x0 = image.pixels();
    let k = model.num_classes();
    let classes: Vec<usize> = (0..k).collect();
    let mut r_tot = vec![0.0; x0.len()];
    let mut x = x0.to_vec();

    for iteration in 0..=config.max_deepfool_iterations {
        let (logits, jac) = model.logit_jacobian(&x, &classes)?;
        if argmax(&logits) != true_label {
            // Quantization can undo a marginal crossing; retry with a growing
            // overshoot on the accumulated perturbation before iterating on.
            let escalations = if config.quantize { 7 } else { 1 };
            for j in 0..escalations {
                let factor = 1.0 + config.overshoot * f64::from(1u32 << j);
                let pixels: Vec<f64> = x0.iter().zip(&r_tot).map(|(a, r)| a + factor * r).collect();
                let candidate = Image::from_clamped(h, w, ch, pixels)?;
                let candidate = if config.quantize { candidate.quantized() } else { candidate };
                let predicted = model.predict(&candidate)?;
                if predicted != true_label {
                    let l2 = candidate.l2_distance(image)?;
                    return Ok(Some(DeepFoolOutcome {
                        example: AdvExample {
                            image: candidate,
                            source_index: 0,
                            true_label,
                            predicted_label: predicted,
                            target_label: None,
                            kind: AttackKind::DeepFool,
                            kappa: 0.0,
                            l2_distortion: l2,
                            seed: 0,
                        },
                        iterations: iteration,
                    }));
                }
            }
        }
        if iteration == config.max_deepfool_iterations {
            break;
        }
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for l in (0..k).filter(|&l| l != true_label) {
            let f = logits[l] - logits[true_label];
            let wl: Vec<f64> = jac[l].iter().zip(&jac[true_label]).map(|(a, b)| a - b).collect();
            let norm = wl.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let dist = f.abs() / norm;
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, f, wl));
            }
        }
        let Some((_, f, wl)) = best else {
            return Ok(None);
        };
        let norm2: f64 = wl.iter().map(|v| v * v).sum();
        let scale = f.abs() / norm2;
        for (r, wv) in r_tot.iter_mut().zip(&wl) {
            *r += scale * wv;
        }
        for ((xi, x0i), r) in x.iter_mut().zip(x0).zip(&r_tot) {
            *xi = (x0i + (1.0 + config.overshoot) * r).clamp(0.0, 1.0);
        }
    }
    Ok(None)
}

/// Per-source outcome of a batch attack.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub source_index: usize,
    pub example: Option<AdvExample>,
}

/// Attacks each listed source of `data` (which must be correctly classified).
/// CW targets the next class. Results come back in input order.
pub fn attack_batch(
    model: &Model,
    data: &LabeledDataset,
    sources: &[usize],
    kind: AttackKind,
    config: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackOutcome>> {
    sources
        .par_iter()
        .map(|&i| {
            let image = &data.images[i];
            let label = data.labels[i];
            let example = match kind {
                AttackKind::CwL2 => cw_l2(model, image, label, next_class_target(label, data.num_classes), config)?,
                AttackKind::DeepFool => deepfool(model, image, label, config)?.map(|o| o.example),
            };
            Ok(AttackOutcome {
                source_index: i,
                example: example.map(|mut e| {
                    e.source_index = i;
                    e.seed = seed;
                    e
                }),
            })
        })
        .collect()
}

/// Indices of images the model classifies correctly.
pub fn correctly_classified(model: &Model, data: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        if model.predict(img)? == label {
            out.push(i);
        }
    }
    Ok(out)
}

const AE_COLUMNS: [&str; 9] = [
    "file",
    "source_id",
    "true_label",
    "target_label",
    "predicted_label",
    "attack",
    "kappa",
    "l2_distortion",
    "seed",
];

/// Writes AE images plus `manifest.csv` into `dir`.
pub fn save_ae_store(dir: &Path, examples: &[AdvExample], config_hash: &str) -> Result<()> {
    let mut table = CsvTable::new(config_hash, &AE_COLUMNS);
    for (i, ae) in examples.iter().enumerate() {
        let file = format!("ae_{i:05}.png");
        save_image(&dir.join(&file), &ae.image)?;
        table.push(vec![
            file,
            ae.source_index.to_string(),
            ae.true_label.to_string(),
            ae.target_label.map(|t| t.to_string()).unwrap_or_default(),
            ae.predicted_label.to_string(),
            ae.kind.to_string(),
            ae.kappa.to_string(),
            ae.l2_distortion.to_string(),
            ae.seed.to_string(),
        ]);
    }
    table.save(&dir.join("manifest.csv"))
}

/// Loads an AE store; `expected_hash` rejects stores from another config.
pub fn load_ae_store(dir: &Path, expected_hash: Option<&str>) -> Result<Vec<AdvExample>> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let table = match expected_hash {
        Some(h) => CsvTable::load_checked(&path, h)?,
        None => CsvTable::load(&path)?,
    };
    if table.header != AE_COLUMNS {
        return Err(Error::malformed(&path, "unexpected AE manifest columns"));
    }
    table
        .rows
        .iter()
        .map(|row| {
            let target = if row[3].is_empty() {
                None
            } else {
                Some(parse_field(&path, &row[3], "target label")?)
            };
            Ok(AdvExample {
                image: load_image(&dir.join(&row[0]))?,
                source_index: parse_field(&path, &row[1], "source id")?,
                true_label: parse_field(&path, &row[2], "true label")?,
                target_label: target,
                predicted_label: parse_field(&path, &row[4], "predicted label")?,
                kind: row[5].parse()?,
                kappa: parse_field(&path, &row[6], "kappa")?,
                l2_distortion: parse_field(&path, &row[7], "l2 distortion")?,
                seed: parse_field(&path, &row[8], "seed")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Layer};
    use ndarray::{Array1, Array2};

    fn linear_binary(w: &[f64], b: f64) -> Model {
        // logits (0, w.x + b)
        let n = w.len();
        let weight = Array2::from_shape_fn((n, 2), |(i, j)| if j == 1 { w[i] } else { 0.0 });
        Model::from_layers(
            Architecture::Custom,
            (1, n, 1),
            2,
            vec![Layer::Dense {
                weight,
                bias: Array1::from(vec![0.0, b]),
            }],
        )
        .unwrap()
    }

    #[test]
    fn next_class_wraps() {
        assert_eq!(next_class_target(3, 10), 4);
        assert_eq!(next_class_target(9, 10), 0);
        assert_eq!(next_class_target(0, 26), 1);
    }

    #[test]
    fn deepfool_linear_closed_form() {
        let w = [0.8, -0.5, 0.3, 0.1];
        let b = -0.3;
        let model = linear_binary(&w, b);
        let img = Image::new(1, 4, 1, vec![0.4, 0.6, 0.5, 0.45]).unwrap();
        let f: f64 = w.iter().zip(img.pixels()).map(|(a, x)| a * x).sum::<f64>() + b;
        assert!(f < 0.0);
        let config = AttackConfig {
            quantize: false,
            ..Default::default()
        };
        let out = deepfool(&model, &img, 0, &config).unwrap().unwrap();
        assert_eq!(out.iterations, 1);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected = f.abs() / norm * (1.0 + config.overshoot);
        assert!((out.example.l2_distortion - expected).abs() < 1e-12);
        assert_eq!(out.example.predicted_label, 1);
    }

    #[test]
    fn cw_on_linear_model_hits_target_with_margin() {
        let model = linear_binary(&[1.0, -1.0, 0.5, 0.5], -0.3);
        let img = Image::new(1, 4, 1, vec![0.2, 0.6, 0.4, 0.2]).unwrap().quantized();
        for kappa in [0.0, 0.2] {
            let config = AttackConfig {
                kappa,
                iterations: 300,
                ..Default::default()
            };
            let ae = cw_l2(&model, &img, 0, 1, &config).unwrap().unwrap();
            ae.verify(&model, &img).unwrap();
            assert!(ae.image.is_quantized());
        }
    }

    #[test]
    fn rejects_misclassified_source_and_bad_target() {
        let model = linear_binary(&[1.0, 1.0], 0.0);
        let img = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let cfg = AttackConfig::default();
        assert!(cw_l2(&model, &img, 0, 1, &cfg).is_err());
        assert!(deepfool(&model, &img, 0, &cfg).is_err());
        assert!(cw_l2(&model, &img, 1, 1, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            kappa: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
