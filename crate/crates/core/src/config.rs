//! Experiment configuration: a `key = value` text file with `#` comments.
//! Command-line `--set key=value` pairs override file values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adaptive::AdaptiveConfig;
use crate::attack::AttackConfig;
use crate::dataset::DatasetKind;
use crate::detect::{DetectorHyper, DetectorKind};
use crate::error::{Error, Result};
use crate::features::{ClassOrder, ErConfig, FeatureMode, Restorer};
use crate::model::{Architecture, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub count_per_class: usize,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub attack_count: usize,
    pub er: ErConfig,
    pub detector: DetectorKind,
    pub hyper: DetectorHyper,
    pub sensitivity_fractions: Vec<f64>,
    pub divergence_repeats: usize,
    pub sweep_n: Vec<usize>,
    pub adaptive: AdaptiveConfig,
    pub adaptive_count: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetKind::Shapes10,
            count_per_class: 500,
            test_fraction: 0.2,
            train: TrainConfig::for_architecture(Architecture::Conv),
            attack: AttackConfig::default(),
            attack_count: 200,
            er: ErConfig::default(),
            detector: DetectorKind::Svm,
            hyper: DetectorHyper::default(),
            sensitivity_fractions: vec![0.05, 0.10, 0.15],
            divergence_repeats: 11,
            sweep_n: vec![3, 5, 7, 9, 11],
            adaptive: AdaptiveConfig::default(),
            adaptive_count: 100,
            output: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads a config file and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Setting `architecture` resets the training schedule to
    /// that architecture's defaults, so it should precede schedule keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "count_per_class" => self.count_per_class = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "architecture" => {
                let arch: Architecture = parse(key, value)?;
                if arch != self.train.architecture {
                    self.train = TrainConfig {
                        seed: self.train.seed,
                        ..TrainConfig::for_architecture(arch)
                    };
                }
            }
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "kappa" => self.attack.kappa = parse(key, value)?,
            "cw_c_init" => self.attack.c_init = parse(key, value)?,
            "cw_c_min" => self.attack.c_min = parse(key, value)?,
            "cw_c_max" => self.attack.c_max = parse(key, value)?,
            "cw_learning_rate" => self.attack.learning_rate = parse(key, value)?,
            "cw_iterations" => self.attack.iterations = parse(key, value)?,
            "cw_binary_steps" => self.attack.binary_steps = parse(key, value)?,
            "deepfool_overshoot" => self.attack.overshoot = parse(key, value)?,
            "deepfool_max_iterations" => self.attack.max_deepfool_iterations = parse(key, value)?,
            "attack_count" => self.attack_count = parse(key, value)?,
            "n" => self.er.n = parse(key, value)?,
            "erase_fraction" => self.er.erase_fraction = parse(key, value)?,
            "pca_dim" => self.er.pca_dim = parse(key, value)?,
            "feature_mode" => self.er.mode = parse::<FeatureMode>(key, value)?,
            "class_order" => self.er.class_order = parse::<ClassOrder>(key, value)?,
            "restorer" => self.er.restorer = parse::<Restorer>(key, value)?,
            "inpaint_radius" => self.er.radius = parse(key, value)?,
            "median_window" => self.er.median_window = parse(key, value)?,
            "erase_fill" => self.er.fill = parse(key, value)?,
            "detector" => self.detector = parse(key, value)?,
            "svm_c" => self.hyper.svm_c = parse(key, value)?,
            "svm_iterations" => self.hyper.svm_iterations = parse(key, value)?,
            "adaboost_rounds" => self.hyper.adaboost_rounds = parse(key, value)?,
            "sensitivity_fractions" => self.sensitivity_fractions = parse_list(key, value)?,
            "divergence_repeats" => self.divergence_repeats = parse(key, value)?,
            "sweep_n" => self.sweep_n = parse_list(key, value)?,
            "adaptive_restarts" => self.adaptive.restarts = parse(key, value)?,
            "adaptive_iterations" => self.adaptive.iterations = parse(key, value)?,
            "adaptive_stride" => self.adaptive.stride = parse(key, value)?,
            "adaptive_c_init" => self.adaptive.c_init = parse(key, value)?,
            "adaptive_c_max" => self.adaptive.c_max = parse(key, value)?,
            "adaptive_learning_rate" => self.adaptive.learning_rate = parse(key, value)?,
            "adaptive_init_noise" => self.adaptive.init_noise = parse(key, value)?,
            "adaptive_fresh_checks" => self.adaptive.fresh_checks = parse(key, value)?,
            "adaptive_count" => self.adaptive_count = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.count_per_class == 0 {
            return fail("count_per_class must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return fail("epochs, batch_size and learning_rate must be positive");
        }
        if self.attack_count == 0 || self.adaptive_count == 0 || self.divergence_repeats == 0 {
            return fail("attack_count, adaptive_count and divergence_repeats must be positive");
        }
        if self.sweep_n.contains(&0) {
            return fail("sweep_n values must be positive");
        }
        if self.sensitivity_fractions.iter().any(|f| !(0.0..=0.5).contains(f)) {
            return fail("sensitivity_fractions must lie in [0, 0.5]");
        }
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.er
            .check_classes(self.dataset.num_classes())
            .map_err(|e| Error::Config(e.to_string()))?;
        self.adaptive.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Every key with its effective value, in a fixed order. `output` is
    /// listed last and excluded from the hash.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.to_string()),
            ("count_per_class", self.count_per_class.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("architecture", self.train.architecture.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("momentum", self.train.momentum.to_string()),
            ("weight_decay", self.train.weight_decay.to_string()),
            ("kappa", self.attack.kappa.to_string()),
            ("cw_c_init", self.attack.c_init.to_string()),
            ("cw_c_min", self.attack.c_min.to_string()),
            ("cw_c_max", self.attack.c_max.to_string()),
            ("cw_learning_rate", self.attack.learning_rate.to_string()),
            ("cw_iterations", self.attack.iterations.to_string()),
            ("cw_binary_steps", self.attack.binary_steps.to_string()),
            ("deepfool_overshoot", self.attack.overshoot.to_string()),
            ("deepfool_max_iterations", self.attack.max_deepfool_iterations.to_string()),
            ("attack_count", self.attack_count.to_string()),
            ("n", self.er.n.to_string()),
            ("erase_fraction", self.er.erase_fraction.to_string()),
            ("pca_dim", self.er.pca_dim.to_string()),
            ("feature_mode", self.er.mode.to_string()),
            ("class_order", self.er.class_order.to_string()),
            ("restorer", self.er.restorer.to_string()),
            ("inpaint_radius", self.er.radius.to_string()),
            ("median_window", self.er.median_window.to_string()),
            ("erase_fill", self.er.fill.to_string()),
            ("detector", self.detector.to_string()),
            ("svm_c", self.hyper.svm_c.to_string()),
            ("svm_iterations", self.hyper.svm_iterations.to_string()),
            ("adaboost_rounds", self.hyper.adaboost_rounds.to_string()),
            ("sensitivity_fractions", join(&self.sensitivity_fractions)),
            ("divergence_repeats", self.divergence_repeats.to_string()),
            ("sweep_n", join(&self.sweep_n)),
            ("adaptive_restarts", self.adaptive.restarts.to_string()),
            ("adaptive_iterations", self.adaptive.iterations.to_string()),
            ("adaptive_stride", self.adaptive.stride.to_string()),
            ("adaptive_c_init", self.adaptive.c_init.to_string()),
            ("adaptive_c_max", self.adaptive.c_max.to_string()),
            ("adaptive_learning_rate", self.adaptive.learning_rate.to_string()),
            ("adaptive_init_noise", self.adaptive.init_noise.to_string()),
            ("adaptive_fresh_checks", self.adaptive.fresh_checks.to_string()),
            ("adaptive_count", self.adaptive_count.to_string()),
            ("output", self.output.display().to_string()),
        ]
    }

    /// The effective config as a loadable file.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over every entry except `output`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries().into_iter().filter(|(k, _)| *k != "output") {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_hash() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("architecture = mlp\nseed = 9 # comment\n\nsweep_n = 3, 5\n").unwrap();
        assert_eq!(cfg.train.architecture, Architecture::Mlp);
        assert_eq!(cfg.train.epochs, TrainConfig::for_architecture(Architecture::Mlp).epochs);
        assert_eq!(cfg.sweep_n, vec![3, 5]);
        let mut again = ExperimentConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn output_does_not_change_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("output", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("n", "x"), Err(Error::Config(_))));
        assert!(cfg.apply_text("n 3").is_err());
        cfg.set("test_fraction", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
