//! Command implementations behind the `erdetect` binary. Every artifact lives
//! under the configured output directory and carries the config hash.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::adaptive::{adaptive_campaign, campaign_csv, curve_csv};
use crate::analysis::{
    Metric, centroid_distance, divergence_csv, divergence_table, export_pca_view, pca_view_csv,
    roc_threshold_split, run_sensitivity_experiment, sensitivity_csv,
};
use crate::attack::{AdvExample, AttackKind, attack_batch, correctly_classified, load_ae_store, next_class_target, save_ae_store};
use crate::config::ExperimentConfig;
use crate::dataset::{LabeledDataset, Split, generate_dataset, load_split, save_datasets};
use crate::detect::{
    Detector, DetectionMetrics, Verdict, detect, evaluate, metrics_from_scores, train_detector,
};
use crate::error::{Error, Result};
use crate::features::{ErConfig, FeatureRecord, FeatureSet, StageTiming, build_features, erase_and_restore};
use crate::image::{Image, load_image, save_image};
use crate::io::{CsvTable, write_atomic};
use crate::model::{Model, TrainConfig, accuracy, train_model};
use crate::rng;

/// Named wall-clock durations, in the order they were recorded.
#[derive(Debug, Clone, Default)]
pub struct Timings(pub Vec<(String, Duration)>);

impl Timings {
    pub fn record(&mut self, name: &str, d: Duration) {
        self.0.push((name.to_string(), d));
    }

    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.record(name, t.elapsed());
        Ok(out)
    }

    pub fn stages(&mut self, prefix: &str, s: StageTiming) {
        self.record(&format!("{prefix}inpaint"), s.restore);
        self.record(&format!("{prefix}classify"), s.classify);
    }
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub hash: String,
}

fn provenance(hash: &str) -> String {
    format!("config_hash={hash}")
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Self {
        let hash = config.hash();
        Self { config, hash }
    }

    fn out(&self) -> &Path {
        &self.config.output
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out().join("data")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out().join("model.bin")
    }

    pub fn detector_path(&self) -> PathBuf {
        self.out().join("detector.bin")
    }

    pub fn ae_dir(&self, split: Split, attack: AttackKind) -> PathBuf {
        self.out().join("aes").join(format!("{split}-{attack}"))
    }

    pub fn features_path(&self, split: Split, attack: AttackKind) -> PathBuf {
        self.out().join("features").join(format!("{split}-{attack}.csv"))
    }

    pub fn results_path(&self, name: &str) -> PathBuf {
        self.out().join("results").join(name)
    }

    pub fn manifest_path(&self, command: &str) -> PathBuf {
        self.out().join("manifests").join(format!("{command}.txt"))
    }

    fn save_table(&self, table: &CsvTable, name: &str) -> Result<PathBuf> {
        let path = self.results_path(name);
        table.save(&path)?;
        Ok(path)
    }

    /// Writes the run manifest: command, hash, seed, timings and the effective config.
    pub fn write_manifest(&self, command: &str, timings: &Timings) -> Result<PathBuf> {
        let mut text = format!(
            "command = {command}\nconfig_hash = {}\nseed = {}\n",
            self.hash, self.config.seed
        );
        for (name, d) in &timings.0 {
            text.push_str(&format!("time.{name} = {:.6}\n", d.as_secs_f64()));
        }
        text.push_str("\n# effective config\n");
        text.push_str(&self.config.to_text());
        let path = self.manifest_path(command);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    fn check_data_hash(&self) -> Result<()> {
        let path = self.data_dir().join("manifest.csv");
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let found = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# config_hash="))
            .ok_or_else(|| Error::malformed(&path, "missing config hash line"))?;
        crate::io::check_hash(&path, &self.hash, found.trim())
    }

    pub fn load_data(&self, split: Split) -> Result<LabeledDataset> {
        self.check_data_hash()?;
        load_split(&self.data_dir(), split)
    }

    pub fn load_model(&self) -> Result<Model> {
        let path = self.model_path();
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let (model, prov) = Model::load(&path)?;
        let found = prov.strip_prefix("config_hash=").unwrap_or(&prov);
        crate::io::check_hash(&path, &self.hash, found)?;
        Ok(model)
    }

    pub fn load_detector(&self) -> Result<Detector> {
        let path = self.detector_path();
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let (detector, prov) = Detector::load(&path)?;
        let found = prov.strip_prefix("config_hash=").unwrap_or(&prov);
        crate::io::check_hash(&path, &self.hash, found)?;
        Ok(detector)
    }

    pub fn load_aes(&self, split: Split, attack: AttackKind) -> Result<Vec<AdvExample>> {
        load_ae_store(&self.ae_dir(split, attack), Some(&self.hash))
    }

    fn load_features(&self, split: Split, attack: AttackKind) -> Result<FeatureSet> {
        let path = self.features_path(split, attack);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let set = FeatureSet::load(&path)?;
        crate::io::check_hash(&path, &self.hash, &set.config_hash)?;
        Ok(set)
    }

    pub fn gen_data(&self, t: &mut Timings) -> Result<()> {
        let c = &self.config;
        let (train, test) = t.time("generate", || {
            generate_dataset(c.dataset, c.count_per_class, c.seed)?.train_test_split(c.test_fraction)
        })?;
        t.time("write", || save_datasets(&self.data_dir(), &[&train, &test], &provenance(&self.hash)))
    }

    pub fn train_model(&self, t: &mut Timings) -> Result<f64> {
        let train = self.load_data(Split::Train)?;
        let test = self.load_data(Split::Test)?;
        let cfg = TrainConfig {
            seed: self.config.seed,
            ..self.config.train.clone()
        };
        let report = t.time("train", || train_model(&train, &cfg, Some(&test)))?;
        report.model.save(&self.model_path(), &provenance(&self.hash))?;
        let mut table = CsvTable::new(&self.hash, &["epoch", "loss"]);
        for (i, l) in report.epoch_losses.iter().enumerate() {
            table.push(vec![(i + 1).to_string(), l.to_string()]);
        }
        self.save_table(&table, "training.csv")?;
        let test_acc = accuracy(&report.model, &test)?;
        let mut acc = CsvTable::new(&self.hash, &["split", "accuracy"]);
        acc.push(vec!["train".into(), report.train_accuracy.to_string()]);
        acc.push(vec!["test".into(), test_acc.to_string()]);
        self.save_table(&acc, "accuracy.csv")?;
        Ok(test_acc)
    }

    /// The first `count` correctly classified images of `data`.
    fn sources(&self, model: &Model, data: &LabeledDataset, count: usize) -> Result<Vec<usize>> {
        Ok(correctly_classified(model, data)?.into_iter().take(count).collect())
    }

    pub fn gen_aes(&self, split: Split, attack: AttackKind, t: &mut Timings) -> Result<(usize, usize)> {
        let model = self.load_model()?;
        let data = self.load_data(split)?;
        let sources = self.sources(&model, &data, self.config.attack_count)?;
        let outcomes = t.time("attack", || {
            attack_batch(&model, &data, &sources, attack, &self.config.attack, self.config.seed)
        })?;
        let examples: Vec<AdvExample> = outcomes.into_iter().filter_map(|o| o.example).collect();
        save_ae_store(&self.ae_dir(split, attack), &examples, &self.hash)?;
        Ok((examples.len(), sources.len()))
    }

    fn feature_records(
        &self,
        model: &Model,
        data: &LabeledDataset,
        aes: &[AdvExample],
        er: &ErConfig,
        split: Split,
        attack: AttackKind,
        t: &mut Timings,
    ) -> Result<Vec<FeatureRecord>> {
        let benign: Vec<&Image> = aes.iter().map(|a| &data.images[a.source_index]).collect();
        let adv: Vec<&Image> = aes.iter().map(|a| &a.image).collect();
        let seed = self.config.seed;
        let (fb, sb) = build_features(model, &benign, er, seed, &format!("features-{split}-benign"))?;
        let (fa, sa) = build_features(model, &adv, er, seed, &format!("features-{split}-{attack}"))?;
        t.stages("benign-", sb);
        t.stages("adversarial-", sa);
        let mut records = Vec::with_capacity(2 * aes.len());
        for (a, f) in aes.iter().zip(fb) {
            records.push(FeatureRecord {
                id: a.source_index.to_string(),
                adversarial: false,
                attack: "none".into(),
                kappa: 0.0,
                values: f.values,
            });
        }
        for (a, f) in aes.iter().zip(fa) {
            records.push(FeatureRecord {
                id: a.source_index.to_string(),
                adversarial: true,
                attack: attack.to_string(),
                kappa: a.kappa,
                values: f.values,
            });
        }
        Ok(records)
    }

    pub fn build_features(&self, split: Split, attack: AttackKind, t: &mut Timings) -> Result<usize> {
        let model = self.load_model()?;
        let data = self.load_data(split)?;
        let aes = self.load_aes(split, attack)?;
        let records = self.feature_records(&model, &data, &aes, &self.config.er, split, attack, t)?;
        let n = records.len();
        FeatureSet {
            config_hash: self.hash.clone(),
            records,
        }
        .save(&self.features_path(split, attack))?;
        Ok(n)
    }

    fn fit(&self, set: &FeatureSet, er: &ErConfig, num_classes: usize) -> Result<Detector> {
        let (x, y) = set.matrix();
        train_detector(&x, &y, self.config.detector, &self.config.hyper, er, num_classes)
    }

    pub fn train_detector(&self, attack: AttackKind, t: &mut Timings) -> Result<Detector> {
        let model = self.load_model()?;
        let set = self.load_features(Split::Train, attack)?;
        let detector = t.time("train", || self.fit(&set, &self.config.er, model.num_classes()))?;
        detector.save(&self.detector_path(), &provenance(&self.hash))?;
        Ok(detector)
    }

    /// Classifies one image. Without `seed` the masks come from OS entropy;
    /// the seed used is returned so the verdict can be replayed.
    pub fn detect(&self, image: &Path, seed: Option<u64>) -> Result<(Verdict, u64)> {
        let model = self.load_model()?;
        let detector = self.load_detector()?;
        let img = load_image(image)?;
        let seed = seed.unwrap_or_else(rng::fresh_seed);
        Ok((detect(&detector, &model, &img, &mut rng::from_seed(seed))?, seed))
    }

    /// Trains on `train-<train_attack>` features and scores the held-out
    /// `test-<test_attack>` store with fresh seeded masks.
    pub fn evaluate(&self, train_attack: AttackKind, test_attack: AttackKind, t: &mut Timings) -> Result<DetectionMetrics> {
        let model = self.load_model()?;
        let data = self.load_data(Split::Test)?;
        let set = self.load_features(Split::Train, train_attack)?;
        let detector = t.time("train", || self.fit(&set, &self.config.er, model.num_classes()))?;
        let aes = self.load_aes(Split::Test, test_attack)?;
        let benign: Vec<&Image> = aes.iter().map(|a| &data.images[a.source_index]).collect();
        let adv: Vec<&Image> = aes.iter().map(|a| &a.image).collect();
        let m = t.time("score", || evaluate(&detector, &model, &benign, &adv, self.config.seed))?;
        let mut table = CsvTable::new(
            &self.hash,
            &["detector", "train_attack", "test_attack", "benign", "adversarial", "threshold", "detection_rate", "fpr", "auc"],
        );
        table.push(vec![
            detector.kind().to_string(),
            train_attack.to_string(),
            test_attack.to_string(),
            benign.len().to_string(),
            adv.len().to_string(),
            detector.threshold.to_string(),
            m.detection_rate.to_string(),
            m.fpr.to_string(),
            m.auc.to_string(),
        ]);
        self.save_table(&table, &format!("evaluate-{train_attack}-{test_attack}.csv"))?;
        let mut roc = CsvTable::new(&self.hash, &["fpr", "tpr"]);
        for (f, p) in &m.roc {
            roc.push(vec![f.to_string(), p.to_string()]);
        }
        self.save_table(&roc, &format!("roc-{train_attack}-{test_attack}.csv"))?;
        Ok(m)
    }

    pub fn sensitivity(&self, t: &mut Timings) -> Result<()> {
        let model = self.load_model()?;
        let data = self.load_data(Split::Test)?;
        let aes = self.load_aes(Split::Test, AttackKind::CwL2)?;
        let sources = self.sources(&model, &data, self.config.attack_count)?;
        let benign: Vec<(&Image, usize)> = sources.iter().map(|&i| (&data.images[i], data.labels[i])).collect();
        let rows = t.time("sweep", || {
            run_sensitivity_experiment(
                &model,
                &benign,
                &aes,
                &self.config.sensitivity_fractions,
                &self.config.er,
                self.config.seed,
            )
        })?;
        self.save_table(&sensitivity_csv(&rows, &self.hash), "sensitivity.csv")?;
        Ok(())
    }

    pub fn analyze(&self, t: &mut Timings) -> Result<()> {
        let model = self.load_model()?;
        let data = self.load_data(Split::Test)?;
        let aes = self.load_aes(Split::Test, AttackKind::CwL2)?;
        let benign: Vec<(String, &Image)> = aes
            .iter()
            .map(|a| (a.source_index.to_string(), &data.images[a.source_index]))
            .collect();
        let adv: Vec<(String, &Image)> = aes.iter().map(|a| (a.source_index.to_string(), &a.image)).collect();
        let metrics = [Metric::Kl, Metric::Wd];
        let samples = t.time("divergence", || {
            divergence_table(
                &model,
                &benign,
                &adv,
                &metrics,
                self.config.divergence_repeats,
                &self.config.er,
                self.config.seed,
            )
        })?;
        self.save_table(&divergence_csv(&samples, &self.hash), "divergence.csv")?;
        let mut summary = CsvTable::new(
            &self.hash,
            &["metric", "mean_benign", "mean_adversarial", "threshold", "tpr", "fpr"],
        );
        for metric in metrics {
            let pick = |adv: bool| -> Vec<f64> {
                samples
                    .iter()
                    .filter(|s| s.metric == metric && s.adversarial == adv)
                    .map(|s| s.value)
                    .collect()
            };
            let (b, a) = (pick(false), pick(true));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let (threshold, fpr, tpr) = roc_threshold_split(&b, &a)?;
            summary.push(vec![
                metric.to_string(),
                mean(&b).to_string(),
                mean(&a).to_string(),
                threshold.to_string(),
                tpr.to_string(),
                fpr.to_string(),
            ]);
        }
        self.save_table(&summary, "divergence-summary.csv")?;
        Ok(())
    }

    /// Classification vectors before and after one E&R draw, for benign
    /// sources and their AEs, projected onto the global top-3 components.
    pub fn pca_view(&self, t: &mut Timings) -> Result<()> {
        let model = self.load_model()?;
        let data = self.load_data(Split::Test)?;
        let aes = self.load_aes(Split::Test, AttackKind::CwL2)?;
        let (mut ids, mut labels, mut vectors) = (Vec::new(), Vec::new(), Vec::new());
        t.time("vectors", || {
            for (group, images) in [
                ("benign", aes.iter().map(|a| &data.images[a.source_index]).collect::<Vec<_>>()),
                ("adversarial", aes.iter().map(|a| &a.image).collect()),
            ] {
                for (i, (img, a)) in images.iter().zip(&aes).enumerate() {
                    let mut s = rng::stream(self.config.seed, &format!("pca-view-{group}"), i as u64);
                    let restored = erase_and_restore(img, &self.config.er, &mut s)?;
                    for (when, x) in [("before", *img), ("after", &restored)] {
                        ids.push(a.source_index.to_string());
                        labels.push(format!("{group}-{when}"));
                        vectors.push(model.forward(x)?.probs);
                    }
                }
            }
            Ok(())
        })?;
        let rows = t.time("pca", || export_pca_view(&ids, &labels, &vectors))?;
        self.save_table(&pca_view_csv(&rows, &self.hash), "pca-view.csv")?;
        let mut summary = CsvTable::new(&self.hash, &["group", "centroid_distance"]);
        for group in ["benign", "adversarial"] {
            let d = centroid_distance(&rows, &format!("{group}-before"), &format!("{group}-after"))?;
            summary.push(vec![group.to_string(), d.to_string()]);
        }
        self.save_table(&summary, "pca-view-summary.csv")?;
        Ok(())
    }

    /// One detector per `n`, trained on `train-cw` and scored on `test-cw`.
    pub fn sweep_n(&self, t: &mut Timings) -> Result<Vec<(usize, DetectionMetrics)>> {
        let model = self.load_model()?;
        let train = self.load_data(Split::Train)?;
        let test = self.load_data(Split::Test)?;
        let train_aes = self.load_aes(Split::Train, AttackKind::CwL2)?;
        let test_aes = self.load_aes(Split::Test, AttackKind::CwL2)?;
        let mut table = CsvTable::new(&self.hash, &["n", "detector", "detection_rate", "fpr", "auc"]);
        let mut out = Vec::new();
        for &n in &self.config.sweep_n {
            let er = ErConfig {
                n,
                pca_dim: self.config.er.pca_dim.min(n),
                ..self.config.er.clone()
            };
            let mut stage = Timings::default();
            let tr = self.feature_records(&model, &train, &train_aes, &er, Split::Train, AttackKind::CwL2, &mut stage)?;
            let te = self.feature_records(&model, &test, &test_aes, &er, Split::Test, AttackKind::CwL2, &mut stage)?;
            for (name, d) in stage.0 {
                t.record(&format!("n{n}.{name}"), d);
            }
            let set = FeatureSet {
                config_hash: self.hash.clone(),
                records: tr,
            };
            let detector = self.fit(&set, &er, model.num_classes())?;
            let score = |adv: bool| -> Result<Vec<f64>> {
                te.iter()
                    .filter(|r| r.adversarial == adv)
                    .map(|r| detector.score(&r.values))
                    .collect()
            };
            let m = metrics_from_scores(&score(false)?, &score(true)?, detector.threshold)?;
            table.push(vec![
                n.to_string(),
                detector.kind().to_string(),
                m.detection_rate.to_string(),
                m.fpr.to_string(),
                m.auc.to_string(),
            ]);
            out.push((n, m));
        }
        self.save_table(&table, "sweep-n.csv")?;
        Ok(out)
    }

    pub fn adaptive(&self, t: &mut Timings) -> Result<f64> {
        let model = self.load_model()?;
        let detector = self.load_detector()?;
        let data = self.load_data(Split::Test)?;
        let k = model.num_classes();
        let sources = self.sources(&model, &data, self.config.adaptive_count)?;
        let images: Vec<(String, &Image, usize, usize)> = sources
            .iter()
            .map(|&i| (i.to_string(), &data.images[i], data.labels[i], next_class_target(data.labels[i], k)))
            .collect();
        let result = adaptive_campaign(&model, &detector, &images, &self.config.adaptive, self.config.seed)?;
        t.record("campaign", result.wall_time);
        self.save_table(&campaign_csv(&result, &self.hash), "adaptive-campaign.csv")?;
        self.save_table(&curve_csv(&result, &self.hash), "adaptive-curve.csv")?;
        let dir = self.results_path("adaptive-bypass");
        for e in &result.entries {
            if let Some(b) = &e.bypass {
                save_image(&dir.join(format!("{}.png", e.image_id)), &b.image)?;
            }
        }
        Ok(result.bypass_rate())
    }

    /// Erases and restores one PNG with masks from `seed`.
    pub fn inpaint(&self, input: &Path, output: &Path, seed: u64) -> Result<()> {
        let img = load_image(input)?;
        let restored = erase_and_restore(&img, &self.config.er, &mut rng::from_seed(seed))?;
        save_image(output, &restored)
    }
}
