use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use erdetect::attack::AttackKind;
use erdetect::config::ExperimentConfig;
use erdetect::dataset::Split;
use erdetect::pipeline::{Pipeline, Timings};
use erdetect::{Error, Result};

/// Erase-and-restore adversarial example detection experiments.
///
/// Every command reads one key = value config file (`--config`), applies
/// `--set key=value` overrides, writes its artifacts under `output` and a run
/// manifest under `output/manifests/`. Run `erdetect print-config` for all keys.
#[derive(Parser)]
#[command(name = "erdetect", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set output=DIR`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config.
    PrintConfig,
    /// Generate the synthetic dataset and its train/test split.
    GenData,
    /// Train the target classifier.
    TrainModel,
    /// Attack correctly classified images of one split.
    GenAes {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "cw")]
        attack: AttackKind,
    },
    /// Build E&R features for an AE store and its benign sources.
    BuildFeatures {
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value = "cw")]
        attack: AttackKind,
    },
    /// Train the detector on `train-<attack>` features.
    TrainDetector {
        #[arg(long, default_value = "cw")]
        attack: AttackKind,
    },
    /// Classify one PNG as benign or adversarial.
    Detect {
        image: PathBuf,
        /// Mask seed; drawn from the OS when absent.
        #[arg(long)]
        mask_seed: Option<u64>,
    },
    /// Train on one attack's features and test on another attack's AEs.
    Evaluate {
        #[arg(long, default_value = "cw")]
        train_attack: AttackKind,
        #[arg(long, default_value = "cw")]
        test_attack: AttackKind,
    },
    /// Benign accuracy and AE survival across erase fractions.
    Sensitivity,
    /// KL and W1 divergence between f(x) and f(T(x)).
    Analyze,
    /// Global PCA of classification vectors before and after E&R.
    PcaView,
    /// Detection metrics for each n in `sweep_n`.
    SweepN,
    /// Detector-in-the-loop multi-restart CW campaign.
    Adaptive,
    /// Erase and restore one PNG.
    Inpaint {
        input: PathBuf,
        output_image: PathBuf,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::PrintConfig => "print-config",
        Command::GenData => "gen-data",
        Command::TrainModel => "train-model",
        Command::GenAes { .. } => "gen-aes",
        Command::BuildFeatures { .. } => "build-features",
        Command::TrainDetector { .. } => "train-detector",
        Command::Detect { .. } => "detect",
        Command::Evaluate { .. } => "evaluate",
        Command::Sensitivity => "sensitivity",
        Command::Analyze => "analyze",
        Command::PcaView => "pca-view",
        Command::SweepN => "sweep-n",
        Command::Adaptive => "adaptive",
        Command::Inpaint { .. } => "inpaint",
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.set;
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.common.output {
        overrides.push(("output".into(), out.display().to_string()));
    }
    let config = ExperimentConfig::load(cli.common.config.as_deref(), &overrides)?;
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let p = Pipeline::new(config);
    let mut t = Timings::default();
    let command = name(&cli.command);
    let manifest_tag = match &cli.command {
        Command::GenAes { split, attack } | Command::BuildFeatures { split, attack } => {
            format!("{command}-{split}-{attack}")
        }
        Command::Evaluate {
            train_attack,
            test_attack,
        } => format!("{command}-{train_attack}-{test_attack}"),
        _ => command.to_string(),
    };
    match cli.command {
        Command::PrintConfig => {
            print!("{}", p.config.to_text());
            println!("# config_hash = {}", p.hash);
            return Ok(());
        }
        Command::GenData => {
            p.gen_data(&mut t)?;
            println!("dataset written to {}", p.data_dir().display());
        }
        Command::TrainModel => {
            let acc = p.train_model(&mut t)?;
            println!("test accuracy {acc:.4}");
        }
        Command::GenAes { split, attack } => {
            let (ok, total) = p.gen_aes(split, attack, &mut t)?;
            println!("{attack} on {split}: {ok}/{total} successful");
        }
        Command::BuildFeatures { split, attack } => {
            let n = p.build_features(split, attack, &mut t)?;
            println!("{n} feature rows written to {}", p.features_path(split, attack).display());
        }
        Command::TrainDetector { attack } => {
            let d = p.train_detector(attack, &mut t)?;
            println!("{} detector written to {}", d.kind(), p.detector_path().display());
        }
        Command::Detect { image, mask_seed } => {
            let (v, seed) = p.detect(&image, mask_seed)?;
            let label = if v.adversarial { "adversarial" } else { "benign" };
            println!("{label} score={} mask_seed={seed}", v.score);
            return Ok(());
        }
        Command::Evaluate {
            train_attack,
            test_attack,
        } => {
            let m = p.evaluate(train_attack, test_attack, &mut t)?;
            println!(
                "train {train_attack} test {test_attack}: DR {:.4} FPR {:.4} AUC {:.4}",
                m.detection_rate, m.fpr, m.auc
            );
        }
        Command::Sensitivity => p.sensitivity(&mut t)?,
        Command::Analyze => p.analyze(&mut t)?,
        Command::PcaView => p.pca_view(&mut t)?,
        Command::SweepN => {
            for (n, m) in p.sweep_n(&mut t)? {
                println!("n={n}: DR {:.4} FPR {:.4} AUC {:.4}", m.detection_rate, m.fpr, m.auc);
            }
        }
        Command::Adaptive => {
            let rate = p.adaptive(&mut t)?;
            println!("bypass rate {rate:.4} (stride {})", p.config.adaptive.stride);
        }
        Command::Inpaint {
            input,
            output_image,
            mask_seed,
        } => {
            p.inpaint(&input, &output_image, mask_seed)?;
            return Ok(());
        }
    }
    let manifest = p.write_manifest(&manifest_tag, &t)?;
    log::info!("manifest written to {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
