use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use defectdiff_core::classifier::BackboneKind;
use defectdiff_core::config::PipelineConfig;
use defectdiff_core::demo::{self, DemoCorpusSpec};
use defectdiff_core::metrics::Arm;
use defectdiff_core::pipeline;
use defectdiff_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "defectdiff", version, about = "Diffusion-based minority-class augmentation for defect classification")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "defectdiff.json")]
    config: PathBuf,
    /// Compute device. Only `cpu` is implemented.
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    /// Overrides `paths.output_root`.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
    Gpu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a configuration template.
    InitConfig {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Destination; defaults to `--config`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folder holding `good/` and `broken/` image folders.
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Build seeded surrogate backbone weights into the weights directory.
    InitWeights,
    /// Render a small synthetic inspection corpus with `good/` and `broken/` folders.
    MakeDemoCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DemoCorpusSpec::default().non_defective)]
        good: usize,
        #[arg(long, default_value_t = DemoCorpusSpec::default().defective)]
        broken: usize,
        #[arg(long, default_value_t = DemoCorpusSpec::default().size)]
        size: usize,
    },
    /// Train the denoiser on the defective training images.
    TrainDdpm {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample synthetic defective images from the trained denoiser.
    Generate {
        #[arg(long)]
        num_images: Option<usize>,
    },
    /// Merge synthetic images into the training split.
    Augment,
    /// Train a classifier head for one arm and backbone (all backbones if omitted).
    TrainClassifier {
        #[arg(long, value_parser = parse_arm)]
        arm: Arm,
        #[arg(long, value_parser = parse_backbone)]
        backbone: Option<BackboneKind>,
    },
    /// Score the validation split with a trained classifier.
    Evaluate {
        #[arg(long, value_parser = parse_arm)]
        arm: Arm,
        #[arg(long, value_parser = parse_backbone)]
        backbone: Option<BackboneKind>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Project real and synthetic backbone features with t-SNE.
    Tsne,
    /// Run the whole protocol and write the comparison report.
    Report {
        /// Concurrent classifier jobs (0 = available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_backbone(s: &str) -> std::result::Result<BackboneKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(root) = &cli.output_root {
        cfg.paths.output_root = root.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn backbones(cfg: &PipelineConfig, one: Option<BackboneKind>) -> Vec<BackboneKind> {
    match one {
        Some(k) => vec![k],
        None => cfg.classifiers.iter().map(|s| s.backbone.kind).collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.device == Device::Gpu {
        return Err(Error::Unsupported("GPU execution is not available in this build; use --device cpu".into()));
    }
    match &cli.command {
        Command::InitConfig { preset, out, data_root } => {
            let mut cfg = match preset {
                Preset::Desk => PipelineConfig::desk(),
                Preset::Full => PipelineConfig::full(),
            };
            if let Some(root) = data_root {
                cfg.paths.non_defective_dir = root.join(demo::NON_DEFECTIVE_DIR);
                cfg.paths.defective_dir = root.join(demo::DEFECTIVE_DIR);
            }
            if let Some(root) = &cli.output_root {
                cfg.paths.output_root = root.clone();
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let path = out.as_ref().unwrap_or(&cli.config);
            cfg.save(path)?;
            println!("wrote {}", path.display());
        }
        Command::InitWeights => {
            let cfg = load_config(&cli)?;
            for (kind, path, sha) in pipeline::init_weights(&cfg)? {
                println!("{kind}\t{sha}\t{}", path.display());
            }
        }
        Command::MakeDemoCorpus { out, good, broken, size } => {
            let spec = DemoCorpusSpec {
                non_defective: *good,
                defective: *broken,
                size: *size,
                seed: cli.seed.unwrap_or(0),
            };
            let (g, b) = demo::write_demo_corpus(out, &spec)?;
            println!("wrote {} and {}", g.display(), b.display());
        }
        Command::TrainDdpm { epochs, resume } => {
            let mut cfg = load_config(&cli)?;
            if let Some(e) = epochs {
                cfg.ddpm.epochs = *e;
            }
            let out = pipeline::cmd_train_ddpm(&cfg, *resume)?;
            let last = out.loss_log.last().map_or(f64::NAN, |e| e.loss);
            println!(
                "trained {} epochs, last logged loss {last:.5}, checkpoint {}",
                out.meta.epochs_completed,
                out.checkpoint_dir.display()
            );
        }
        Command::Generate { num_images } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = num_images {
                cfg.generation.num_images = *n;
            }
            let paths = pipeline::cmd_generate(&cfg)?;
            println!("wrote {} images to {}", paths.len(), pipeline::layout(&cfg).synthetic().display());
        }
        Command::Augment => {
            let cfg = load_config(&cli)?;
            let s = pipeline::cmd_augment(&cfg)?;
            println!("train {} -> {}; validation {}", s.real_train, s.augmented_train, s.validation);
        }
        Command::TrainClassifier { arm, backbone } => {
            let cfg = load_config(&cli)?;
            for kind in backbones(&cfg, *backbone) {
                let meta = pipeline::cmd_train_classifier(&cfg, *arm, kind)?;
                println!(
                    "{arm}/{kind}: {} epochs, best {:?}, {}",
                    meta.epochs_run,
                    meta.best_epoch,
                    pipeline::layout(&cfg).classifier(*arm, kind).display()
                );
            }
        }
        Command::Evaluate { arm, backbone, threshold } => {
            let cfg = load_config(&cli)?;
            for kind in backbones(&cfg, *backbone) {
                let r = pipeline::cmd_evaluate(&cfg, *arm, kind, *threshold)?;
                println!(
                    "{arm}/{kind}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} roc_auc {:.4}",
                    r.accuracy, r.precision, r.recall, r.f1, r.roc_auc
                );
            }
        }
        Command::Tsne => {
            let cfg = load_config(&cli)?;
            pipeline::cmd_tsne(&cfg)?;
            println!("wrote {}", pipeline::layout(&cfg).tsne().display());
        }
        Command::Report { jobs } => {
            let mut cfg = load_config(&cli)?;
            if let Some(j) = jobs {
                cfg.report.jobs = *j;
            }
            let report = pipeline::cmd_report(&cfg)?;
            for c in &report.comparisons {
                println!("{}", c.to_markdown());
            }
            println!("wrote {}", pipeline::layout(&cfg).report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
