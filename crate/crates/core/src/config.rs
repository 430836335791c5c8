//! Pipeline configuration file: one JSON document describing data paths,
//! diffusion, generation, split, classifier and analysis settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{BackboneConfig, BackboneKind, ClassifierTrainConfig};
use crate::ddpm_trainer::DdpmTrainConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::feature_analysis::TsneConfig;
use crate::schedule::ScheduleParams;
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub non_defective_dir: PathBuf,
    pub defective_dir: PathBuf,
    pub output_root: PathBuf,
    /// Pretrained backbone weights; falls back to the environment variable
    /// and then `./weights`.
    pub weights_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            non_defective_dir: PathBuf::from("data/good"),
            defective_dir: PathBuf::from("data/broken"),
            output_root: PathBuf::from("runs"),
            weights_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_images: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_images: 60,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// One backbone to train in each experiment arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone: BackboneConfig,
    /// Expected SHA-256 of the weights file, checked on load when set.
    #[serde(default)]
    pub weights_sha256: Option<String>,
    #[serde(default)]
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { threshold: 0.4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub backbone: BackboneKind,
    pub tsne: TsneConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::ResNet50V2,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Classifier jobs run concurrently by `report`; 0 picks the number of
    /// available cores.
    pub jobs: usize,
    pub include_tsne: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            jobs: 0,
            include_tsne: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    /// `checkpoint_dir` is ignored; checkpoints live under the output root.
    pub ddpm: DdpmTrainConfig,
    pub generation: GenerationConfig,
    pub split: SplitConfig,
    pub classifiers: Vec<ClassifierSpec>,
    pub evaluation: EvaluationConfig,
    pub analysis: AnalysisConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl PipelineConfig {
    /// Full-size settings: 14000-step schedule, 128-pixel denoiser,
    /// 1300 epochs, 60 generated images and 224-pixel backbones.
    pub fn full() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            ddpm: DdpmTrainConfig::default(),
            generation: GenerationConfig::default(),
            split: SplitConfig::default(),
            classifiers: BackboneKind::ALL
                .iter()
                .map(|&k| ClassifierSpec {
                    backbone: BackboneConfig::full(k),
                    weights_sha256: None,
                    train: ClassifierTrainConfig::default(),
                })
                .collect(),
            evaluation: EvaluationConfig::default(),
            analysis: AnalysisConfig::default(),
            report: ReportConfig::default(),
        }
    }

    /// CPU-sized settings that run end to end in a few minutes.
    pub fn desk() -> Self {
        Self {
            schedule: ScheduleParams {
                num_timesteps: 50,
                ..ScheduleParams::default()
            },
            denoiser: DenoiserConfig {
                sample_size: 16,
                ..DenoiserConfig::desk_scale()
            },
            ddpm: DdpmTrainConfig {
                epochs: 300,
                batch_size: 4,
                learning_rate: 1e-3,
                log_every_steps: 10,
                ..DdpmTrainConfig::default()
            },
            generation: GenerationConfig {
                num_images: 24,
                batch_size: 8,
                seed: 0,
            },
            classifiers: BackboneKind::ALL
                .iter()
                .map(|&k| ClassifierSpec {
                    backbone: BackboneConfig::desk(k),
                    weights_sha256: None,
                    train: ClassifierTrainConfig::desk(),
                })
                .collect(),
            ..Self::full()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPrerequisite {
                path: path.to_path_buf(),
                hint: "config file not found; `defectdiff init-config` writes a template".into(),
            });
        }
        util::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.ddpm.validate()?;
        if self.generation.num_images == 0 || self.generation.batch_size == 0 {
            return Err(Error::config("generation num_images and batch_size must be >= 1"));
        }
        if !(self.split.val_fraction > 0.0 && self.split.val_fraction < 1.0) {
            return Err(Error::config("split val_fraction must be in (0, 1)"));
        }
        if self.classifiers.is_empty() {
            return Err(Error::config("at least one classifier backbone is required"));
        }
        for (i, spec) in self.classifiers.iter().enumerate() {
            spec.backbone.validate()?;
            spec.train.validate()?;
            if self.classifiers[..i].iter().any(|s| s.backbone.kind == spec.backbone.kind) {
                return Err(Error::config(format!("backbone {} listed twice", spec.backbone.kind)));
            }
        }
        if !(self.evaluation.threshold > 0.0 && self.evaluation.threshold < 1.0) {
            return Err(Error::config("evaluation threshold must be in (0, 1)"));
        }
        let t = &self.analysis.tsne;
        if !(t.perplexity > 0.0) || t.iterations == 0 {
            return Err(Error::config("t-SNE perplexity and iterations must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn classifier(&self, kind: BackboneKind) -> Result<&ClassifierSpec> {
        self.classifiers
            .iter()
            .find(|s| s.backbone.kind == kind)
            .ok_or_else(|| Error::config(format!("backbone {kind} is not configured")))
    }

    /// Seed for a named job, derived from the global seed.
    pub fn derived_seed(&self, job: &str) -> u64 {
        let digest = util::sha256_hex(format!("{}:{job}", self.seed).as_bytes());
        u64::from_str_radix(&digest[..16], 16).expect("hex digest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [PipelineConfig::full(), PipelineConfig::desk()] {
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: PipelineConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn full_preset_echoes_reference_settings() {
        let cfg = PipelineConfig::full();
        assert_eq!(cfg.schedule.num_timesteps, 14_000);
        assert_eq!(cfg.denoiser.sample_size, 128);
        assert_eq!(cfg.ddpm.epochs, 1300);
        assert_eq!(cfg.generation.num_images, 60);
        assert_eq!(cfg.evaluation.threshold, 0.4);
        assert_eq!(cfg.analysis.tsne.perplexity, 30.0);
        assert_eq!(cfg.analysis.tsne.iterations, 2000);
        assert!(cfg.classifiers.iter().all(|c| c.train.learning_rate == 1e-4));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 7, "ddpm": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ddpm.epochs, 3);
        assert_eq!(cfg.ddpm.batch_size, 8);
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut cfg = PipelineConfig::desk();
        cfg.ddpm.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_per_job() {
        let cfg = PipelineConfig::desk();
        assert_ne!(cfg.derived_seed("a"), cfg.derived_seed("b"));
        assert_eq!(cfg.derived_seed("a"), cfg.derived_seed("a"));
    }
}
