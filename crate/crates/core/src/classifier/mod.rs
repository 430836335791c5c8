//! Frozen-backbone transfer-learning classifiers.
//!
//! A [`Classifier`] is a frozen [`Backbone`] followed by a trainable head:
//! global average pooling, dropout and a single logistic unit.

pub mod augment;
pub mod backbone;
mod train;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::AugmentConfig;
pub use backbone::{resolve_weights_dir, Backbone, BackboneConfig, BackboneKind};
pub use train::{train_classifier, train_on_images, EpochRecord, History, ReduceLrOnPlateau};

use crate::error::{Error, Result};
use crate::imageio;
use crate::ingestion::{DatasetManifest, Label};
use crate::nn::kernels::sigmoid;
use crate::nn::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;
use crate::util;

pub const HEAD_FILE: &str = "head.safetensors";
pub const CLASSIFIER_META_FILE: &str = "classifier.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Per-class loss multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Non-defective weight.
    pub w0: f64,
    /// Defective weight.
    pub w1: f64,
}

impl ClassWeights {
    pub const NEUTRAL: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };

    pub fn for_label(&self, y: u8) -> f64 {
        if y == 1 {
            self.w1
        } else {
            self.w0
        }
    }
}

/// `w0 = N / (N_nd · 1.2)`, `w1 = N / (N_d · 2.1)` with `N = N_nd + N_d`.
pub fn compute_class_weights(n_nondef: usize, n_def: usize) -> Result<ClassWeights> {
    if n_nondef == 0 || n_def == 0 {
        return Err(Error::config(format!(
            "class weights need both classes (non-defective {n_nondef}, defective {n_def})"
        )));
    }
    let total = (n_nondef + n_def) as f64;
    Ok(ClassWeights {
        w0: total / (n_nondef as f64 * 1.2),
        w1: total / (n_def as f64 * 2.1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Never fires unless it is smaller than `max_epochs` (both default to 5).
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub min_learning_rate: f64,
    pub dropout: f64,
    pub decision_threshold: f64,
    pub augmentation: AugmentConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 5,
            early_stop_patience: 5,
            plateau_factor: 0.2,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            min_learning_rate: 0.0,
            dropout: 0.2,
            decision_threshold: 0.4,
            augmentation: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    /// Default schedule with a larger step size, for surrogate backbones at
    /// desk scale where five epochs give only a few dozen updates.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config("decision_threshold must be in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub score: f64,
    pub label: Label,
}

/// Defective iff `score >= threshold`.
pub fn label_for(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Defective
    } else {
        Label::NonDefective
    }
}

/// Raw `[0, 255]` RGB tensor `[3, S, S]` for classifier input.
pub fn load_classifier_input(path: &Path, size: usize) -> Result<Tensor> {
    let img = imageio::load_rgb(path)?;
    let img = imageio::resize_square(&img, size as u32);
    Ok(imageio::to_chw(&img, |v| v as f32))
}

/// Decoded images with 0/1 targets.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn load(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let mut out = Self::default();
        for r in manifest.records() {
            out.images.push(load_classifier_input(&r.path, size)?);
            out.labels.push(r.label.as_target());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Run metadata stored next to the head weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub backbone: BackboneConfig,
    pub backbone_weights_sha256: String,
    pub preprocessing: String,
    pub feature_dim: usize,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub class_weights: Option<ClassWeights>,
    pub train_config: Option<ClassifierTrainConfig>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    backbone: Arc<Backbone>,
    head: ParamStore,
}

const FEATURE_CHUNK: usize = 16;

impl Classifier {
    /// Fresh head on top of `backbone`; every backbone parameter is frozen.
    pub fn new(backbone: Arc<Backbone>, seed: u64) -> Self {
        let f = backbone.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = ParamStore::new();
        head.insert("head.kernel", glorot_uniform(vec![f, 1], f, 1, &mut rng), true);
        head.insert("head.bias", Tensor::zeros(vec![1]), true);
        Self { backbone, head }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &ParamStore {
        &self.head
    }

    pub(crate) fn head_mut(&mut self) -> &mut ParamStore {
        &mut self.head
    }

    /// Whether each backbone parameter would receive gradient updates.
    pub fn backbone_trainable_flags(&self) -> Vec<bool> {
        let p = self.backbone.params();
        p.ids().map(|id| p.is_trainable(id)).collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.head.trainable_count() + self.backbone.params().trainable_count()
    }

    pub fn total_parameter_count(&self) -> usize {
        self.head.count() + self.backbone.params().count()
    }

    /// Pooled backbone features for each image.
    pub fn extract_features(&self, images: &[Tensor]) -> Result<Vec<Vec<f32>>> {
        pooled_features(&self.backbone, images)
    }

    pub fn logit(&self, features: &[f32]) -> f64 {
        let w = self.head.by_name("head.kernel").expect("head kernel").data();
        let b = self.head.by_name("head.bias").expect("head bias").data()[0];
        let dot: f64 = features.iter().zip(w).map(|(&x, &w)| x as f64 * w as f64).sum();
        dot + b as f64
    }

    /// Scores in `[0, 1]` from precomputed features (inference mode).
    pub fn scores_from_features(&self, features: &[Vec<f32>]) -> Vec<f64> {
        features.iter().map(|f| sigmoid(self.logit(f))).collect()
    }

    pub fn scores(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        Ok(self.scores_from_features(&self.extract_features(images)?))
    }

    pub fn predict(&self, manifest: &DatasetManifest, threshold: f64) -> Result<Vec<Prediction>> {
        let size = self.backbone.config().input_size;
        let images = manifest
            .records()
            .iter()
            .map(|r| load_classifier_input(&r.path, size))
            .collect::<Result<Vec<_>>>()?;
        let scores = self.scores(&images)?;
        Ok(manifest
            .records()
            .iter()
            .zip(scores)
            .map(|(r, score)| Prediction {
                path: r.path.clone(),
                score,
                label: label_for(score, threshold),
            })
            .collect())
    }

    pub fn meta(&self) -> ClassifierMeta {
        ClassifierMeta {
            backbone: self.backbone.config().clone(),
            backbone_weights_sha256: self.backbone.weights_sha256().to_string(),
            preprocessing: self.backbone.config().kind.preprocessing().to_string(),
            feature_dim: self.backbone.feature_dim(),
            trainable_parameters: self.trainable_parameter_count(),
            total_parameters: self.total_parameter_count(),
            class_weights: None,
            train_config: None,
            best_epoch: None,
            epochs_run: 0,
        }
    }

    /// Writes the head weights and `meta` into `dir`.
    pub fn save(&self, dir: &Path, meta: &ClassifierMeta) -> Result<()> {
        util::create_dir(dir)?;
        self.head.save(&dir.join(HEAD_FILE))?;
        util::write_json(&dir.join(CLASSIFIER_META_FILE), meta)
    }

    /// Restores a saved classifier, loading the backbone pinned by its hash
    /// from `weights_dir`.
    pub fn load(dir: &Path, weights_dir: &Path) -> Result<(Self, ClassifierMeta)> {
        util::require(&dir.join(CLASSIFIER_META_FILE), "train the classifier first (`defectdiff train-classifier`)")?;
        let meta: ClassifierMeta = util::read_json(&dir.join(CLASSIFIER_META_FILE))?;
        let backbone = Backbone::load(&meta.backbone, weights_dir, Some(&meta.backbone_weights_sha256))?;
        let mut model = Self::new(Arc::new(backbone), 0);
        model.head.load_into(&dir.join(HEAD_FILE))?;
        Ok((model, meta))
    }

    /// Like [`Classifier::load`] with an already loaded backbone, which must
    /// match the hash recorded at training time.
    pub fn load_with_backbone(dir: &Path, backbone: Arc<Backbone>) -> Result<(Self, ClassifierMeta)> {
        util::require(&dir.join(CLASSIFIER_META_FILE), "train the classifier first (`defectdiff train-classifier`)")?;
        let meta: ClassifierMeta = util::read_json(&dir.join(CLASSIFIER_META_FILE))?;
        if meta.backbone_weights_sha256 != backbone.weights_sha256() || meta.backbone != *backbone.config() {
            return Err(Error::config(format!(
                "classifier in {} was trained on backbone weights {}, got {}",
                dir.display(),
                meta.backbone_weights_sha256,
                backbone.weights_sha256()
            )));
        }
        let mut model = Self::new(backbone, 0);
        model.head.load_into(&dir.join(HEAD_FILE))?;
        Ok((model, meta))
    }
}

/// Globally pooled features of raw `[3, S, S]` images, computed in chunks.
pub fn pooled_features(backbone: &Backbone, images: &[Tensor]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_CHUNK) {
        let feats = backbone.features(&stack(chunk)?)?;
        let f = feats.dim(1);
        out.extend(feats.data().chunks(f).map(<[f32]>::to_vec));
    }
    Ok(out)
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|t| {
            let s = t.shape();
            t.clone().reshape([1, s[0], s[1], s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_leading(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_examples() {
        let w = compute_class_weights(209, 63).unwrap();
        assert!((w.w0 - 272.0 / 250.8).abs() < 1e-12);
        assert!((w.w1 - 272.0 / 132.3).abs() < 1e-12);
        assert!((w.w0 - 1.08453).abs() < 1e-5 && (w.w1 - 2.05593).abs() < 1e-5);
        let w = compute_class_weights(100, 100).unwrap();
        assert!((w.w0 - 200.0 / 120.0).abs() < 1e-12);
        assert!((w.w1 - 200.0 / 210.0).abs() < 1e-12);
        assert!(compute_class_weights(1, 0).is_err());
    }

    #[test]
    fn inclusive_threshold() {
        assert_eq!(label_for(0.40, 0.4), Label::Defective);
        assert_eq!(label_for(0.39, 0.4), Label::NonDefective);
        assert_eq!(label_for(0.0, 0.0), Label::Defective);
    }

    #[test]
    fn head_is_small_and_backbone_frozen() {
        let cfg = BackboneConfig {
            kind: BackboneKind::MobileNetV2,
            width: 0.35,
            input_size: 32,
        };
        let model = Classifier::new(Arc::new(Backbone::surrogate(&cfg, 0).unwrap()), 0);
        assert!(model.backbone_trainable_flags().iter().all(|&t| !t));
        assert_eq!(model.trainable_parameter_count(), model.backbone().feature_dim() + 1);
        assert!((model.trainable_parameter_count() as f64) < 0.05 * model.total_parameter_count() as f64);
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierTrainConfig::default().validate().is_ok());
        let bad = ClassifierTrainConfig {
            decision_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
