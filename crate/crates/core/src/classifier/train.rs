//! Head training with weighted binary cross-entropy, plateau LR decay,
//! early stopping and best-weight restoration.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::{Classifier, ClassWeights, ClassifierTrainConfig, LabeledImages};
use crate::error::{Error, Result};
use crate::ingestion::DatasetManifest;
use crate::metrics::{evaluate_scores, BinaryMetrics};
use crate::nn::kernels::sigmoid;
use crate::nn::{Adam, AdamConfig, Gradients};
use crate::tensor::Tensor;

/// Clipping applied to probabilities inside the log, as in common
/// deep-learning frameworks.
const BCE_EPS: f64 = 1e-7;

pub fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -(p + BCE_EPS).ln()
    } else {
        -(1.0 - p + BCE_EPS).ln()
    }
}

/// `mean_i w_{y_i} · BCE(p_i, y_i)`.
pub fn weighted_bce(probs: &[f64], labels: &[u8], weights: ClassWeights) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| weights.for_label(y) * bce(p, y))
        .sum();
    sum / probs.len() as f64
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve the monitored loss by more than `min_delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
    lr: f64,
}

impl ReduceLrOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's monitored loss and returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                let reduced = (self.lr * self.factor).max(self.min_lr);
                if reduced < self.lr {
                    log::info!("reducing learning rate {} -> {reduced}", self.lr);
                    self.lr = reduced;
                }
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: BinaryMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,train_loss,val_loss,val_accuracy,val_precision,val_recall,val_f1,val_roc_auc\n",
        );
        for e in &self.epochs {
            let auc = e.val.roc_auc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, e.learning_rate, e.train_loss, e.val_loss, e.val.accuracy, e.val.precision, e.val.recall, e.val.f1, auc
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn train_classifier(
    model: &mut Classifier,
    train: &DatasetManifest,
    val: &DatasetManifest,
    weights: ClassWeights,
    cfg: &ClassifierTrainConfig,
) -> Result<History> {
    let size = model.backbone().config().input_size;
    let train = LabeledImages::load(train, size)?;
    let val = LabeledImages::load(val, size)?;
    train_on_images(model, &train, &val, weights, cfg)
}

pub fn train_on_images(
    model: &mut Classifier,
    train: &LabeledImages,
    val: &LabeledImages,
    weights: ClassWeights,
    cfg: &ClassifierTrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if !(train.labels.contains(&0) && train.labels.contains(&1)) {
        return Err(Error::config("training set must contain both labels"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set is empty".into()));
    }
    let val_features = model.extract_features(&val.images)?;
    let f = model.backbone().feature_dim();
    let mut adam = Adam::new(AdamConfig::adam(cfg.learning_rate), model.head());
    let mut plateau = ReduceLrOnPlateau::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_min_delta,
        cfg.min_learning_rate,
    );
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.head().clone());
    let mut es_wait = 0;
    let keep = 1.0 - cfg.dropout;

    for epoch in 0..cfg.max_epochs {
        let lr = plateau.lr();
        adam.set_learning_rate(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor> = batch
                .iter()
                .map(|&i| augment(&train.images[i], &cfg.augmentation, &mut rng))
                .collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut feats = model.extract_features(&imgs)?;
            if cfg.dropout > 0.0 {
                for row in &mut feats {
                    for v in row.iter_mut() {
                        *v = if rng.random_bool(keep) { *v / keep as f32 } else { 0.0 };
                    }
                }
            }
            let probs: Vec<f64> = feats.iter().map(|x| sigmoid(model.logit(x))).collect();
            let loss = weighted_bce(&probs, &labels, weights);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss {loss} in epoch {}", epoch + 1)));
            }
            loss_sum += loss * batch.len() as f64;
            let n = batch.len() as f64;
            let mut gw = vec![0f64; f];
            let mut gb = 0f64;
            for ((x, &p), &y) in feats.iter().zip(&probs).zip(&labels) {
                let dz = weights.for_label(y) * (p - y as f64) / n;
                gb += dz;
                for (g, &xi) in gw.iter_mut().zip(x) {
                    *g += dz * xi as f64;
                }
            }
            let grads = Gradients::from_parts(vec![
                Some(Tensor::from_vec(vec![f, 1], gw.into_iter().map(|g| g as f32).collect())?),
                Some(Tensor::from_vec(vec![1], vec![gb as f32])?),
            ]);
            adam.step(model.head_mut(), &grads);
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_scores = model.scores_from_features(&val_features);
        let val_loss = weighted_bce(&val_scores, &val.labels, ClassWeights::NEUTRAL);
        let val_metrics = evaluate_scores(&val_scores, &val.labels, cfg.decision_threshold)?;
        log::info!(
            "epoch {} lr {lr} train_loss {train_loss:.5} val_loss {val_loss:.5} val_acc {:.4}",
            epoch + 1,
            val_metrics.accuracy
        );
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss,
            val_loss,
            val: val_metrics,
        });
        if val_loss < best.0 {
            best = (val_loss, model.head().clone());
            history.best_epoch = epoch + 1;
            es_wait = 0;
        } else {
            es_wait += 1;
        }
        plateau.observe(val_loss);
        if es_wait >= cfg.early_stop_patience {
            history.stopped_early = true;
            break;
        }
    }
    *model.head_mut() = best.1;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_weights_equal_plain_bce() {
        let probs = [0.1, 0.7, 0.95, 0.4];
        let labels = [0, 1, 1, 0];
        let plain: f64 = probs.iter().zip(&labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / 4.0;
        assert!((weighted_bce(&probs, &labels, ClassWeights::NEUTRAL) - plain).abs() < 1e-7);
    }

    #[test]
    fn doubling_w1_doubles_defective_contribution() {
        let probs = [0.1, 0.7, 0.95, 0.4];
        let labels = [0, 1, 1, 0];
        let only_def = ClassWeights { w0: 0.0, w1: 1.3 };
        let doubled = ClassWeights { w0: 0.0, w1: 2.6 };
        let a = weighted_bce(&probs, &labels, only_def);
        assert!((weighted_bce(&probs, &labels, doubled) - 2.0 * a).abs() < 1e-12);
        let base = ClassWeights { w0: 0.8, w1: 1.3 };
        let twice = ClassWeights { w0: 0.8, w1: 2.6 };
        let delta = weighted_bce(&probs, &labels, twice) - weighted_bce(&probs, &labels, base);
        assert!((delta - a).abs() < 1e-12);
    }

    #[test]
    fn bce_is_clipped() {
        assert!(bce(0.0, 1).is_finite());
        assert!(bce(1.0, 0).is_finite());
        assert!(bce(1.0, 1) < 1e-6);
    }

    #[test]
    fn plateau_reduces_after_patience_non_improving_epochs() {
        let mut p = ReduceLrOnPlateau::new(1e-4, 0.2, 3, 1e-4, 0.0);
        assert_eq!(p.observe(1.0), 1e-4);
        assert_eq!(p.observe(1.0), 1e-4);
        assert_eq!(p.observe(0.99995), 1e-4);
        assert_eq!(p.observe(1.2), 1e-4 * 0.2);
        assert_eq!(p.observe(0.5), 1e-4 * 0.2);
        for _ in 0..2 {
            p.observe(0.6);
        }
        assert_eq!(p.observe(0.6), 1e-4 * 0.2 * 0.2);
    }

    #[test]
    fn plateau_respects_min_lr() {
        let mut p = ReduceLrOnPlateau::new(1e-4, 0.2, 1, 0.0, 5e-5);
        p.observe(1.0);
        assert_eq!(p.observe(1.0), 5e-5);
        assert_eq!(p.observe(1.0), 5e-5);
    }
}
