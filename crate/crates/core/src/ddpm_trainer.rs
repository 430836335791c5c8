//! Noise-prediction training loop with resumable checkpoints.
//!
//! Checkpoint directory layout:
//! `weights.bin` (safetensors), `meta.json`, `loss_log.csv`, `optimizer.bin`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::ingestion::{preprocess_for_ddpm, DatasetManifest};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::tensor::Tensor;
use crate::util;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub log_every_steps: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1300,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            log_every_steps: 50,
            seed: 0,
            checkpoint_dir: PathBuf::from("runs/ddpm"),
        }
    }
}

impl DdpmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.log_every_steps < 1 {
            return Err(Error::config("log_every_steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Everything needed to rebuild the schedule and denoiser, plus progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: DdpmTrainConfig,
    pub step: u64,
    pub epochs_completed: usize,
    pub num_images: usize,
    pub parameter_count: usize,
    pub weights_sha256: String,
    /// Loss sum and count of the partially filled logging window.
    pub pending_loss_sum: f64,
    pub pending_loss_count: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub meta: CheckpointMeta,
    pub loss_log: Vec<LossLogEntry>,
}

/// Uniform timesteps in `[0, T)`.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, n: usize, num_timesteps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..num_timesteps)).collect()
}

pub fn load_training_images(manifest: &DatasetManifest, size: usize) -> Result<Vec<Tensor>> {
    manifest
        .records()
        .iter()
        .map(|r| preprocess_for_ddpm(r, size))
        .collect()
}

/// Trains a fresh denoiser on the images of `manifest`.
pub fn train_ddpm(
    manifest: &DatasetManifest,
    sched: &NoiseSchedule,
    denoiser_cfg: &DenoiserConfig,
    cfg: &DdpmTrainConfig,
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Empty("training manifest has no images".into()));
    }
    denoiser_cfg.validate()?;
    let images = load_training_images(manifest, denoiser_cfg.sample_size)?;
    train_on_images(&images, sched, denoiser_cfg, cfg)
}

/// Continues training from the checkpoint in `cfg.checkpoint_dir` until
/// `cfg.epochs` total epochs are complete.
pub fn resume(
    manifest: &DatasetManifest,
    sched: &NoiseSchedule,
    denoiser_cfg: &DenoiserConfig,
    cfg: &DdpmTrainConfig,
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Empty("training manifest has no images".into()));
    }
    let images = load_training_images(manifest, denoiser_cfg.sample_size)?;
    resume_on_images(&images, sched, denoiser_cfg, cfg)
}

/// Same as [`train_ddpm`] with images already preprocessed to `[3, S, S]`.
pub fn train_on_images(
    images: &[Tensor],
    sched: &NoiseSchedule,
    denoiser_cfg: &DenoiserConfig,
    cfg: &DdpmTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let denoiser = Denoiser::new(denoiser_cfg.clone(), sched.num_timesteps(), cfg.seed)?;
    let adam = Adam::new(AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay), denoiser.params());
    let state = TrainState {
        denoiser,
        adam,
        step: 0,
        epochs_completed: 0,
        pending_sum: 0.0,
        pending_count: 0,
        log: Vec::new(),
    };
    run(images, sched, cfg, state)
}

pub fn resume_on_images(
    images: &[Tensor],
    sched: &NoiseSchedule,
    denoiser_cfg: &DenoiserConfig,
    cfg: &DdpmTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = &cfg.checkpoint_dir;
    let (denoiser, _, meta) = load_checkpoint(dir)?;
    if meta.schedule != *sched.params() {
        return Err(Error::CheckpointMismatch(format!(
            "schedule {:?} differs from checkpoint {:?}",
            sched.params(),
            meta.schedule
        )));
    }
    if meta.denoiser != *denoiser_cfg {
        return Err(Error::CheckpointMismatch(format!(
            "denoiser config {denoiser_cfg:?} differs from checkpoint {:?}",
            meta.denoiser
        )));
    }
    if meta.train.seed != cfg.seed || meta.train.batch_size != cfg.batch_size {
        return Err(Error::CheckpointMismatch("seed and batch_size must match the checkpoint".into()));
    }
    let mut adam = Adam::new(AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay), denoiser.params());
    let mut opt_state = adam.state(denoiser.params());
    opt_state.load_into(&dir.join(OPTIMIZER_FILE))?;
    adam.restore(denoiser.params(), &opt_state, meta.step)?;
    let state = TrainState {
        denoiser,
        adam,
        step: meta.step,
        epochs_completed: meta.epochs_completed,
        pending_sum: meta.pending_loss_sum,
        pending_count: meta.pending_loss_count,
        log: read_loss_log(&dir.join(LOSS_LOG_FILE))?,
    };
    run(images, sched, cfg, state)
}

struct TrainState {
    denoiser: Denoiser,
    adam: Adam,
    step: u64,
    epochs_completed: usize,
    pending_sum: f64,
    pending_count: usize,
    log: Vec<LossLogEntry>,
}

fn run(images: &[Tensor], sched: &NoiseSchedule, cfg: &DdpmTrainConfig, mut st: TrainState) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let size = st.denoiser.config().sample_size;
    let channels = st.denoiser.config().in_channels;
    let images: Vec<Tensor> = images
        .iter()
        .map(|img| {
            img.ensure_shape(&[channels, size, size])?;
            img.clone().reshape([1, channels, size, size])
        })
        .collect::<Result<_>>()?;
    util::create_dir(&cfg.checkpoint_dir)?;
    let t_max = sched.num_timesteps();
    let mut meta = checkpoint_meta(&st, sched, cfg, images.len());
    if st.epochs_completed >= cfg.epochs || st.step == 0 {
        save_checkpoint(&st, &mut meta, &cfg.checkpoint_dir)?;
    }
    while st.epochs_completed < cfg.epochs {
        let epoch = st.epochs_completed;
        // One RNG stream per epoch makes resumed runs replay the same draws.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
            let x0 = Tensor::stack_leading(&parts)?;
            let ts = sample_timesteps(&mut rng, batch.len(), t_max);
            let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
            let x_t = sched.forward_sample_batch(&x0, &ts, &eps)?;
            let (loss, grads) = st.denoiser.loss_and_grads(&x_t, &ts, &eps)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at step {} (epoch {epoch}, timesteps {ts:?}); try a lower learning rate",
                    st.step + 1
                )));
            }
            st.adam.step(st.denoiser.params_mut(), &grads);
            st.step += 1;
            st.pending_sum += loss;
            st.pending_count += 1;
            if st.step % cfg.log_every_steps as u64 == 0 {
                let entry = LossLogEntry {
                    step: st.step,
                    epoch,
                    loss: st.pending_sum / st.pending_count as f64,
                };
                log::info!("step {} epoch {} loss {:.6}", entry.step, entry.epoch, entry.loss);
                st.log.push(entry);
                st.pending_sum = 0.0;
                st.pending_count = 0;
            }
        }
        st.epochs_completed += 1;
        meta = checkpoint_meta(&st, sched, cfg, images.len());
        save_checkpoint(&st, &mut meta, &cfg.checkpoint_dir)?;
    }
    Ok(TrainOutcome {
        checkpoint_dir: cfg.checkpoint_dir.clone(),
        meta,
        loss_log: st.log,
    })
}

fn checkpoint_meta(st: &TrainState, sched: &NoiseSchedule, cfg: &DdpmTrainConfig, num_images: usize) -> CheckpointMeta {
    CheckpointMeta {
        schedule: sched.params().clone(),
        denoiser: st.denoiser.config().clone(),
        train: cfg.clone(),
        step: st.step,
        epochs_completed: st.epochs_completed,
        num_images,
        parameter_count: st.denoiser.count_parameters(),
        weights_sha256: String::new(),
        pending_loss_sum: st.pending_sum,
        pending_loss_count: st.pending_count,
    }
}

fn save_checkpoint(st: &TrainState, meta: &mut CheckpointMeta, dir: &Path) -> Result<()> {
    let bytes = st.denoiser.params().to_safetensors()?;
    meta.weights_sha256 = util::sha256_hex(&bytes);
    let path = dir.join(WEIGHTS_FILE);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    st.adam.state(st.denoiser.params()).save(&dir.join(OPTIMIZER_FILE))?;
    write_loss_log(&dir.join(LOSS_LOG_FILE), &st.log)?;
    util::write_json(&dir.join(META_FILE), meta)
}

pub fn write_loss_log(path: &Path, log: &[LossLogEntry]) -> Result<()> {
    let mut s = String::from("step,epoch,loss\n");
    for e in log {
        writeln!(s, "{},{},{}", e.step, e.epoch, e.loss).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossLogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::TensorFile {
        path: path.to_path_buf(),
        reason: format!("bad loss log row {line:?}"),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split(',');
            let mut next = || it.next().ok_or_else(|| bad(line));
            let step = next()?.parse().map_err(|_| bad(line))?;
            let epoch = next()?.parse().map_err(|_| bad(line))?;
            let loss = next()?.parse().map_err(|_| bad(line))?;
            Ok(LossLogEntry { step, epoch, loss })
        })
        .collect()
}

/// Rebuilds the denoiser and schedule stored in a checkpoint directory and
/// verifies the weights against the recorded hash.
pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, NoiseSchedule, CheckpointMeta)> {
    util::require(&dir.join(META_FILE), "train a denoiser first (`defectdiff train-ddpm`)")?;
    let meta: CheckpointMeta = util::read_json(&dir.join(META_FILE))?;
    let sched = meta.schedule.build()?;
    let mut denoiser = Denoiser::new(meta.denoiser.clone(), sched.num_timesteps(), meta.train.seed)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = util::sha256_hex(&bytes);
    if actual != meta.weights_sha256 {
        return Err(Error::WeightsHashMismatch {
            path,
            expected: meta.weights_sha256.clone(),
            actual,
        });
    }
    denoiser.params_mut().load_from_bytes(&bytes, &path)?;
    Ok((denoiser, sched, meta))
}

/// Reads only the parameter store of a checkpoint, e.g. for hashing.
pub fn checkpoint_params(dir: &Path) -> Result<ParamStore> {
    Ok(load_checkpoint(dir)?.0.params().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            sample_size: 8,
            in_channels: 3,
            out_channels: 3,
            block_channels: vec![8, 16],
            layers_per_block: 1,
            attention_levels: Default::default(),
        }
    }

    fn images(n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                let data = (0..3 * 64).map(|j| (((i * 7 + j) % 11) as f32 / 5.0) - 1.0).collect();
                Tensor::from_vec(vec![3, 8, 8], data).unwrap()
            })
            .collect()
    }

    fn train_cfg(dir: &Path, epochs: usize) -> DdpmTrainConfig {
        DdpmTrainConfig {
            epochs,
            batch_size: 2,
            learning_rate: 1e-3,
            log_every_steps: 3,
            seed: 5,
            checkpoint_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn timestep_sampling_is_uniform() {
        let t = 20;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0f64; t];
        for s in sample_timesteps(&mut rng, n, t) {
            counts[s] += 1.0;
        }
        let expected = n as f64 / t as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((t - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p}");
    }

    #[test]
    fn config_validation() {
        let mut c = DdpmTrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        c = DdpmTrainConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = DdpmTrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_manifest_rejected() {
        let sched = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let cfg = DdpmTrainConfig::default();
        let r = train_ddpm(&DatasetManifest::default(), &sched, &tiny_cfg(), &cfg);
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_log_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let sched = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let out = train_on_images(&images(4), &sched, &tiny_cfg(), &train_cfg(dir.path(), 3)).unwrap();
        assert_eq!(out.meta.step, 6);
        assert_eq!(out.loss_log.iter().map(|e| e.step).collect::<Vec<_>>(), vec![3, 6]);
        let (den, sched2, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta, out.meta);
        assert_eq!(sched2.params(), sched.params());
        assert_eq!(den.config(), &tiny_cfg());
        assert_eq!(read_loss_log(&dir.path().join(LOSS_LOG_FILE)).unwrap(), out.loss_log);
    }

    #[test]
    fn noop_resume_keeps_weights() {
        let dir = tempfile::tempdir().unwrap();
        let sched = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let cfg = train_cfg(dir.path(), 2);
        train_on_images(&images(4), &sched, &tiny_cfg(), &cfg).unwrap();
        let before = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let out = resume_on_images(&images(4), &sched, &tiny_cfg(), &cfg).unwrap();
        assert_eq!(out.meta.step, 4);
        assert_eq!(std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap(), before);
    }

    #[test]
    fn split_training_matches_straight_training() {
        let sched = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train_on_images(&images(5), &sched, &tiny_cfg(), &train_cfg(a.path(), 2)).unwrap();
        let split = resume_on_images(&images(5), &sched, &tiny_cfg(), &train_cfg(a.path(), 4)).unwrap();
        let straight = train_on_images(&images(5), &sched, &tiny_cfg(), &train_cfg(b.path(), 4)).unwrap();
        assert_eq!(split.meta.step, straight.meta.step);
        assert_eq!(split.meta.step, 12);
        assert_eq!(split.meta.weights_sha256, straight.meta.weights_sha256);
        assert_eq!(split.loss_log, straight.loss_log);
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let sched = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let cfg = train_cfg(dir.path(), 1);
        train_on_images(&images(2), &sched, &tiny_cfg(), &cfg).unwrap();
        let mut other = tiny_cfg();
        other.sample_size = 16;
        assert!(matches!(
            resume_on_images(&images(2), &sched, &other, &cfg),
            Err(Error::CheckpointMismatch(_))
        ));
        let sched30 = make_linear_schedule(30, 1e-4, 0.02).unwrap();
        assert!(matches!(
            resume_on_images(&images(2), &sched30, &tiny_cfg(), &cfg),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn full_scale_config_echoed_into_meta() {
        let meta = CheckpointMeta {
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            train: DdpmTrainConfig::default(),
            step: 0,
            epochs_completed: 0,
            num_images: 63,
            parameter_count: 0,
            weights_sha256: String::new(),
            pending_loss_sum: 0.0,
            pending_loss_count: 0,
        };
        let v: serde_json::Value = serde_json::to_value(&meta).unwrap();
        assert_eq!(v["schedule"]["num_timesteps"], 14000);
        assert_eq!(v["train"]["learning_rate"], 1e-4);
        assert_eq!(v["train"]["batch_size"], 8);
        assert_eq!(v["train"]["epochs"], 1300);
        let back: CheckpointMeta = serde_json::from_value(v).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn corrupted_weights_detected() {
        let dir = tempfile::tempdir().unwrap();
        let sched = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        train_on_images(&images(2), &sched, &tiny_cfg(), &train_cfg(dir.path(), 1)).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::WeightsHashMismatch { .. })));
    }
}
