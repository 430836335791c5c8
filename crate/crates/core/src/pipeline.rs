//! Subcommand implementations over a [`PipelineConfig`].
//!
//! Output layout under `paths.output_root`:
//!
//! ```text
//! manifests/   real.jsonl real_train.jsonl val.jsonl augmented_train.jsonl augmented.jsonl composition.json
//! ddpm/        denoiser checkpoint
//! synthetic/   generated PNGs and generation_meta.json
//! preview/     grid.png
//! classifiers/<arm>/<backbone>/   head, classifier.json, history.csv, run.json
//! eval/<arm>/<backbone>/          eval.json, predictions.csv, roc.csv
//! tsne/        embedding.csv, tsne.svg, tsne_meta.json
//! report/      report.json, comparison.md, comparisons.csv, f1.svg, roc_auc.svg
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    compute_class_weights, resolve_weights_dir, train_classifier, Backbone, BackboneKind, ClassWeights, Classifier,
    ClassifierMeta, HISTORY_FILE,
};
use crate::config::{ClassifierSpec, PipelineConfig};
use crate::ddpm_trainer::{self, TrainOutcome, META_FILE};
use crate::error::{Error, Result};
use crate::feature_analysis::{self, FeatureCategory, TsneMeta};
use crate::ingestion::{self, Composition, DatasetManifest, Label};
use crate::metrics::{compare_arms, comparisons_to_csv, roc_curve, write_text, Arm, ArmComparison, EvalReport};
use crate::plot::{self, Series};
use crate::sampler::{self, GenerationRequest};
use crate::util;

pub const RUN_FILE: &str = "run.json";
pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.json";

/// Surrogate weights are always built from this seed so every config
/// resolves to the same files.
pub const SURROGATE_SEED: u64 = 0;

/// Paths of every artifact under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.manifests().join(format!("{name}.jsonl"))
    }

    pub fn ddpm(&self) -> PathBuf {
        self.root.join("ddpm")
    }

    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn preview(&self) -> PathBuf {
        self.root.join("preview")
    }

    pub fn classifier(&self, arm: Arm, kind: BackboneKind) -> PathBuf {
        self.root.join("classifiers").join(arm.slug()).join(kind.name())
    }

    pub fn eval(&self, arm: Arm, kind: BackboneKind) -> PathBuf {
        self.root.join("eval").join(arm.slug()).join(kind.name())
    }

    pub fn tsne(&self) -> PathBuf {
        self.root.join("tsne")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Provenance embedded in every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: u64,
    pub job_seed: Option<u64>,
}

impl Stamp {
    fn new(cfg: &PipelineConfig, job_seed: Option<u64>) -> Self {
        Self {
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            job_seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunRecord<T> {
    stamp: Stamp,
    #[serde(flatten)]
    details: T,
}

fn write_run<T: Serialize>(dir: &Path, stamp: Stamp, details: T) -> Result<()> {
    util::write_json(&dir.join(RUN_FILE), &RunRecord { stamp, details })
}

/// Clears `dir`, runs `f`, and removes whatever `f` left behind if it fails.
fn fresh_dir<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    util::create_dir(dir)?;
    let out = f();
    if out.is_err() {
        let _ = std::fs::remove_dir_all(dir);
    }
    out
}

pub fn layout(cfg: &PipelineConfig) -> Layout {
    Layout::new(&cfg.paths.output_root)
}

pub fn weights_dir(cfg: &PipelineConfig) -> PathBuf {
    resolve_weights_dir(cfg.paths.weights_dir.as_deref())
}

/// Builds seeded surrogate weights for every configured backbone and writes
/// them into the weights directory. Returns `(kind, path, sha256)` per file.
pub fn init_weights(cfg: &PipelineConfig) -> Result<Vec<(BackboneKind, PathBuf, String)>> {
    let dir = weights_dir(cfg);
    let mut out = Vec::new();
    for spec in &cfg.classifiers {
        let backbone = Backbone::surrogate(&spec.backbone, SURROGATE_SEED)?;
        let path = backbone.save(&dir)?;
        log::info!("wrote {} ({})", path.display(), backbone.weights_sha256());
        out.push((spec.backbone.kind, path, backbone.weights_sha256().to_string()));
    }
    Ok(out)
}

pub fn load_backbone(cfg: &PipelineConfig, spec: &ClassifierSpec) -> Result<Backbone> {
    Backbone::load(&spec.backbone, &weights_dir(cfg), spec.weights_sha256.as_deref())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifests {
    pub real: DatasetManifest,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
}

/// Loads the real folders and writes the stratified split. Deterministic, so
/// every command that needs it can recompute it.
pub fn prepare_split(cfg: &PipelineConfig) -> Result<SplitManifests> {
    let l = layout(cfg);
    let (real, report) = ingestion::load_real_dataset(&cfg.paths.non_defective_dir, &cfg.paths.defective_dir)?;
    let (train, val) = ingestion::stratified_split(&real, cfg.split.val_fraction, cfg.split.seed)?;
    util::create_dir(&l.manifests())?;
    real.save(&l.manifest("real"))?;
    train.save(&l.manifest("real_train"))?;
    val.save(&l.manifest("val"))?;
    report.write(&l.manifests().join("load_report.txt"))?;
    Ok(SplitManifests { real, train, val })
}

fn defective_only(m: &DatasetManifest) -> Result<DatasetManifest> {
    DatasetManifest::from_records(m.records().iter().filter(|r| r.label == Label::Defective).cloned().collect())
}

/// Trains the denoiser on the defective images of the training split.
/// With `resume`, continues an existing checkpoint instead of starting over.
pub fn cmd_train_ddpm(cfg: &PipelineConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let l = layout(cfg);
    let split = prepare_split(cfg)?;
    let minority = defective_only(&split.train)?;
    let sched = cfg.schedule.build()?;
    let train_cfg = ddpm_trainer::DdpmTrainConfig {
        checkpoint_dir: l.ddpm(),
        ..cfg.ddpm.clone()
    };
    let run = || {
        let out = if resume {
            ddpm_trainer::resume(&minority, &sched, &cfg.denoiser, &train_cfg)?
        } else {
            ddpm_trainer::train_ddpm(&minority, &sched, &cfg.denoiser, &train_cfg)?
        };
        write_run(
            &l.ddpm(),
            Stamp::new(cfg, Some(train_cfg.seed)),
            serde_json::json!({ "weights_sha256": out.meta.weights_sha256, "train_images": minority.len() }),
        )?;
        Ok(out)
    };
    if resume {
        util::require(&l.ddpm().join(META_FILE), "no checkpoint to resume; run `train-ddpm` without --resume")?;
        run()
    } else {
        fresh_dir(&l.ddpm(), run)
    }
}

/// Samples synthetic defective images from the trained checkpoint and writes
/// a preview grid.
pub fn cmd_generate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let l = layout(cfg);
    util::require(&l.ddpm().join(META_FILE), "train the denoiser first (`defectdiff train-ddpm`)")?;
    let req = GenerationRequest {
        num_images: cfg.generation.num_images,
        seed: cfg.generation.seed,
        output_dir: l.synthetic(),
        batch_size: cfg.generation.batch_size,
    };
    let paths = fresh_dir(&l.synthetic(), || {
        let paths = sampler::generate(&l.ddpm(), &req)?;
        write_run(&l.synthetic(), Stamp::new(cfg, Some(req.seed)), &req)?;
        Ok(paths)
    })?;
    fresh_dir(&l.preview(), || {
        let cols = (paths.len() as f64).sqrt().ceil() as usize;
        sampler::preview_grid(&paths, cols, &l.preview().join("grid.png"))?;
        write_run(&l.preview(), Stamp::new(cfg, Some(req.seed)), serde_json::json!({ "images": paths.len(), "cols": cols }))
    })?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSummary {
    pub stamp: Stamp,
    pub real: Composition,
    pub real_train: Composition,
    pub augmented_train: Composition,
    pub validation: Composition,
}

/// Merges the generated images into the training split and records the
/// before/after class balance.
pub fn cmd_augment(cfg: &PipelineConfig) -> Result<CompositionSummary> {
    cfg.validate()?;
    let l = layout(cfg);
    util::require(&l.synthetic(), "generate synthetic images first (`defectdiff generate`)")?;
    let split = prepare_split(cfg)?;
    let (augmented_train, report) = ingestion::build_augmented_manifest(&split.train, &l.synthetic())?;
    let synthetic = DatasetManifest::from_records(
        augmented_train
            .records()
            .iter()
            .filter(|r| r.source == ingestion::Source::Synthetic)
            .cloned()
            .collect(),
    )?;
    let augmented_all = split.real.merge(&synthetic)?;
    augmented_train.save(&l.manifest("augmented_train"))?;
    augmented_all.save(&l.manifest("augmented"))?;
    report.write(&l.manifests().join("augment_report.txt"))?;
    let summary = CompositionSummary {
        stamp: Stamp::new(cfg, None),
        real: split.real.composition(),
        real_train: split.train.composition(),
        augmented_train: augmented_train.composition(),
        validation: split.val.composition(),
    };
    util::write_json(&l.manifests().join("composition.json"), &summary)?;
    log::info!("training composition {} -> {}", summary.real_train, summary.augmented_train);
    Ok(summary)
}

fn load_manifest(l: &Layout, name: &str, hint: &str) -> Result<DatasetManifest> {
    let path = l.manifest(name);
    util::require(&path, hint)?;
    DatasetManifest::load(&path)
}

fn arm_train_manifest(l: &Layout, arm: Arm) -> Result<DatasetManifest> {
    match arm {
        Arm::RealData => load_manifest(l, "real_train", "prepare the split first (`defectdiff augment` or `train-ddpm`)"),
        Arm::AugmentedData => load_manifest(l, "augmented_train", "build the augmented manifest first (`defectdiff augment`)"),
    }
}

fn job_name(arm: Arm, kind: BackboneKind) -> String {
    format!("classifier:{}:{}", arm.slug(), kind.name())
}

#[derive(Clone, Debug, Serialize)]
struct ClassifierRun {
    arm: Arm,
    backbone: BackboneKind,
    class_weights: ClassWeights,
    train_records: usize,
    val_records: usize,
}

/// Trains one head with a preloaded backbone.
fn train_job(cfg: &PipelineConfig, arm: Arm, spec: &ClassifierSpec, backbone: Arc<Backbone>) -> Result<ClassifierMeta> {
    let l = layout(cfg);
    let train = arm_train_manifest(&l, arm)?;
    let val = load_manifest(&l, "val", "prepare the split first")?;
    let weights = compute_class_weights(train.count_label(Label::NonDefective), train.count_label(Label::Defective))?;
    let seed = cfg.derived_seed(&format!("{}:{}", job_name(arm, spec.backbone.kind), spec.train.seed));
    let train_cfg = crate::classifier::ClassifierTrainConfig {
        seed,
        ..spec.train.clone()
    };
    let dir = l.classifier(arm, spec.backbone.kind);
    fresh_dir(&dir, || {
        let mut model = Classifier::new(backbone, seed);
        let history = train_classifier(&mut model, &train, &val, weights, &train_cfg)?;
        let meta = ClassifierMeta {
            class_weights: Some(weights),
            train_config: Some(train_cfg.clone()),
            best_epoch: Some(history.best_epoch),
            epochs_run: history.epochs.len(),
            ..model.meta()
        };
        model.save(&dir, &meta)?;
        history.write_csv(&dir.join(HISTORY_FILE))?;
        write_run(
            &dir,
            Stamp::new(cfg, Some(seed)),
            ClassifierRun {
                arm,
                backbone: spec.backbone.kind,
                class_weights: weights,
                train_records: train.len(),
                val_records: val.len(),
            },
        )?;
        Ok(meta)
    })
}

pub fn cmd_train_classifier(cfg: &PipelineConfig, arm: Arm, kind: BackboneKind) -> Result<ClassifierMeta> {
    cfg.validate()?;
    let spec = cfg.classifier(kind)?;
    let backbone = Arc::new(load_backbone(cfg, spec)?);
    train_job(cfg, arm, spec, backbone)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub stamp: Stamp,
    pub report: EvalReport,
    pub val_records: usize,
}

fn evaluate_job(cfg: &PipelineConfig, arm: Arm, kind: BackboneKind, threshold: f64, backbone: Option<Arc<Backbone>>) -> Result<EvalReport> {
    let l = layout(cfg);
    let cdir = l.classifier(arm, kind);
    let model = match backbone {
        Some(b) => Classifier::load_with_backbone(&cdir, b)?.0,
        None => Classifier::load(&cdir, &weights_dir(cfg))?.0,
    };
    let val = load_manifest(&l, "val", "prepare the split first")?;
    let dir = l.eval(arm, kind);
    fresh_dir(&dir, || {
        let preds = model.predict(&val, threshold)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = val.records().iter().map(|r| r.label.as_target()).collect();
        let report = EvalReport::from_scores(arm, kind, &scores, &labels, threshold)?;
        let mut csv = String::from("path,score,predicted,target\n");
        for (p, y) in preds.iter().zip(&labels) {
            writeln!(csv, "{},{},{},{}", p.path.display(), p.score, p.label.as_target(), y).expect("string write");
        }
        write_text(&dir.join("predictions.csv"), &csv)?;
        write_text(&dir.join("roc.csv"), &roc_curve(&scores, &labels)?.to_csv())?;
        util::write_json(
            &dir.join(EVAL_FILE),
            &EvalArtifact {
                stamp: Stamp::new(cfg, None),
                report: report.clone(),
                val_records: val.len(),
            },
        )?;
        Ok(report)
    })
}

/// Scores the validation split with a trained classifier.
pub fn cmd_evaluate(cfg: &PipelineConfig, arm: Arm, kind: BackboneKind, threshold: Option<f64>) -> Result<EvalReport> {
    cfg.validate()?;
    let threshold = threshold.unwrap_or(cfg.evaluation.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} not in [0, 1]")));
    }
    evaluate_job(cfg, arm, kind, threshold, None)
}

/// Projects backbone features of real and synthetic images with t-SNE.
pub fn cmd_tsne(cfg: &PipelineConfig) -> Result<TsneMeta> {
    cfg.validate()?;
    let l = layout(cfg);
    let manifest = load_manifest(&l, "augmented", "build the augmented manifest first (`defectdiff augment`)")?;
    let spec = cfg.classifier(cfg.analysis.backbone)?;
    let backbone = load_backbone(cfg, spec)?;
    let tsne_cfg = &cfg.analysis.tsne;
    tsne_cfg.validate(manifest.len())?;
    let dir = l.tsne();
    fresh_dir(&dir, || {
        let features = feature_analysis::extract_features(&manifest, &backbone)?;
        let embedding = feature_analysis::tsne_project(&features, tsne_cfg)?;
        feature_analysis::write_embedding(&dir.join("embedding.csv"), &embedding, &features)?;
        let series: Vec<Series> = FeatureCategory::ALL
            .iter()
            .map(|&c| Series {
                name: c.display_name().to_string(),
                color: c.color().to_string(),
                points: embedding
                    .iter()
                    .zip(features.categories())
                    .filter(|(_, &k)| k == c)
                    .map(|(e, _)| (e[0], e[1]))
                    .collect(),
            })
            .collect();
        let title = format!("t-SNE of {} features", spec.backbone.kind.display_name());
        plot::write_svg(&dir.join("tsne.svg"), &plot::scatter_svg(&series, &title, "t-SNE 1", "t-SNE 2")?)?;
        let meta = TsneMeta::new(&features, tsne_cfg);
        #[derive(Serialize)]
        struct Out<'a> {
            stamp: Stamp,
            backbone: &'a crate::classifier::BackboneConfig,
            backbone_weights_sha256: &'a str,
            #[serde(flatten)]
            meta: &'a TsneMeta,
        }
        util::write_json(
            &dir.join("tsne_meta.json"),
            &Out {
                stamp: Stamp::new(cfg, None),
                backbone: &spec.backbone,
                backbone_weights_sha256: backbone.weights_sha256(),
                meta: &meta,
            },
        )?;
        Ok(meta)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stamp: Stamp,
    pub threshold: f64,
    pub composition: CompositionSummary,
    pub results: Vec<EvalReport>,
    pub comparisons: Vec<ArmComparison>,
}

fn resolve_jobs(requested: usize, n: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let jobs = if requested == 0 { cores } else { requested };
    jobs.clamp(1, n.max(1))
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Full protocol: denoiser training, generation, augmentation, both arms for
/// every backbone, comparisons, summary plots and (optionally) t-SNE.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let l = layout(cfg);
    let backbones: Vec<Arc<Backbone>> = cfg
        .classifiers
        .iter()
        .map(|s| load_backbone(cfg, s).map(Arc::new))
        .collect::<Result<_>>()?;
    cmd_train_ddpm(cfg, false)?;
    cmd_generate(cfg)?;
    let composition = cmd_augment(cfg)?;

    let jobs: Vec<(Arm, usize)> = Arm::ALL
        .iter()
        .flat_map(|&arm| (0..cfg.classifiers.len()).map(move |i| (arm, i)))
        .collect();
    let threads = resolve_jobs(cfg.report.jobs, jobs.len());
    log::info!("training {} classifiers on {threads} threads", jobs.len());
    let results = parallel_map(&jobs, threads, |&(arm, i)| {
        let spec = &cfg.classifiers[i];
        train_job(cfg, arm, spec, backbones[i].clone())?;
        evaluate_job(cfg, arm, spec.backbone.kind, cfg.evaluation.threshold, Some(backbones[i].clone()))
    })?;

    let comparisons = cfg
        .classifiers
        .iter()
        .map(|spec| {
            let find = |arm| {
                results
                    .iter()
                    .find(|r| r.arm == arm && r.backbone == spec.backbone.kind)
                    .expect("both arms evaluated")
            };
            compare_arms(find(Arm::RealData), find(Arm::AugmentedData))
        })
        .collect::<Result<Vec<_>>>()?;

    let report = PipelineReport {
        stamp: Stamp::new(cfg, None),
        threshold: cfg.evaluation.threshold,
        composition,
        results,
        comparisons,
    };
    let dir = l.report();
    fresh_dir(&dir, || {
        util::write_json(&dir.join(REPORT_FILE), &report)?;
        let md: String = report.comparisons.iter().map(|c| c.to_markdown() + "\n").collect();
        write_text(&dir.join("comparison.md"), &md)?;
        write_text(&dir.join("comparisons.csv"), &comparisons_to_csv(&report.comparisons))?;
        for (metric, file, title) in [("f1", "f1.svg", "F1 score by backbone"), ("roc_auc", "roc_auc.svg", "ROC AUC by backbone")] {
            let groups: Vec<String> = report.comparisons.iter().map(|c| c.backbone.display_name().to_string()).collect();
            let pick = |f: fn(&crate::metrics::MetricDelta) -> f64| -> Vec<f64> {
                report
                    .comparisons
                    .iter()
                    .map(|c| c.rows.iter().find(|r| r.metric == metric).map_or(0.0, f))
                    .collect()
            };
            let svg = plot::grouped_bars_svg(
                &groups,
                &[("RealData", "#1f77b4", pick(|r| r.real)), ("AugmentedData", "#ff7f0e", pick(|r| r.augmented))],
                title,
                metric,
            )?;
            plot::write_svg(&dir.join(file), &svg)?;
        }
        Ok(())
    })?;
    if cfg.report.include_tsne {
        cmd_tsne(cfg)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_propagates_errors() {
        let items: Vec<usize> = (0..20).collect();
        let out = parallel_map(&items, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        let err = parallel_map(&items, 3, |&i| if i == 7 { Err(Error::config("boom")) } else { Ok(i) });
        assert!(err.is_err());
    }

    #[test]
    fn fresh_dir_cleans_up_on_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let r: Result<()> = fresh_dir(&dir, || {
            std::fs::write(dir.join("partial.txt"), "x").unwrap();
            Err(Error::config("fail"))
        });
        assert!(r.is_err());
        assert!(!dir.exists());
    }

    #[test]
    fn job_counts() {
        assert_eq!(resolve_jobs(2, 6), 2);
        assert_eq!(resolve_jobs(10, 6), 6);
        assert!(resolve_jobs(0, 6) >= 1);
    }
}
