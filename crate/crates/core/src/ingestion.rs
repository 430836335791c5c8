//! Labeled image inventories: folder loading, DDPM preprocessing, real +
//! synthetic merging and stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonDefective,
    Defective,
}

impl Label {
    pub fn as_target(self) -> u8 {
        match self {
            Label::NonDefective => 0,
            Label::Defective => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Label,
    pub source: Source,
}

/// Files skipped while scanning a folder, with the reason for each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn merge(&mut self, other: LoadReport) {
        self.skipped.extend(other.skipped);
        self.warnings.extend(other.warnings);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for w in &self.warnings {
            text.push_str(&format!("warning: {w}\n"));
        }
        for (p, why) in &self.skipped {
            text.push_str(&format!("skipped: {} ({why})\n", p.display()));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Tally of a manifest by label and provenance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub real_non_defective: usize,
    pub real_defective: usize,
    pub synthetic_non_defective: usize,
    pub synthetic_defective: usize,
}

impl Composition {
    pub fn non_defective(&self) -> usize {
        self.real_non_defective + self.synthetic_non_defective
    }

    pub fn defective(&self) -> usize {
        self.real_defective + self.synthetic_defective
    }

    pub fn total(&self) -> usize {
        self.non_defective() + self.defective()
    }

    /// Fraction of records labeled defective.
    pub fn defective_share(&self) -> f64 {
        self.defective() as f64 / self.total() as f64
    }

    /// Majority count over minority count.
    pub fn imbalance_ratio(&self) -> f64 {
        let (a, b) = (self.non_defective(), self.defective());
        a.max(b) as f64 / a.min(b) as f64
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-defective {} | defective {} ({} real + {} synthetic) | defective share {:.1}% | imbalance {:.2}:1",
            self.non_defective(),
            self.defective(),
            self.real_defective,
            self.synthetic_defective,
            100.0 * self.defective_share(),
            self.imbalance_ratio()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.source == Source::Synthetic && r.label != Label::Defective {
                return Err(Error::config(format!(
                    "synthetic record {} must be labeled defective",
                    r.path.display()
                )));
            }
            if !seen.insert(r.path.clone()) {
                return Err(Error::DuplicatePath(r.path.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn composition(&self) -> Composition {
        let mut c = Composition::default();
        for r in &self.records {
            match (r.label, r.source) {
                (Label::NonDefective, Source::Real) => c.real_non_defective += 1,
                (Label::Defective, Source::Real) => c.real_defective += 1,
                (Label::NonDefective, Source::Synthetic) => c.synthetic_non_defective += 1,
                (Label::Defective, Source::Synthetic) => c.synthetic_defective += 1,
            }
        }
        c
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Concatenation; duplicate paths are rejected.
    pub fn merge(&self, other: &DatasetManifest) -> Result<Self> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Self::from_records(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?);
        }
        Self::from_records(records)
    }
}

/// Scans `dir` (non-recursively, sorted by file name) for decodable PNG/JPG
/// files. Other files and undecodable images are skipped and reported.
pub fn load_folder(dir: &Path, label: Label, source: Source) -> Result<(DatasetManifest, LoadReport)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();
    let mut report = LoadReport::default();
    let mut records = Vec::new();
    for path in paths {
        if !imageio::has_image_extension(&path) {
            log::warn!("skipping non-image file {}", path.display());
            report.skipped.push((path, "not a PNG/JPG file".into()));
            continue;
        }
        if let Err(e) = imageio::probe(&path) {
            log::warn!("skipping unreadable image {}: {e}", path.display());
            report.skipped.push((path, format!("unreadable: {e}")));
            continue;
        }
        records.push(ImageRecord { path, label, source });
    }
    Ok((DatasetManifest::from_records(records)?, report))
}

/// Defective-class folder used to train the diffusion model. Fails when the
/// folder yields no usable image.
pub fn load_minority_folder(dir: &Path) -> Result<(DatasetManifest, LoadReport)> {
    let (manifest, report) = load_folder(dir, Label::Defective, Source::Real)?;
    if manifest.is_empty() {
        return Err(Error::Empty(format!(
            "no PNG/JPG images in {}; cannot train on zero images",
            dir.display()
        )));
    }
    Ok((manifest, report))
}

/// Real images of both classes from two folders.
pub fn load_real_dataset(non_defective_dir: &Path, defective_dir: &Path) -> Result<(DatasetManifest, LoadReport)> {
    let (nd, mut report) = load_folder(non_defective_dir, Label::NonDefective, Source::Real)?;
    let (d, r2) = load_folder(defective_dir, Label::Defective, Source::Real)?;
    report.merge(r2);
    Ok((nd.merge(&d)?, report))
}

/// Resize to `size`×`size` and map each channel through `(x/255 − 0.5)/0.5`.
pub fn preprocess_for_ddpm(record: &ImageRecord, size: usize) -> Result<Tensor> {
    let img = imageio::load_rgb(&record.path)?;
    let img = imageio::resize_square(&img, size as u32);
    Ok(imageio::to_chw(&img, normalize_byte))
}

pub fn normalize_byte(v: u8) -> f32 {
    ((v as f64 / 255.0 - 0.5) / 0.5) as f32
}

/// Adds every image in `synthetic_dir` as a synthetic defective record.
pub fn build_augmented_manifest(real: &DatasetManifest, synthetic_dir: &Path) -> Result<(DatasetManifest, LoadReport)> {
    let (synthetic, mut report) = load_folder(synthetic_dir, Label::Defective, Source::Synthetic)?;
    if synthetic.is_empty() {
        let msg = format!("no synthetic images in {}; manifest unchanged", synthetic_dir.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    let merged = real.merge(&synthetic)?;
    log::info!("augmented composition: {}", merged.composition());
    Ok((merged, report))
}

/// Stratified train/validation partition of the real records.
///
/// Each label contributes `round(n · val_fraction)` records to validation,
/// chosen by a seeded shuffle. Synthetic records always go to training.
/// Both outputs keep the input order.
pub fn stratified_split(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.source == Source::Real {
            by_label.entry(r.label).or_default().push(i);
        }
    }
    for label in [Label::NonDefective, Label::Defective] {
        if by_label.get(&label).is_none_or(|v| v.is_empty()) {
            return Err(Error::Empty(format!("no real {label:?} records to split")));
        }
    }
    let mut is_val = vec![false; manifest.len()];
    for (stream, (_, idx)) in by_label.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).min(idx.len());
        idx.shuffle(&mut rng);
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .zip(&is_val)
        .partition(|(_, &v)| v);
    let strip = |v: Vec<(&ImageRecord, &bool)>| DatasetManifest {
        records: v.into_iter().map(|(r, _)| r.clone()).collect(),
    };
    Ok((strip(train), strip(val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(name: &str, label: Label, source: Source) -> ImageRecord {
        ImageRecord {
            path: PathBuf::from(name),
            label,
            source,
        }
    }

    fn synthetic_manifest(nd: usize, d: usize, syn: usize) -> DatasetManifest {
        let mut v = Vec::new();
        v.extend((0..nd).map(|i| rec(&format!("nd/{i}.png"), Label::NonDefective, Source::Real)));
        v.extend((0..d).map(|i| rec(&format!("d/{i}.png"), Label::Defective, Source::Real)));
        v.extend((0..syn).map(|i| rec(&format!("s/{i}.png"), Label::Defective, Source::Synthetic)));
        DatasetManifest::from_records(v).unwrap()
    }

    fn write_png(path: &Path, rgb: [u8; 3], w: u32, h: u32) {
        image::RgbImage::from_pixel(w, h, image::Rgb(rgb)).save(path).unwrap();
    }

    #[test]
    fn folder_scan_filters_extensions_and_reports_skips() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), [1, 2, 3], 4, 4);
        write_png(&dir.path().join("b.png"), [1, 2, 3], 4, 4);
        std::fs::write(dir.path().join("readme.txt"), "x").unwrap();
        std::fs::write(dir.path().join("broken.jpg"), "not a jpeg").unwrap();
        let (m, report) = load_minority_folder(dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(report.skipped.len(), 2);
        assert!(m.records().iter().all(|r| r.label == Label::Defective && r.source == Source::Real));
    }

    #[test]
    fn empty_minority_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_minority_folder(dir.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn ddpm_preprocessing_endpoints_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        for (name, rgb) in [("black.png", [0, 0, 0]), ("white.png", [255, 255, 255]), ("gray.png", [128, 128, 128])] {
            write_png(&dir.path().join(name), rgb, 37, 53);
        }
        let r = |n: &str| rec(dir.path().join(n).to_str().unwrap(), Label::Defective, Source::Real);
        let black = preprocess_for_ddpm(&r("black.png"), 128).unwrap();
        assert_eq!(black.shape(), &[3, 128, 128]);
        assert!(black.data().iter().all(|&v| v == -1.0));
        let white = preprocess_for_ddpm(&r("white.png"), 128).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let gray = preprocess_for_ddpm(&r("gray.png"), 128).unwrap();
        assert!(gray.data().iter().all(|&v| (v - 0.003_922).abs() < 1e-6));
    }

    #[test]
    fn augmented_manifest_composition() {
        let real = synthetic_manifest(209, 63, 0);
        let before = real.composition();
        assert!((before.defective_share() - 0.232).abs() < 5e-4);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..60 {
            write_png(&dir.path().join(format!("gen_0_{i:04}.png")), [9, 9, 9], 2, 2);
        }
        let (aug, _) = build_augmented_manifest(&real, dir.path()).unwrap();
        let c = aug.composition();
        assert_eq!((c.non_defective(), c.defective(), c.synthetic_defective), (209, 123, 60));
        assert!((c.defective_share() - 123.0 / 332.0).abs() < 1e-12);
        assert!((c.imbalance_ratio() - 209.0 / 123.0).abs() < 1e-12);
    }

    #[test]
    fn empty_synthetic_dir_keeps_manifest_and_warns() {
        let real = synthetic_manifest(5, 3, 0);
        let dir = tempfile::tempdir().unwrap();
        let (aug, report) = build_augmented_manifest(&real, dir.path()).unwrap();
        assert_eq!(aug, real);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let real = synthetic_manifest(2, 2, 0);
        assert!(matches!(real.merge(&real), Err(Error::DuplicatePath(_))));
    }

    #[test]
    fn reference_split_sizes() {
        let m = synthetic_manifest(209, 63, 0);
        let (train, val) = stratified_split(&m, 0.27, 7).unwrap();
        assert_eq!(val.count_label(Label::NonDefective), 56);
        assert_eq!(val.count_label(Label::Defective), 17);
        assert_eq!(train.len() + val.len(), 272);
        let again = stratified_split(&m, 0.27, 7).unwrap();
        assert_eq!(again.1, val);
    }

    #[test]
    fn balanced_half_split() {
        let m = synthetic_manifest(10, 10, 0);
        let (_, val) = stratified_split(&m, 0.5, 1).unwrap();
        assert_eq!(val.count_label(Label::NonDefective), 5);
        assert_eq!(val.count_label(Label::Defective), 5);
    }

    #[test]
    fn synthetic_records_stay_in_training() {
        let m = synthetic_manifest(20, 10, 8);
        let (train, val) = stratified_split(&m, 0.3, 3).unwrap();
        assert!(val.records().iter().all(|r| r.source == Source::Real));
        assert_eq!(train.composition().synthetic_defective, 8);
    }

    #[test]
    fn split_errors() {
        let m = synthetic_manifest(10, 0, 0);
        assert!(stratified_split(&m, 0.3, 0).is_err());
        let m = synthetic_manifest(10, 10, 0);
        assert!(stratified_split(&m, 0.0, 0).is_err());
        assert!(stratified_split(&m, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_seeded_stratified_partition(nd in 1usize..80, d in 1usize..40, syn in 0usize..10, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let m = synthetic_manifest(nd, d, syn);
            let (train, val) = stratified_split(&m, frac, seed).unwrap();
            let mut all: Vec<_> = train.records().iter().chain(val.records()).map(|r| r.path.clone()).collect();
            all.sort();
            let mut orig: Vec<_> = m.records().iter().map(|r| r.path.clone()).collect();
            orig.sort();
            prop_assert_eq!(all, orig);
            let tp: HashSet<_> = train.records().iter().map(|r| &r.path).collect();
            prop_assert!(val.records().iter().all(|r| !tp.contains(&r.path)));
            for (label, n) in [(Label::NonDefective, nd), (Label::Defective, d)] {
                let got = val.count_label(label) as f64;
                prop_assert!((got - n as f64 * frac).abs() <= 1.0);
            }
            prop_assert_eq!(stratified_split(&m, frac, seed).unwrap(), (train, val));
        }

        #[test]
        fn manifest_jsonl_round_trip(nd in 0usize..20, d in 0usize..20, syn in 0usize..5) {
            let m = synthetic_manifest(nd, d, syn);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            m.save(&p).unwrap();
            prop_assert_eq!(DatasetManifest::load(&p).unwrap(), m);
        }
    }
}
