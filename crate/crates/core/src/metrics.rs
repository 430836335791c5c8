//! Binary-classification metrics, ROC analysis and arm comparisons.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::BackboneKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![scores.len()],
            actual: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("no scores to evaluate".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::config(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Counts with the inclusive rule: predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Empirical ROC curve. `points[0]` is `(0, 0)`; `points[i + 1]` is the
/// operating point at `thresholds[i]`, one per distinct score in descending
/// order, ending at `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub points: Vec<(f64, f64)>,
    /// Cumulative `(fp, tp)` counts matching `points`.
    counts: Vec<(u64, u64)>,
    positives: u64,
    negatives: u64,
}

impl RocCurve {
    /// Trapezoidal area, accumulated in integer units and divided once.
    pub fn auc(&self) -> f64 {
        let mut twice_area: u128 = 0;
        for w in self.counts.windows(2) {
            let (fp0, tp0) = w[0];
            let (fp1, tp1) = w[1];
            twice_area += (fp1 - fp0) as u128 * (tp0 + tp1) as u128;
        }
        twice_area as f64 / (2.0 * self.positives as f64 * self.negatives as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        writeln!(s, "inf,0,0").expect("string write");
        for (t, (fpr, tpr)) in self.thresholds.iter().zip(&self.points[1..]) {
            writeln!(s, "{t},{fpr},{tpr}").expect("string write");
        }
        s
    }
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::config("ROC AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = Vec::new();
    let mut counts = vec![(0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        counts.push((fp, tp));
    }
    let points = counts
        .iter()
        .map(|&(f, t)| (f as f64 / negatives as f64, t as f64 / positives as f64))
        .collect();
    Ok(RocCurve {
        thresholds,
        points,
        counts,
        positives,
        negatives,
    })
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auc())
}

/// Threshold-dependent metrics plus AUC (absent for single-class inputs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: Option<f64>,
}

pub fn evaluate_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    let cm = confusion(scores, labels, threshold)?;
    let both = labels.contains(&0) && labels.contains(&1);
    Ok(BinaryMetrics {
        confusion: cm,
        accuracy: cm.accuracy(),
        precision: cm.precision(),
        recall: cm.recall(),
        f1: cm.f1(),
        roc_auc: if both { Some(roc_auc(scores, labels)?) } else { None },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    RealData,
    AugmentedData,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::RealData, Arm::AugmentedData];

    pub fn slug(self) -> &'static str {
        match self {
            Arm::RealData => "real",
            Arm::AugmentedData => "augmented",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.slug().eq_ignore_ascii_case(s) || a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown arm {s:?} (expected real or augmented)")))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::RealData => "RealData",
            Arm::AugmentedData => "AugmentedData",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: Arm,
    pub backbone: BackboneKind,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
}

impl EvalReport {
    pub fn from_scores(arm: Arm, backbone: BackboneKind, scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let cm = confusion(scores, labels, threshold)?;
        Ok(Self {
            arm,
            backbone,
            threshold,
            confusion: cm,
            accuracy: cm.accuracy(),
            precision: cm.precision(),
            recall: cm.recall(),
            f1: cm.f1(),
            roc_auc: roc_auc(scores, labels)?,
        })
    }

    /// `(name, value)` for the five reported metrics.
    pub fn metric_values(&self) -> [(&'static str, f64); 5] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("roc_auc", self.roc_auc),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub real: f64,
    pub augmented: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub backbone: BackboneKind,
    pub rows: Vec<MetricDelta>,
    /// Metrics among recall and precision that got worse with augmentation.
    pub regressions: Vec<String>,
}

pub fn compare_arms(real: &EvalReport, augmented: &EvalReport) -> Result<ArmComparison> {
    if real.backbone != augmented.backbone {
        return Err(Error::config(format!(
            "cannot compare {} with {}",
            real.backbone, augmented.backbone
        )));
    }
    let rows: Vec<MetricDelta> = real
        .metric_values()
        .iter()
        .zip(augmented.metric_values())
        .map(|(&(name, r), (_, a))| MetricDelta {
            metric: name.to_string(),
            real: r,
            augmented: a,
            delta: a - r,
        })
        .collect();
    let regressions = rows
        .iter()
        .filter(|r| (r.metric == "recall" || r.metric == "precision") && r.delta < 0.0)
        .map(|r| r.metric.clone())
        .collect();
    Ok(ArmComparison {
        backbone: real.backbone,
        rows,
        regressions,
    })
}

impl ArmComparison {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n", self.backbone.display_name());
        s.push_str("| Metric | RealData | AugmentedData | Delta |\n|---|---|---|---|\n");
        for r in &self.rows {
            writeln!(s, "| {} | {:.4} | {:.4} | {:+.4} |", r.metric, r.real, r.augmented, r.delta).expect("string write");
        }
        if !self.regressions.is_empty() {
            writeln!(s, "\nRegression with augmentation: {}", self.regressions.join(", ")).expect("string write");
        }
        s
    }
}

/// One CSV with a row per (backbone, metric).
pub fn comparisons_to_csv(comparisons: &[ArmComparison]) -> String {
    let mut s = String::from("backbone,metric,real,augmented,delta\n");
    for c in comparisons {
        for r in &c.rows {
            writeln!(s, "{},{},{},{},{}", c.backbone, r.metric, r.real, r.augmented, r.delta).expect("string write");
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
