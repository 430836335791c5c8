//! Backbone feature extraction, PCA pre-reduction and exact t-SNE.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{load_classifier_input, pooled_features, Backbone};
use crate::error::{Error, Result};
use crate::ingestion::{DatasetManifest, ImageRecord, Label, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    RealNondef,
    RealDef,
    SyntheticDef,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 3] = [Self::RealNondef, Self::RealDef, Self::SyntheticDef];

    pub fn of(record: &ImageRecord) -> Self {
        match (record.source, record.label) {
            (Source::Synthetic, _) => Self::SyntheticDef,
            (Source::Real, Label::Defective) => Self::RealDef,
            (Source::Real, Label::NonDefective) => Self::RealNondef,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::RealNondef => "real_nondef",
            Self::RealDef => "real_def",
            Self::SyntheticDef => "synthetic_def",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::RealNondef => "Real non-defective",
            Self::RealDef => "Real defective",
            Self::SyntheticDef => "Synthetic defective",
        }
    }

    /// Plot colour: blue, red, orange.
    pub fn color(self) -> &'static str {
        match self {
            Self::RealNondef => "#1f77b4",
            Self::RealDef => "#d62728",
            Self::SyntheticDef => "#ff7f0e",
        }
    }
}

/// One feature vector per image, with its category and source path.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    vectors: Vec<Vec<f64>>,
    categories: Vec<FeatureCategory>,
    paths: Vec<PathBuf>,
}

impl FeatureMatrix {
    pub fn new(vectors: Vec<Vec<f64>>, categories: Vec<FeatureCategory>, paths: Vec<PathBuf>) -> Result<Self> {
        if vectors.len() != categories.len() || vectors.len() != paths.len() {
            return Err(Error::config("feature rows, categories and paths differ in length"));
        }
        if let Some(d) = vectors.first().map(Vec::len) {
            if d == 0 || vectors.iter().any(|v| v.len() != d) {
                return Err(Error::config("feature rows must share a positive dimension"));
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            vectors,
            categories,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn categories(&self) -> &[FeatureCategory] {
        &self.categories
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn count(&self, category: FeatureCategory) -> usize {
        self.categories.iter().filter(|&&c| c == category).count()
    }
}

/// Pooled backbone features for every record of `manifest`.
pub fn extract_features(manifest: &DatasetManifest, backbone: &Backbone) -> Result<FeatureMatrix> {
    let size = backbone.config().input_size;
    let images = manifest
        .records()
        .iter()
        .map(|r| load_classifier_input(&r.path, size))
        .collect::<Result<Vec<_>>>()?;
    let vectors = pooled_features(backbone, &images)?
        .into_iter()
        .map(|v| v.into_iter().map(f64::from).collect())
        .collect();
    let categories = manifest.records().iter().map(FeatureCategory::of).collect();
    let paths = manifest.records().iter().map(|r| r.path.clone()).collect();
    FeatureMatrix::new(vectors, categories, paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub output_dim: usize,
    /// Inputs wider than this are PCA-reduced to this many dimensions first.
    pub pca_dims: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 2000,
            seed: 42,
            output_dim: 2,
            pca_dims: 50,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity > 0.0) || self.iterations == 0 || self.output_dim == 0 || self.pca_dims == 0 {
            return Err(Error::config("t-SNE perplexity, iterations, output_dim and pca_dims must be positive"));
        }
        if !(3.0 * self.perplexity < n as f64 - 1.0) {
            return Err(Error::config(format!(
                "perplexity {} too large for {n} points (needs perplexity < (N - 1) / 3)",
                self.perplexity
            )));
        }
        Ok(())
    }
}

/// Rows projected onto the top `k` principal components. Component signs are
/// fixed so the largest-magnitude projection is positive.
pub fn pca_reduce(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let k = k.min(n).min(d);
    let proj = if n <= d {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = descending(eig.eigenvalues.as_slice());
        DMatrix::from_fn(n, k, |i, c| {
            let e = order[c];
            eig.eigenvectors[(i, e)] * eig.eigenvalues[e].max(0.0).sqrt()
        })
    } else {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let order = descending(eig.eigenvalues.as_slice());
        let v = DMatrix::from_fn(d, k, |j, c| eig.eigenvectors[(j, order[c])]);
        &x * v
    };
    let mut out = vec![vec![0.0; k]; n];
    for c in 0..k {
        let col = proj.column(c);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in out.iter_mut().enumerate() {
            row[c] = sign * col[i];
        }
    }
    out
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn squared_distances(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetrized input affinities `(P_{j|i} + P_{i|j}) / 2N`, with each row's
/// Gaussian bandwidth found by bisection to match `perplexity`.
pub fn joint_probabilities(rows: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = rows.len();
    let dist = squared_distances(rows);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let di = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let min_d = di.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            // Shifting by the nearest distance keeps the exponentials in range.
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    row[j] = 0.0;
                    continue;
                }
                let e = (-(di[j] - min_d) * beta).exp();
                row[j] = e;
                sum += e;
                weighted += (di[j] - min_d) * e;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in i + 1..n {
            let v = ((p[i * n + j] + p[j * n + i]) / norm).max(1e-12);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    p
}

/// Indices sorting rows lexicographically. Optimizing in this order makes
/// the result independent of input order up to the same permutation.
fn canonical_order(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
/// Returns one `output_dim` row per input row.
pub fn tsne(rows: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    cfg.validate(n)?;
    let order = canonical_order(rows);
    let mut sorted: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    if sorted[0].len() > cfg.pca_dims {
        sorted = pca_reduce(&sorted, cfg.pca_dims);
    }
    let dim = cfg.output_dim;
    let p = joint_probabilities(&sorted, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<f64> = (0..n * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1e-4 * z
        })
        .collect();
    let mut update = vec![0.0; n * dim];
    let mut gains = vec![1.0; n * dim];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; n * dim];
    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d2: f64 = (0..dim).map(|k| (y[i * dim + k] - y[j * dim + k]).powi(2)).sum();
                let v = 1.0 / (1.0 + d2);
                num[i * n + j] = v;
                num[j * n + i] = v;
                z += 2.0 * v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
                for k in 0..dim {
                    grad[i * dim + k] += coeff * (y[i * dim + k] - y[j * dim + k]);
                }
            }
        }
        for idx in 0..n * dim {
            let same_sign = (grad[idx] > 0.0) == (update[idx] > 0.0);
            gains[idx] = if same_sign { gains[idx] * 0.8 } else { gains[idx] + 0.2 };
            gains[idx] = f64::max(gains[idx], 0.01);
            update[idx] = momentum * update[idx] - cfg.learning_rate * gains[idx] * grad[idx];
            y[idx] += update[idx];
        }
        for k in 0..dim {
            let mean = (0..n).map(|i| y[i * dim + k]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * dim + k] -= mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE embedding".into()));
    }
    let mut out = vec![Vec::new(); n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = y[k * dim..(k + 1) * dim].to_vec();
    }
    Ok(out)
}

/// t-SNE of a feature matrix; see [`tsne`].
pub fn tsne_project(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<Vec<Vec<f64>>> {
    if features.is_empty() {
        return Err(Error::Empty("feature matrix".into()));
    }
    tsne(features.vectors(), cfg)
}

/// `x,y,category,path` rows for a 2-D embedding.
pub fn embedding_csv(embedding: &[Vec<f64>], features: &FeatureMatrix) -> String {
    let mut s = String::from("x,y,category,path\n");
    for ((e, c), p) in embedding.iter().zip(features.categories()).zip(features.paths()) {
        writeln!(s, "{},{},{},{}", e[0], e[1], c.slug(), p.display()).expect("string write");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneMeta {
    pub config: TsneConfig,
    pub num_points: usize,
    pub input_dim: usize,
    /// Dimension actually fed to t-SNE after optional PCA.
    pub tsne_input_dim: usize,
    pub pca_applied: bool,
    pub counts: Vec<(FeatureCategory, usize)>,
}

impl TsneMeta {
    pub fn new(features: &FeatureMatrix, cfg: &TsneConfig) -> Self {
        let d = features.dim();
        let pca_applied = d > cfg.pca_dims;
        Self {
            config: cfg.clone(),
            num_points: features.len(),
            input_dim: d,
            tsne_input_dim: if pca_applied { cfg.pca_dims.min(features.len()).min(d) } else { d },
            pca_applied,
            counts: FeatureCategory::ALL.iter().map(|&c| (c, features.count(c))).collect(),
        }
    }
}

pub fn write_embedding(path: &Path, embedding: &[Vec<f64>], features: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, embedding_csv(embedding, features)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_keeps_variance_order_and_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64;
                vec![3.0 * t, 0.5 * (t * 1.3).sin(), 1.0, -3.0 * t + 0.01 * (t * 7.0).cos()]
            })
            .collect();
        let a = pca_reduce(&rows, 2);
        assert_eq!(a, pca_reduce(&rows, 2));
        let var = |c: usize| a.iter().map(|r| r[c] * r[c]).sum::<f64>();
        assert!(var(0) > var(1));
        let wide: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().chain(r).copied().collect()).collect();
        let b = pca_reduce(&wide[..3], 2);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].len(), 2);
    }

    #[test]
    fn joint_probabilities_sum_to_one() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let p = joint_probabilities(&rows, 5.0);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn duplicate_rows_stay_finite() {
        let rows = vec![vec![1.0, 2.0]; 16];
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 50,
            ..Default::default()
        };
        let y = tsne(&rows, &cfg).unwrap();
        assert!(y.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_large_perplexity() {
        let rows = vec![vec![0.0]; 50];
        assert!(tsne(&rows, &TsneConfig::default()).is_err());
    }
}
