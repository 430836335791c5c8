//! Python bindings for the defectdiff pipeline.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use defectdiff_core::classifier::{self, BackboneKind};
use defectdiff_core::config::PipelineConfig as CoreConfig;
use defectdiff_core::demo::{self, DemoCorpusSpec};
use defectdiff_core::feature_analysis::{self, TsneConfig};
use defectdiff_core::metrics::{self, Arm, EvalReport};
use defectdiff_core::schedule::{self, NoiseSchedule as CoreSchedule};
use defectdiff_core::{pipeline, Error, Tensor};

create_exception!(defectdiff, DefectDiffError, PyException);

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::ShapeMismatch { .. } | Error::TimestepOutOfRange { .. } | Error::Empty(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::MissingPrerequisite { .. } | Error::WeightsUnavailable { .. } => PyFileNotFoundError::new_err(e.to_string()),
        _ => DefectDiffError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => n.to_string().into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| DefectDiffError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_arm(s: &str) -> PyResult<Arm> {
    s.parse().map_err(to_py_err)
}

fn parse_backbone(s: &str) -> PyResult<BackboneKind> {
    s.parse().map_err(to_py_err)
}

/// Pipeline configuration. Construct with `desk()`, `full()`, `load(path)`
/// or `from_json(text)`.
#[pyclass(name = "PipelineConfig", from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[staticmethod]
    fn desk() -> Self {
        Self { inner: CoreConfig::desk() }
    }

    #[staticmethod]
    fn full() -> Self {
        Self { inner: CoreConfig::full() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(&path).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn output_root(&self) -> PathBuf {
        self.inner.paths.output_root.clone()
    }

    #[setter]
    fn set_output_root(&mut self, path: PathBuf) {
        self.inner.paths.output_root = path;
    }

    #[getter]
    fn weights_dir(&self) -> Option<PathBuf> {
        self.inner.paths.weights_dir.clone()
    }

    #[setter]
    fn set_weights_dir(&mut self, path: Option<PathBuf>) {
        self.inner.paths.weights_dir = path;
    }

    /// Points the real-image paths at `root/good` and `root/broken`.
    fn set_data_root(&mut self, root: PathBuf) {
        self.inner.paths.non_defective_dir = root.join(demo::NON_DEFECTIVE_DIR);
        self.inner.paths.defective_dir = root.join(demo::DEFECTIVE_DIR);
    }

    fn __repr__(&self) -> String {
        format!("PipelineConfig(hash={})", &self.inner.hash()[..12])
    }
}

/// Linear-beta noise schedule.
#[pyclass(name = "NoiseSchedule")]
struct PyNoiseSchedule {
    inner: CoreSchedule,
}

fn tensor_1d(values: Vec<f32>) -> Tensor {
    let n = values.len();
    Tensor::from_vec(vec![n], values).expect("1-d shape")
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (num_timesteps, beta_start = 1e-4, beta_end = 0.02))]
    fn new(num_timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self {
            inner: schedule::make_linear_schedule(num_timesteps, beta_start, beta_end).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn num_timesteps(&self) -> usize {
        self.inner.num_timesteps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Noised values `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
    fn forward_sample(&self, x0: Vec<f32>, t: usize, eps: Vec<f32>) -> PyResult<Vec<f32>> {
        let out = self.inner.forward_sample(&tensor_1d(x0), t, &tensor_1d(eps)).map_err(to_py_err)?;
        Ok(out.into_data())
    }

    /// One ancestral step; `z` is required for `t > 0`.
    #[pyo3(signature = (x_t, t, eps_hat, z = None))]
    fn reverse_step(&self, x_t: Vec<f32>, t: usize, eps_hat: Vec<f32>, z: Option<Vec<f32>>) -> PyResult<Vec<f32>> {
        let z = z.map(tensor_1d);
        let out = self
            .inner
            .reverse_step(&tensor_1d(x_t), t, &tensor_1d(eps_hat), z.as_ref())
            .map_err(to_py_err)?;
        Ok(out.into_data())
    }
}

/// `(w0, w1)` loss weights for the non-defective and defective classes.
#[pyfunction]
fn compute_class_weights(n_nondefective: usize, n_defective: usize) -> PyResult<(f64, f64)> {
    let w = classifier::compute_class_weights(n_nondefective, n_defective).map_err(to_py_err)?;
    Ok((w.w0, w.w1))
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    metrics::f1_score(precision, recall)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(to_py_err)
}

/// Confusion counts and the five metrics for scores at `threshold`.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.4, arm = "real", backbone = "resnet50v2"))]
fn evaluate_scores<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
    arm: &str,
    backbone: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let r = EvalReport::from_scores(parse_arm(arm)?, parse_backbone(backbone)?, &scores, &labels, threshold)
        .map_err(to_py_err)?;
    to_py(py, &r)
}

/// Exact t-SNE of `rows`, returning one `[x, y]` per row.
#[pyfunction]
#[pyo3(signature = (rows, perplexity = 30.0, iterations = 2000, seed = 42))]
fn tsne(py: Python<'_>, rows: Vec<Vec<f64>>, perplexity: f64, iterations: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let cfg = TsneConfig {
        perplexity,
        iterations,
        seed,
        ..TsneConfig::default()
    };
    py.detach(|| feature_analysis::tsne(&rows, &cfg)).map_err(to_py_err)
}

/// Writes a synthetic `good/` + `broken/` corpus under `out`.
#[pyfunction]
#[pyo3(signature = (out, good = 100, broken = 40, size = 64, seed = 0))]
fn make_demo_corpus(py: Python<'_>, out: PathBuf, good: usize, broken: usize, size: usize, seed: u64) -> PyResult<(PathBuf, PathBuf)> {
    let spec = DemoCorpusSpec {
        non_defective: good,
        defective: broken,
        size,
        seed,
    };
    py.detach(|| demo::write_demo_corpus(&out, &spec)).map_err(to_py_err)
}

/// Builds surrogate backbone weights; returns `(backbone, sha256)` pairs.
#[pyfunction]
fn init_weights(py: Python<'_>, config: &PyPipelineConfig) -> PyResult<Vec<(String, String)>> {
    let out = py.detach(|| pipeline::init_weights(&config.inner)).map_err(to_py_err)?;
    Ok(out.into_iter().map(|(k, _, sha)| (k.name().to_string(), sha)).collect())
}

#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn train_ddpm<'py>(py: Python<'py>, config: &PyPipelineConfig, resume: bool) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::cmd_train_ddpm(&config.inner, resume)).map_err(to_py_err)?;
    to_py(py, &out.meta)
}

/// Generates synthetic images; returns their paths.
#[pyfunction]
fn generate(py: Python<'_>, config: &PyPipelineConfig) -> PyResult<Vec<PathBuf>> {
    py.detach(|| pipeline::cmd_generate(&config.inner)).map_err(to_py_err)
}

#[pyfunction]
fn augment<'py>(py: Python<'py>, config: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::cmd_augment(&config.inner)).map_err(to_py_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn train_classifier<'py>(py: Python<'py>, config: &PyPipelineConfig, arm: &str, backbone: &str) -> PyResult<Bound<'py, PyAny>> {
    let (arm, kind) = (parse_arm(arm)?, parse_backbone(backbone)?);
    let out = py.detach(|| pipeline::cmd_train_classifier(&config.inner, arm, kind)).map_err(to_py_err)?;
    to_py(py, &out)
}

#[pyfunction]
#[pyo3(signature = (config, arm, backbone, threshold = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyPipelineConfig,
    arm: &str,
    backbone: &str,
    threshold: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let (arm, kind) = (parse_arm(arm)?, parse_backbone(backbone)?);
    let out = py.detach(|| pipeline::cmd_evaluate(&config.inner, arm, kind, threshold)).map_err(to_py_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn run_tsne<'py>(py: Python<'py>, config: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::cmd_tsne(&config.inner)).map_err(to_py_err)?;
    to_py(py, &out)
}

/// Runs the whole protocol and returns the report as a dict.
#[pyfunction]
fn report<'py>(py: Python<'py>, config: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| pipeline::cmd_report(&config.inner)).map_err(to_py_err)?;
    to_py(py, &out)
}

#[pymodule]
fn defectdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DefectDiffError", m.py().get_type::<DefectDiffError>())?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_function(wrap_pyfunction!(compute_class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(make_demo_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(train_ddpm, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(train_classifier, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_tsne, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
