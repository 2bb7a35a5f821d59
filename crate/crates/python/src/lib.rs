//! Python bindings for `docmsu-core`.
//!
//! Structured values (records, predictions, metric reports, training
//! histories) cross the boundary as plain dicts and lists by way of JSON.

use std::path::{Path, PathBuf};

use candle_core::Device;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use docmsu_core::annotation;
use docmsu_core::data::{self, AnnotationSet, BoundingBox, DatasetRecord, LoadOptions, TokenSpan};
use docmsu_core::metrics::{self, EmOptions, ScoredBox, TokenPredictionSet};
use docmsu_core::model::eval::{self, EvalOptions};
use docmsu_core::model::train::{self, Task, TrainConfig};
use docmsu_core::model::{checkpoint, FusionModel, ModelConfig, Preset, PredictionBundle};
use docmsu_core::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) | Error::MissingImage { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Malformed { .. }
        | Error::Validation { .. }
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::DocumentTooLong { .. }
        | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for docmsu_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Serializes through JSON into native Python objects.
fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(obj.py(), "json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn span(s: (usize, usize)) -> PyResult<TokenSpan> {
    TokenSpan::new(s.0, s.1).py()
}

fn bbox(b: (f64, f64, f64, f64)) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3).py()
}

/// Textual IoU of two `(start, end)` spans with exclusive ends; negative
/// when they are disjoint.
#[pyfunction]
fn text_iou(a: (usize, usize), b: (usize, usize)) -> PyResult<f64> {
    Ok(annotation::text_iou(&span(a)?, &span(b)?))
}

/// Area IoU of two `(x, y, w, h)` boxes.
#[pyfunction]
fn visual_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(annotation::visual_iou(&bbox(a)?, &bbox(b)?))
}

/// Scores three annotations of one sample. Each annotation is a dict with
/// `annotator_id`, `spans` (list of `[start, end]`) and `boxes` (list of
/// `[x, y, w, h]`).
#[pyfunction]
fn confidence_scores(py: Python<'_>, annotations: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    let sets: Vec<AnnotationSet> = from_py(annotations)?;
    to_py(py, &annotation::confidence_scores(&sets).py()?)
}

/// Indices of the `ceil(fraction * N)` lowest confidences (ties by index).
#[pyfunction]
#[pyo3(signature = (confidences, fraction=0.05))]
fn challenging(confidences: Vec<f64>, fraction: f64) -> PyResult<Vec<usize>> {
    let width = confidences.len().to_string().len();
    let mut reports: Vec<annotation::ConfidenceReport> = confidences
        .iter()
        .enumerate()
        .map(|(i, &c)| annotation::ConfidenceReport {
            id: format!("{i:0width$}"),
            per_annotator: Default::default(),
            best: String::new(),
            sample_confidence: c,
            challenging: false,
        })
        .collect();
    annotation::flag_challenging(&mut reports, fraction).py()?;
    Ok(reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.challenging)
        .map(|(i, _)| i)
        .collect())
}

/// EM, EM50, EM70 and BitError over `(predicted, gold, n_tokens)` triples
/// of token index lists.
#[pyfunction]
#[pyo3(signature = (samples, strict_inequality=false, count_empty_predictions=false))]
fn text_localization(
    py: Python<'_>,
    samples: Vec<(Vec<usize>, Vec<usize>, usize)>,
    strict_inequality: bool,
    count_empty_predictions: bool,
) -> PyResult<PyObject> {
    let pairs = samples
        .into_iter()
        .map(|(p, g, n)| Ok((TokenPredictionSet::new(p, n).py()?, TokenPredictionSet::new(g, n).py()?)))
        .collect::<PyResult<Vec<_>>>()?;
    let opts = EmOptions {
        strict_inequality,
        count_empty_predictions,
    };
    to_py(py, &metrics::text_localization(&pairs, opts).py()?)
}

/// AP over a corpus: per sample, predicted `(x, y, w, h, score)` tuples and
/// gold `(x, y, w, h)` tuples.
#[pyfunction]
#[pyo3(signature = (predictions, gold, iou_threshold=0.5))]
fn average_precision(
    predictions: Vec<Vec<(f64, f64, f64, f64, f64)>>,
    gold: Vec<Vec<(f64, f64, f64, f64)>>,
    iou_threshold: f64,
) -> PyResult<f64> {
    let preds = predictions
        .into_iter()
        .map(|ps| {
            ps.into_iter()
                .map(|(x, y, w, h, score)| {
                    Ok(ScoredBox {
                        bbox: bbox((x, y, w, h))?,
                        score,
                    })
                })
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let gold = gold
        .into_iter()
        .map(|gs| gs.into_iter().map(bbox).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    metrics::average_precision(&preds, &gold, iou_threshold).py()
}

/// Accuracy, precision and F1 of sarcasm probabilities at `cutoff`.
#[pyfunction]
#[pyo3(signature = (probs, labels, cutoff=0.5))]
fn detection_metrics(py: Python<'_>, probs: Vec<f64>, labels: Vec<bool>, cutoff: f64) -> PyResult<PyObject> {
    to_py(py, &metrics::detection_metrics(&probs, &labels, cutoff).py()?)
}

/// Writes a synthetic dataset (`data.jsonl` plus images) to `out_dir` and
/// returns the path of the JSONL file.
#[pyfunction]
#[pyo3(signature = (out_dir, n=90, seed=0, image_size=224))]
fn gen_fixtures(out_dir: PathBuf, n: usize, seed: u64, image_size: u32) -> PyResult<PathBuf> {
    data::gen_fixtures(n, seed, image_size).write_to(&out_dir).py()?;
    Ok(out_dir.join("data.jsonl"))
}

fn read_records(path: &Path, image_root: Option<PathBuf>, max_tokens: Option<usize>) -> PyResult<Vec<DatasetRecord>> {
    let opts = LoadOptions {
        image_root,
        strict_images: false,
        max_tokens,
    };
    data::load_dataset(path, &opts).py()
}

/// Validated records of a JSONL dataset as dicts.
#[pyfunction]
#[pyo3(signature = (path, image_root=None))]
fn load_dataset(py: Python<'_>, path: PathBuf, image_root: Option<PathBuf>) -> PyResult<Vec<PyObject>> {
    read_records(&path, image_root, None)?
        .iter()
        .map(|r| {
            let line = r.to_json_line().py()?;
            Ok(PyModule::import(py, "json")?.call_method1("loads", (line,))?.unbind())
        })
        .collect()
}

/// Scores prediction dicts (`id`, `sarcasm_prob`, `token_probs`, `boxes`)
/// against a gold JSONL dataset.
#[pyfunction]
fn evaluate(py: Python<'_>, predictions: &Bound<'_, PyAny>, gold_path: PathBuf) -> PyResult<PyObject> {
    let preds: Vec<PredictionBundle> = from_py(predictions)?;
    let gold = read_records(&gold_path, None, None)?;
    to_py(py, &eval::evaluate(&preds, &gold, &EvalOptions::default()).py()?)
}

fn parse_preset(name: &str) -> PyResult<Preset> {
    serde_json::from_value(serde_json::Value::String(name.to_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown preset {name:?}; expected tiny, small, base or test")))
}

/// The fusion model: text and image encoders, shifted-window backbone and
/// the detection, token and box heads.
#[pyclass(module = "docmsu")]
struct Model {
    inner: FusionModel,
}

impl Model {
    fn samples(&self, path: &Path, image_root: Option<PathBuf>) -> PyResult<Vec<train::Sample>> {
        let cfg = self.inner.config();
        let root = image_root
            .clone()
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        let records = read_records(path, image_root, Some(cfg.max_tokens()))?;
        let backend = cfg.text_backend.build(cfg.dtype(), &Device::Cpu).py()?;
        train::prepare_samples(&records, &root, backend.as_ref(), cfg, &Device::Cpu).py()
    }
}

#[pymethods]
impl Model {
    /// A freshly initialized model. `config` is an optional dict of model
    /// settings applied over the preset.
    #[new]
    #[pyo3(signature = (preset="test", seed=0, config=None))]
    fn new(preset: &str, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let mut base = serde_json::to_value(ModelConfig::from_preset(parse_preset(preset)?))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        if let Some(c) = config {
            let patch: serde_json::Map<String, serde_json::Value> = from_py(c)?;
            for (k, v) in patch {
                base[k] = v;
            }
        }
        let mut cfg: ModelConfig = serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.seed = seed;
        let backend = cfg.text_backend.build(cfg.dtype(), &Device::Cpu).py()?;
        let inner = FusionModel::new(&cfg, backend.width(), &Device::Cpu).py()?;
        Ok(Self { inner })
    }

    /// Rebuilds a model from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path, &Device::Cpu).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Trains on every record of a JSONL dataset and returns the history.
    #[pyo3(signature = (data, image_root=None, task="detect", epochs=20, batch_size=16, lr=None, max_steps=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        py: Python<'_>,
        data: PathBuf,
        image_root: Option<PathBuf>,
        task: &str,
        epochs: usize,
        batch_size: usize,
        lr: Option<f64>,
        max_steps: Option<usize>,
        seed: u64,
    ) -> PyResult<PyObject> {
        let task = match task {
            "detect" => Task::Detect,
            "localize" => Task::Localize,
            other => return Err(PyValueError::new_err(format!("unknown task {other:?}"))),
        };
        let samples = self.samples(&data, image_root)?;
        let cfg = TrainConfig {
            task,
            lr,
            epochs,
            batch_size,
            max_steps,
            seed,
            ..TrainConfig::default()
        };
        let history = py.allow_threads(|| train::train(&self.inner, &samples, None, &cfg)).py()?;
        to_py(py, &history)
    }

    /// Prediction dicts for every record of a JSONL dataset.
    #[pyo3(signature = (data, image_root=None, batch_size=16, box_threshold=0.5))]
    fn predict(
        &self,
        py: Python<'_>,
        data: PathBuf,
        image_root: Option<PathBuf>,
        batch_size: usize,
        box_threshold: f64,
    ) -> PyResult<PyObject> {
        let samples = self.samples(&data, image_root)?;
        let preds = py
            .allow_threads(|| train::predict(&self.inner, &samples, batch_size, box_threshold))
            .py()?;
        to_py(py, &preds)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(preset={:?}, image_size={}, side={}, width={}, parameters={})",
            c.preset,
            c.image_size,
            c.side,
            c.width,
            self.inner.parameter_count()
        )
    }
}

#[pymodule]
fn docmsu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(text_iou, m)?)?;
    m.add_function(wrap_pyfunction!(visual_iou, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_scores, m)?)?;
    m.add_function(wrap_pyfunction!(challenging, m)?)?;
    m.add_function(wrap_pyfunction!(text_localization, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(detection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
