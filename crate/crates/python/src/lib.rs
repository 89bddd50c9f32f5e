//! Python bindings: `import re_tagger`.
//!
//! Class scores and metrics come back as plain dicts keyed by label name.
//! Errors map to `OSError` (files), `ValueError` (bad input or data) and
//! `RuntimeError` (numerical failures).

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use re_tagger_core::candle_core::{DType, Device, Tensor};
use re_tagger_core::model::InputShape;
use re_tagger_core::{
    self as core, ArchitectureConfig, BackboneKind, ClassLabel, ClassMetrics, DatasetManifest, ExampleSet, ModelBundle,
    ModelHandle, OnUnreadable, PredictionScores, PreprocessConfig, SplitSpec, TrainingConfig,
};

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn label(name: &str) -> PyResult<ClassLabel> {
    name.parse().map_err(|e: core::label::UnknownLabel| PyValueError::new_err(e.to_string()))
}

fn labels(names: &[String]) -> PyResult<Vec<ClassLabel>> {
    names.iter().map(|n| label(n)).collect()
}

fn scores_dict(s: &PredictionScores) -> BTreeMap<&'static str, f32> {
    s.iter().map(|(c, p)| (c.name(), p)).collect()
}

fn metrics_dict(m: ClassMetrics) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("precision", m.precision), ("recall", m.recall), ("f1", m.f1)])
}

fn report_dict<'py>(py: Python<'py>, r: &core::EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let per_class: BTreeMap<_, _> = r.per_class.iter().map(|(c, m)| (c.name(), metrics_dict(*m))).collect();
    d.set_item("per_class", per_class)?;
    d.set_item("macro_avg", metrics_dict(r.macro_avg))?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("samples", r.samples)?;
    // Rows are true classes, columns predictions.
    d.set_item("confusion", r.confusion.counts.map(|row| row.to_vec()).to_vec())?;
    let skipped: Vec<String> = r.skipped.iter().map(|p| p.display().to_string()).collect();
    d.set_item("skipped", skipped)?;
    Ok(d)
}

/// Canonical label names in class-index order.
#[pyfunction]
fn class_names() -> Vec<&'static str> {
    ClassLabel::names().to_vec()
}

/// Canonical label for a raw annotation tag; unknown tags map to `others`.
#[pyfunction]
fn map_raw_tag(raw: &str) -> &'static str {
    core::map_raw_tag(raw).name()
}

/// A labeled image list read from a `path,raw_tag` CSV.
#[pyclass(name = "Manifest", module = "re_tagger", frozen)]
struct PyManifest(DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        core::load_manifest(path).map(PyManifest).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::write_manifest(&self.0, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Record count per class name.
    fn counts(&self) -> BTreeMap<&'static str, usize> {
        self.0.counts().iter().map(|(c, n)| (c.name(), n)).collect()
    }

    /// `(path, raw_tag, label)` tuples in manifest order.
    fn records(&self) -> Vec<(String, String, &'static str)> {
        self.0
            .records()
            .iter()
            .map(|r| (r.path.display().to_string(), r.raw_tag.clone(), r.label.name()))
            .collect()
    }

    /// Every class cut down to the size of the smallest one.
    fn undersample(&self, seed: u64) -> PyResult<Self> {
        core::undersample(&self.0, seed).map(PyManifest).map_err(to_py)
    }

    /// Stratified `(train, validation)` split with `numerator/denominator`
    /// of each class in train.
    #[pyo3(signature = (numerator = 9, denominator = 10, seed = 0))]
    fn split(&self, numerator: u64, denominator: u64, seed: u64) -> PyResult<(Self, Self)> {
        let spec = SplitSpec::new(numerator, denominator, seed).map_err(to_py)?;
        let (a, b) = core::split(&self.0, &spec).map_err(to_py)?;
        Ok((PyManifest(a), PyManifest(b)))
    }

    fn __repr__(&self) -> String {
        format!("Manifest({} records: {})", self.0.len(), self.0.counts())
    }
}

/// A trained model plus its preprocessing, loaded from or saved to a
/// bundle directory.
#[pyclass(name = "Bundle", module = "re_tagger", frozen)]
struct PyBundle(ModelBundle);

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        py.detach(|| core::load_bundle(path)).map(PyBundle).map_err(to_py)
    }

    fn save(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| self.0.save(path)).map_err(to_py)
    }

    #[getter]
    fn version(&self) -> &str {
        self.0.version()
    }

    #[getter]
    fn identifier(&self) -> String {
        self.0.identifier()
    }

    /// Class probabilities for encoded image bytes (PNG or JPEG).
    fn predict(&self, py: Python<'_>, image: &[u8]) -> PyResult<BTreeMap<&'static str, f32>> {
        let scores = py.detach(|| self.0.predict(image)).map_err(to_py)?;
        Ok(scores_dict(&scores))
    }

    /// Class probabilities for an image file.
    fn predict_file(&self, py: Python<'_>, path: PathBuf) -> PyResult<BTreeMap<&'static str, f32>> {
        let bytes = std::fs::read(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
        self.predict(py, &bytes)
    }

    /// Most likely label for encoded image bytes.
    fn top_label(&self, py: Python<'_>, image: &[u8]) -> PyResult<&'static str> {
        let scores = py.detach(|| self.0.predict(image)).map_err(to_py)?;
        Ok(core::top_label(&scores).name())
    }

    /// Per-class precision, recall and F1 on a labeled manifest.
    #[pyo3(signature = (manifest, skip_unreadable = false))]
    fn evaluate<'py>(&self, py: Python<'py>, manifest: &PyManifest, skip_unreadable: bool) -> PyResult<Bound<'py, PyDict>> {
        let policy = if skip_unreadable {
            OnUnreadable::Skip
        } else {
            OnUnreadable::Abort
        };
        let report = py.detach(|| core::evaluate(&self.0, &manifest.0, policy)).map_err(to_py)?;
        report_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Bundle({})", self.0.identifier())
    }
}

/// Trains a fresh model in two stages (head only, then everything) and
/// returns the bundle with one dict per epoch.
#[pyfunction]
#[pyo3(signature = (
    train, validation, *, backbone = "inception_v3", input_size = 299, head_width = 1024,
    epochs_stage1 = 50, epochs_stage2 = 50, batch_size = 64, learning_rate = 1e-4, seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn train_model<'py>(
    py: Python<'py>,
    train: &PyManifest,
    validation: &PyManifest,
    backbone: &str,
    input_size: usize,
    head_width: usize,
    epochs_stage1: usize,
    epochs_stage2: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(PyBundle, Vec<Bound<'py, PyDict>>)> {
    let backbone: BackboneKind = backbone.parse().map_err(to_py)?;
    let architecture = ArchitectureConfig {
        backbone,
        input_shape: InputShape {
            height: input_size,
            width: input_size,
            channels: 3,
        },
        head_width,
        seed,
        ..Default::default()
    };
    let training = TrainingConfig {
        learning_rate,
        batch_size,
        epochs_stage1,
        epochs_stage2,
        seed,
        ..Default::default()
    };
    let (bundle, report) = py
        .detach(|| -> core::Result<_> {
            architecture.validate()?;
            let preprocess = PreprocessConfig::for_input(architecture.input_shape);
            let mut model = ModelHandle::build(&architecture, DType::F32)?;
            let report = core::run_two_stage(
                &mut model,
                &ExampleSet::from_manifest(&train.0, preprocess.clone()),
                &ExampleSet::from_manifest(&validation.0, preprocess.clone()),
                &training,
            )?;
            Ok((ModelBundle::new(model, preprocess, Some(training.clone()))?, report))
        })
        .map_err(to_py)?;
    let epochs = report
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("stage", e.stage.to_string())?;
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("train_accuracy", e.train_accuracy)?;
            d.set_item("validation_loss", e.validation_loss)?;
            d.set_item("validation_accuracy", e.validation_accuracy)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((PyBundle(bundle), epochs))
}

/// Precision, recall and F1 per class plus macro averages and accuracy,
/// from parallel lists of predicted and true label names.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, predictions: Vec<String>, truths: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let cm = core::confusion(&labels(&predictions)?, &labels(&truths)?).map_err(to_py)?;
    report_dict(py, &core::per_class_metrics(&cm))
}

/// Mean categorical cross-entropy of rows of class probabilities against
/// target label names.
#[pyfunction]
fn cross_entropy(probs: Vec<Vec<f64>>, targets: Vec<String>) -> PyResult<f64> {
    let rows = probs.len();
    let flat: Vec<f64> = probs.into_iter().flatten().collect();
    if flat.len() != rows * core::NUM_CLASSES {
        return Err(PyValueError::new_err(format!("each row needs {} probabilities", core::NUM_CLASSES)));
    }
    let t = Tensor::from_vec(flat, (rows, core::NUM_CLASSES), &Device::Cpu).map_err(|e| to_py(e.into()))?;
    let loss = core::categorical_cross_entropy(&t, &labels(&targets)?).map_err(to_py)?;
    loss.to_scalar::<f64>().map_err(|e| to_py(e.into()))
}

/// One RMSProp update; returns `(new_param, new_state)`.
#[pyfunction]
#[pyo3(signature = (param, grad, state, learning_rate = 1e-4, rho = 0.9, epsilon = 1e-7))]
fn rmsprop_step(
    param: Vec<f64>,
    grad: Vec<f64>,
    state: Vec<f64>,
    learning_rate: f64,
    rho: f64,
    epsilon: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if grad.len() != param.len() || state.len() != param.len() {
        return Err(PyValueError::new_err("param, grad and state must have the same length"));
    }
    let config = TrainingConfig {
        learning_rate,
        rho,
        epsilon,
        ..Default::default()
    };
    config.validate().map_err(to_py)?;
    let tensor = |v: Vec<f64>| Tensor::new(v, &Device::Cpu).map_err(|e| to_py(e.into()));
    let (p, s) = core::rmsprop_step(&tensor(param)?, &tensor(grad)?, &tensor(state)?, &config).map_err(to_py)?;
    let back = |t: Tensor| t.to_vec1::<f64>().map_err(|e| to_py(e.into()));
    Ok((back(p)?, back(s)?))
}

/// Writes a generated six-class image set plus `manifest.csv` under `out`.
#[pyfunction]
#[pyo3(signature = (out, counts, seed = 0))]
fn synthesize(py: Python<'_>, out: PathBuf, counts: [usize; core::NUM_CLASSES], seed: u64) -> PyResult<PyManifest> {
    py.detach(|| core::synthetic::write_dataset(out, counts, seed))
        .map(|(_, m)| PyManifest(m))
        .map_err(to_py)
}

#[pymodule]
pub fn re_tagger(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BUNDLE_VERSION", core::BUNDLE_VERSION)?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(map_raw_tag, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(rmsprop_step, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
