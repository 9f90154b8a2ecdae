//! Python bindings. Structured results (decisions, reports, metrics) are
//! returned as plain dicts and lists.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use dialect_id::cnn;
use dialect_id::corpus::synth::{generate_synthetic_corpus, SynthSpec};
use dialect_id::corpus::wav;
use dialect_id::did::{self, SystemKind};
use dialect_id::featext::{extract_features, FeatureMatrix, MfccExtractor};
use dialect_id::pipeline::{self, LoadedSystems};
use dialect_id::{Error, Membership};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.exit_code() == 3 => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_system(name: &str) -> PyResult<SystemKind> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown system `{name}`")))
}

/// Run configuration, read from TOML.
#[pyclass(name = "RunConfig", module = "dialect_id", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: pipeline::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses `toml`; the defaults when omitted.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => pipeline::RunConfig::from_toml(t).map_err(to_py_err)?,
            None => pipeline::RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    /// Loads a config file, resolving relative paths against its directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: pipeline::RunConfig::load(path).map_err(to_py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn systems(&self) -> Vec<String> {
        self.inner.systems.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn models_dir(&self) -> PathBuf {
        self.inner.paths.models_dir.clone()
    }

    #[setter]
    fn set_models_dir(&mut self, dir: PathBuf) {
        self.inner.paths.models_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(systems={:?}, digest={})", self.systems(), &self.digest()[..12])
    }
}

/// One trained system loaded from a model directory.
#[pyclass(name = "Identifier", module = "dialect_id")]
struct PyIdentifier {
    systems: LoadedSystems,
    system: SystemKind,
    config: pipeline::RunConfig,
}

impl PyIdentifier {
    fn decide<'py>(&self, py: Python<'py>, feat: &FeatureMatrix) -> PyResult<Bound<'py, PyAny>> {
        let d = self
            .systems
            .identify(self.system, feat, &self.config.decode)
            .map_err(to_py_err)?;
        to_py(py, &d)
    }
}

#[pymethods]
impl PyIdentifier {
    #[new]
    #[pyo3(signature = (models_dir, system, config=None))]
    fn new(models_dir: PathBuf, system: &str, config: Option<PyRunConfig>) -> PyResult<Self> {
        let system = parse_system(system)?;
        let config = config.map(|c| c.inner).unwrap_or_default();
        let systems = LoadedSystems::load(&models_dir, &[system]).map_err(to_py_err)?;
        Ok(PyIdentifier {
            systems,
            system,
            config,
        })
    }

    #[getter]
    fn system(&self) -> String {
        self.system.to_string()
    }

    /// Decision for one WAV file.
    fn identify_wav<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let feat = features_of(&path, &self.config).map_err(to_py_err)?;
        self.decide(py, &feat)
    }

    /// Decision for a feature matrix given as a list of frames.
    #[pyo3(signature = (frames, frame_shift=0.01))]
    fn identify_features<'py>(&self, py: Python<'py>, frames: Vec<Vec<f64>>, frame_shift: f64) -> PyResult<Bound<'py, PyAny>> {
        let feat = FeatureMatrix::from_rows(&frames, frame_shift, "python").map_err(to_py_err)?;
        self.decide(py, &feat)
    }
}

fn features_of(path: &Path, cfg: &pipeline::RunConfig) -> dialect_id::Result<FeatureMatrix> {
    let audio = wav::read_wav(path)?;
    let ex = MfccExtractor::new(&cfg.frontend.mfcc, audio.sample_rate())?;
    extract_features(&ex, &audio, &cfg.frontend, &path.display().to_string())
}

/// Writes a synthetic corpus to `out_dir`; returns the utterance count.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, spec_toml=None))]
fn synthesize(out_dir: PathBuf, seed: u64, spec_toml: Option<&str>) -> PyResult<usize> {
    let spec = match spec_toml {
        Some(t) => SynthSpec::from_toml(t).map_err(to_py_err)?,
        None => SynthSpec::default(),
    };
    let corpus = generate_synthetic_corpus(&spec, seed).map_err(to_py_err)?;
    corpus.write(&out_dir).map_err(to_py_err)?;
    Ok(corpus.records.len())
}

/// MFCC + delta + delta-delta features of a WAV file, one list per frame.
#[pyfunction]
#[pyo3(signature = (path, config=None))]
fn wav_features(path: PathBuf, config: Option<PyRunConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let feat = features_of(&path, &cfg).map_err(to_py_err)?;
    Ok((0..feat.rows()).map(|t| feat.view().row(t).to_vec()).collect())
}

/// Bias count over word memberships ("LT", "CT", "BOTH", or None for a
/// word outside every lexicon).
#[pyfunction]
#[pyo3(signature = (memberships, exclude_common=true))]
fn compute_bias<'py>(py: Python<'py>, memberships: Vec<Option<String>>, exclude_common: bool) -> PyResult<Bound<'py, PyAny>> {
    let parsed = memberships
        .iter()
        .map(|m| match m.as_deref() {
            None => Ok(None),
            Some("LT") => Ok(Some(Membership::Lt)),
            Some("CT") => Ok(Some(Membership::Ct)),
            Some("BOTH") => Ok(Some(Membership::Both)),
            Some(other) => Err(PyValueError::new_err(format!("unknown membership `{other}`"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &did::bias_from_memberships(parsed, exclude_common))
}

/// Input and per-layer output shapes of the reference CNN, dropout
/// layers included.
#[pyfunction]
fn cnn_shape_chain() -> Vec<(usize, usize)> {
    cnn::build_reference_cnn().shape_chain()
}

#[pyfunction]
fn systems() -> Vec<String> {
    SystemKind::ALL.iter().map(|s| s.to_string()).collect()
}

/// Splits, extracts and trains as the `train` command does; returns the
/// train report.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| pipeline::train_from_config(&config.inner))
        .map_err(to_py_err)?;
    to_py(py, &report)
}

/// Decisions of one system over a manifest, as the `identify` command
/// writes them.
#[pyfunction]
fn identify_manifest<'py>(py: Python<'py>, config: &PyRunConfig, system: &str, manifest: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let system = parse_system(system)?;
    let file = py
        .detach(|| pipeline::identify_manifest(&config.inner, system, &manifest))
        .map_err(to_py_err)?;
    to_py(py, &file)
}

/// Accuracy and confusion of a decisions file against manifest labels.
#[pyfunction]
fn score<'py>(py: Python<'py>, decisions: PathBuf, manifest: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let file = pipeline::DecisionsFile::load(&decisions).map_err(to_py_err)?;
    let truth = dialect_id::corpus::load_manifest(&manifest).map_err(to_py_err)?;
    let metrics = pipeline::score_decisions(&file.decisions, &truth).map_err(to_py_err)?;
    to_py(py, &metrics)
}

#[pymodule(name = "dialect_id")]
fn dialect_id_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", dialect_id::VERSION)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyIdentifier>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(wav_features, m)?)?;
    m.add_function(wrap_pyfunction!(compute_bias, m)?)?;
    m.add_function(wrap_pyfunction!(cnn_shape_chain, m)?)?;
    m.add_function(wrap_pyfunction!(systems, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(identify_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
