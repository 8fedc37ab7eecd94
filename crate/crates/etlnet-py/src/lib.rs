//! Python bindings for the etlnet crate: tensors, the seeded generator,
//! model building and training, the synthetic trace generator, and the
//! preprocessing pipeline.
//!
//! Build with `cargo build -p etlnet-py --release` and import the produced
//! `libetlnet_py.so` as `etlnet_py` (see python/smoke_test.py).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use etlnet::dataio::{
    self, ColumnMap, Feature, NormScheme, Position, PrepareOptions, Side, SplitSpec, WindowOptions,
};
use etlnet::error::Error;
use etlnet::model::{self, ModelConfig, VariantName};
use etlnet::numcore::{self, Precision};
use etlnet::synth::SynthConfig;
use etlnet::train::{self, TrainConfig};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_precision(s: &str) -> PyResult<Precision> {
    s.parse().map_err(to_py_err)
}

/// Dense row-major tensor of f64 values.
#[pyclass(name = "Tensor", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: numcore::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, precision = "standard"))]
    fn new(shape: Vec<usize>, data: Vec<f64>, precision: &str) -> PyResult<Self> {
        let p = parse_precision(precision)?;
        Ok(PyTensor {
            inner: numcore::Tensor::from_data(&shape, data, p).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn precision(&self) -> String {
        self.inner.precision().to_string()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, precision={})",
            self.inner.shape(),
            self.inner.precision()
        )
    }
}

/// Matrix product of two 2-d tensors.
#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numcore::matmul(&a.inner, &b.inner).map_err(to_py_err)?,
    })
}

/// Seeded deterministic generator (identical seeds give identical streams).
#[pyclass(name = "Rng")]
struct PyRng {
    inner: numcore::Rng,
}

#[pymethods]
impl PyRng {
    #[new]
    fn new(seed: u64) -> Self {
        PyRng {
            inner: numcore::Rng::new(seed),
        }
    }

    fn next_f64(&mut self) -> f64 {
        self.inner.next_f64()
    }

    #[pyo3(signature = (shape, lo = 0.0, hi = 1.0, precision = "standard"))]
    fn uniform(&mut self, shape: Vec<usize>, lo: f64, hi: f64, precision: &str) -> PyResult<PyTensor> {
        let p = parse_precision(precision)?;
        Ok(PyTensor {
            inner: self
                .inner
                .uniform_tensor(&shape, lo, hi, p)
                .map_err(to_py_err)?,
        })
    }

    fn child(&self, index: u64) -> PyRng {
        PyRng {
            inner: self.inner.child(index),
        }
    }
}

/// Labeled fixed-length windows ready for training or evaluation.
#[pyclass(name = "WindowSet", skip_from_py_object)]
#[derive(Clone)]
struct PyWindowSet {
    inner: dataio::WindowSet,
}

#[pymethods]
impl PyWindowSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    /// `(positive, negative)` window counts.
    fn class_counts(&self) -> (usize, usize) {
        self.inner.class_counts()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_cache(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyWindowSet> {
        Ok(PyWindowSet {
            inner: dataio::WindowSet::load_cache(&path).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (pos, neg) = self.inner.class_counts();
        format!(
            "WindowSet(n={}, window={}, channels={}, pos={pos}, neg={neg})",
            self.inner.len(),
            self.inner.window,
            self.inner.channels()
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    variant: &str,
    window: usize,
    in_features: Option<usize>,
    tcn_filters: usize,
    kernel: usize,
    lstm_hidden: usize,
    dense_hidden: usize,
    dropout_rate: f64,
) -> PyResult<ModelConfig> {
    let v: VariantName = variant.parse().map_err(to_py_err)?;
    let mut cfg = ModelConfig::for_variant(v);
    cfg.window = window;
    if let Some(f) = in_features {
        cfg.in_features = f;
    }
    cfg.tcn_filters = tcn_filters;
    cfg.kernel = kernel;
    cfg.lstm_hidden = lstm_hidden;
    cfg.dense_hidden = dense_hidden;
    cfg.dropout_rate = dropout_rate;
    Ok(cfg)
}

/// An assembled network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "etlnet", window = 300, seed = 0, in_features = None,
                        tcn_filters = 64, kernel = 3, lstm_hidden = 128, dense_hidden = 64,
                        dropout_rate = 0.3, precision = "standard"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        window: usize,
        seed: u64,
        in_features: Option<usize>,
        tcn_filters: usize,
        kernel: usize,
        lstm_hidden: usize,
        dense_hidden: usize,
        dropout_rate: f64,
        precision: &str,
    ) -> PyResult<Self> {
        let cfg = build_config(
            variant,
            window,
            in_features,
            tcn_filters,
            kernel,
            lstm_hidden,
            dense_hidden,
            dropout_rate,
        )?;
        let p = parse_precision(precision)?;
        let mut rng = numcore::Rng::new(seed);
        Ok(PyModel {
            inner: model::build_model(&cfg, &mut rng, p).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant.to_string()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.config().window
    }

    #[getter]
    fn in_features(&self) -> usize {
        self.inner.config().in_features
    }

    /// `(trainable, total)` parameter counts.
    fn count_params(&self) -> (usize, usize) {
        self.inner.count_params()
    }

    /// Sigmoid probabilities for a `[batch, window, features]` tensor.
    fn predict(&self, x: &PyTensor) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .predict(&x.inner)
            .map_err(to_py_err)?
            .data()
            .to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: model::Model::load(&path).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (trainable, total) = self.inner.count_params();
        format!(
            "Model(variant={}, window={}, trainable={trainable}, total={total})",
            self.inner.config().variant,
            self.inner.config().window
        )
    }
}

/// The eight buildable variants as `(name, description)` pairs.
#[pyfunction]
fn variant_catalog() -> Vec<(String, String)> {
    model::variant_catalog()
        .into_iter()
        .map(|(v, desc, _)| (v.to_string(), desc.to_string()))
        .collect()
}

/// `(trainable, total)` parameter counts for a variant at default extents.
#[pyfunction]
#[pyo3(signature = (variant, window = 300))]
fn count_params(variant: &str, window: usize) -> PyResult<(usize, usize)> {
    let v: VariantName = variant.parse().map_err(to_py_err)?;
    let mut cfg = ModelConfig::for_variant(v);
    cfg.window = window;
    let m = model::build_model(&cfg, &mut numcore::Rng::new(0), Precision::Standard)
        .map_err(to_py_err)?;
    Ok(m.count_params())
}

/// Deterministic synthetic sensor trace in the canonical CSV format.
#[pyfunction]
#[pyo3(signature = (seed = 0, duration = 2000, bumps = 3, bump_len = 40,
                    bump_amplitude = 0.5, gyro_amplitude = 0.2, noise_std = 0.05,
                    base_speed = 10.0, trace_id = "synth0"))]
#[allow(clippy::too_many_arguments)]
fn generate_trace_csv(
    seed: u64,
    duration: usize,
    bumps: usize,
    bump_len: usize,
    bump_amplitude: f64,
    gyro_amplitude: f64,
    noise_std: f64,
    base_speed: f64,
    trace_id: &str,
) -> PyResult<String> {
    let cfg = SynthConfig {
        duration_samples: duration,
        bump_count: bumps,
        bump_len_samples: bump_len,
        bump_amplitude,
        gyro_amplitude,
        noise_std,
        base_speed,
        seed,
        trace_id: trace_id.to_string(),
        sample_period: 0.01,
    };
    let records = etlnet::synth::generate_trace(&cfg).map_err(to_py_err)?;
    let mut buf = Vec::new();
    dataio::write_csv(&records, &mut buf).map_err(to_py_err)?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Loads CSVs and runs the leakage-safe preprocessing chain, returning
/// `(train, validation)` window sets.
#[pyfunction]
#[pyo3(signature = (paths, window = 300, stride = None, theta = 0.15, scheme = "minmax",
                    position = "dashboard", side = "right", loo_index = 0, holdout = None,
                    no_gyro = false, seed = 0, precision = "standard"))]
#[allow(clippy::too_many_arguments)]
fn prepare_windows(
    paths: Vec<PathBuf>,
    window: usize,
    stride: Option<usize>,
    theta: f64,
    scheme: &str,
    position: &str,
    side: &str,
    loo_index: usize,
    holdout: Option<Vec<String>>,
    no_gyro: bool,
    seed: u64,
    precision: &str,
) -> PyResult<(PyWindowSet, PyWindowSet)> {
    let position: Position = position.parse().map_err(to_py_err)?;
    let side: Side = side.parse().map_err(to_py_err)?;
    let scheme: NormScheme = scheme.parse().map_err(to_py_err)?;
    let p = parse_precision(precision)?;
    let map = ColumnMap::identity();
    let mut records = Vec::new();
    for path in &paths {
        records.extend(dataio::load_csv(path, position, side, &map).map_err(to_py_err)?);
    }
    let split = match holdout {
        Some(val_traces) => SplitSpec::Holdout { val_traces },
        None => SplitSpec::LeaveOneOut { index: loo_index },
    };
    let opts = PrepareOptions {
        scheme,
        window: WindowOptions {
            window,
            stride: stride.unwrap_or((window / 2).max(1)),
            threshold: theta,
            features: if no_gyro {
                Feature::NO_GYRO.to_vec()
            } else {
                Feature::ALL.to_vec()
            },
        },
        precision: p,
    };
    let out =
        dataio::split(&records, &split, &opts, &mut numcore::Rng::new(seed)).map_err(to_py_err)?;
    Ok((
        PyWindowSet { inner: out.train },
        PyWindowSet { inner: out.val },
    ))
}

/// Trains in place and returns the per-epoch history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (model, train_ws, val_ws, epochs = 10, learning_rate = 1e-3,
                    batch_size = 64, seed = 0, threshold = 0.5))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    model: &mut PyModel,
    train_ws: &PyWindowSet,
    val_ws: &PyWindowSet,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    threshold: f64,
) -> PyResult<Vec<Py<PyDict>>> {
    let cfg = TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        seed,
        threshold,
        ..TrainConfig::default()
    };
    let history =
        train::train(&mut model.inner, &train_ws.inner, &val_ws.inner, &cfg).map_err(to_py_err)?;
    let mut rows = Vec::with_capacity(history.epochs.len());
    for e in &history.epochs {
        let d = PyDict::new(py);
        d.set_item("epoch", e.epoch)?;
        d.set_item("train_loss", e.train_loss)?;
        d.set_item("val_accuracy", e.val.accuracy)?;
        d.set_item("val_precision", e.val.precision)?;
        d.set_item("val_recall", e.val.recall)?;
        d.set_item("val_f1", e.val.f1)?;
        rows.push(d.into());
    }
    Ok(rows)
}

/// Eval-mode metrics for a model on a window set.
#[pyfunction]
#[pyo3(signature = (model, ws, threshold = 0.5))]
fn evaluate_model(
    py: Python<'_>,
    model: &PyModel,
    ws: &PyWindowSet,
    threshold: f64,
) -> PyResult<Py<PyDict>> {
    let m = train::evaluate(&model.inner, &ws.inner, threshold).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    d.set_item("tp", m.confusion.tp)?;
    d.set_item("fp", m.confusion.fp)?;
    d.set_item("tn", m.confusion.tn)?;
    d.set_item("fn", m.confusion.fn_)?;
    d.set_item("threshold", m.threshold)?;
    Ok(d.into())
}

/// Runs the library's self-test suite; returns `(name, passed)` pairs.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify(seed: u64) -> PyResult<Vec<(String, bool)>> {
    Ok(etlnet::verify::run_all(seed)
        .map_err(to_py_err)?
        .into_iter()
        .map(|c| (c.name, c.passed))
        .collect())
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn etlnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRng>()?;
    m.add_class::<PyWindowSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(variant_catalog, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace_csv, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_windows, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
