//! Python bindings. Tensors cross the boundary as `Tensor` objects built
//! from a shape and a flat row-major list of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lsla_core::accounting;
use lsla_core::attention as at;
use lsla_core::harness;
use lsla_core::model as md;
use lsla_core::numcore::rng::seeded;
use lsla_core::{verify as vf, LslaError};

fn err(e: LslaError) -> PyErr {
    let msg = e.to_string();
    match e {
        LslaError::IndexOutOfRange(_) => PyIndexError::new_err(msg),
        LslaError::Shape(_) | LslaError::Config(_) | LslaError::LabelOutOfRange { .. } | LslaError::ParamMismatch(_) => {
            PyValueError::new_err(msg)
        }
        LslaError::Io(_) | LslaError::MissingFile(_) | LslaError::Format { .. } | LslaError::Checksum { .. } => {
            PyOSError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for lsla_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

#[pyclass(name = "Tensor", module = "lsla", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(pub lsla_core::numcore::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self(lsla_core::numcore::Tensor::new(&shape, data).py()?))
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(lsla_core::numcore::Tensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "AttentionConfig", module = "lsla", from_py_object)]
#[derive(Clone)]
pub struct PyAttentionConfig(pub at::AttentionConfig);

#[pymethods]
impl PyAttentionConfig {
    /// Full LSLA: QXX with projection, dynamic scale, both biases.
    #[staticmethod]
    fn lsla(dim: usize, heads: usize, window: usize) -> Self {
        Self(at::AttentionConfig::lsla(dim, heads, window))
    }

    /// Fixed scale, no biases.
    #[staticmethod]
    fn plain(dim: usize, heads: usize, window: usize, variant: &str) -> PyResult<Self> {
        let v: at::Variant = variant.parse().py()?;
        Ok(Self(at::AttentionConfig::plain(dim, heads, window, v)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }
    #[getter]
    fn heads(&self) -> usize {
        self.0.heads
    }
    #[getter]
    fn window(&self) -> usize {
        self.0.window
    }
    #[getter]
    fn tokens(&self) -> usize {
        self.0.tokens()
    }
    #[getter]
    fn variant(&self) -> String {
        self.0.variant.to_string()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "AttentionParams", module = "lsla", from_py_object)]
#[derive(Clone)]
pub struct PyAttentionParams(pub at::AttentionParams);

#[pymethods]
impl PyAttentionParams {
    #[staticmethod]
    #[pyo3(signature = (config, seed=42))]
    fn init(config: &PyAttentionConfig, seed: u64) -> PyResult<Self> {
        Ok(Self(at::AttentionParams::init(&config.0, &mut seeded(seed)).py()?))
    }

    fn names(&self) -> Vec<String> {
        self.0.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn get(&self, name: &str) -> PyResult<PyTensor> {
        self.0
            .named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| PyTensor(t.clone()))
            .ok_or_else(|| PyIndexError::new_err(format!("no parameter `{name}`")))
    }

    fn set(&mut self, name: &str, value: &PyTensor) -> PyResult<()> {
        let slot = self
            .0
            .tensor_mut(name)
            .ok_or_else(|| PyIndexError::new_err(format!("no parameter `{name}`")))?;
        if slot.shape() != value.0.shape() {
            return Err(PyValueError::new_err(format!("`{name}` has shape {:?}", slot.shape())));
        }
        *slot = value.0.clone();
        Ok(())
    }
}

#[pyclass(name = "WindowMask", module = "lsla", from_py_object)]
#[derive(Clone)]
pub struct PyWindowMask(pub at::WindowMask);

#[pymethods]
impl PyWindowMask {
    #[getter]
    fn windows(&self) -> usize {
        self.0.windows()
    }

    fn is_excluded(&self, window: usize, query: usize, key: usize) -> bool {
        self.0.is_excluded(window, query, key)
    }
}

#[pyfunction]
fn build_shift_mask(h: usize, w: usize, window: usize, shift: usize) -> PyResult<PyWindowMask> {
    Ok(PyWindowMask(at::build_shift_mask(h, w, window, shift).py()?))
}

/// Attention over windows `x: [nw, N, d]`.
#[pyfunction]
#[pyo3(signature = (config, params, x, mask=None))]
fn attend(config: &PyAttentionConfig, params: &PyAttentionParams, x: &PyTensor, mask: Option<&PyWindowMask>) -> PyResult<PyTensor> {
    Ok(PyTensor(at::attend(&config.0, &params.0, &x.0, mask.map(|m| &m.0)).py()?))
}

/// `(output, weights before outer bias, weights after)`.
#[pyfunction]
#[pyo3(signature = (config, params, x, mask=None))]
fn attend_with_weights(
    config: &PyAttentionConfig,
    params: &PyAttentionParams,
    x: &PyTensor,
    mask: Option<&PyWindowMask>,
) -> PyResult<(PyTensor, PyTensor, PyTensor)> {
    let (o, a, b) = at::attend_with_weights(&config.0, &params.0, &x.0, mask.map(|m| &m.0)).py()?;
    Ok((PyTensor(o), PyTensor(a), PyTensor(b)))
}

#[pyfunction]
fn construct_equivalent_qbar(wq: &PyTensor, wk: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(at::construct_equivalent_qbar(&wq.0, &wk.0).py()?))
}

#[pyfunction]
fn fuse_vo(wv: &PyTensor, wo: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(at::fuse_vo(&wv.0, &wo.0).py()?))
}

#[pyclass(name = "ModelConfig", module = "lsla", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig(pub md::ModelConfig);

#[pymethods]
impl PyModelConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self(md::ModelConfig::preset(name).py()?))
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        md::PRESETS.to_vec()
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self(md::ModelConfig::from_text(text).py()?))
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }
    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    fn with_variant(&self, variant: &str, final_projection: bool) -> PyResult<Self> {
        let mut c = self.0.clone();
        c.attention.variant = variant.parse().py()?;
        c.attention.final_projection = final_projection;
        Ok(Self(c))
    }
}

#[pyclass(name = "Model", module = "lsla")]
pub struct PyModel(pub md::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=42))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self(md::Model::new(config.0.clone(), seed).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(md::load_checkpoint(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        md::save_checkpoint(&self.0, &path).py()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.0.config.clone())
    }

    fn num_params(&self) -> usize {
        self.0.params.total_numel()
    }

    /// Logits `[b, classes]` for images `[b, h, w, c]`.
    fn forward(&self, images: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.0.forward(&images.0).py()?))
    }

    fn predict(&self, images: &PyTensor) -> PyResult<Vec<usize>> {
        self.0.predict(&images.0).py()
    }

    /// Profile columns as a dict of lists.
    #[allow(clippy::too_many_arguments)]
    fn inspect<'py>(
        &self,
        py: Python<'py>,
        images: &PyTensor,
        stage: usize,
        block: usize,
        window: usize,
        query: usize,
        head: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let p = self.0.inspect(&images.0, stage, block, window, query, head).py()?;
        let d = PyDict::new(py);
        d.set_item("ds", p.ds)?;
        d.set_item("inner_bias", p.inner_bias)?;
        d.set_item("attn_pre", p.attn_pre)?;
        d.set_item("attn_post", p.attn_post)?;
        Ok(d)
    }
}

/// `{"rows": [(component, params, flops)], "total_params", "total_flops"}`.
#[pyfunction]
fn cost_report<'py>(py: Python<'py>, config: &PyModelConfig) -> PyResult<Bound<'py, PyDict>> {
    let r = accounting::cost_report(&config.0).py()?;
    let d = PyDict::new(py);
    let rows: Vec<(String, u64, u64)> = r.rows.into_iter().map(|r| (r.component, r.params, r.flops)).collect();
    d.set_item("rows", rows)?;
    d.set_item("total_params", r.total_params)?;
    d.set_item("total_flops", r.total_flops)?;
    Ok(d)
}

/// `(name, passed, detail)` for each property matching `filter`.
#[pyfunction]
#[pyo3(signature = (filter=None, seed=42))]
fn verify(py: Python<'_>, filter: Option<String>, seed: u64) -> Vec<(String, bool, String)> {
    let ctx = vf::Context {
        seed,
        hooks: vf::Hooks::default(),
    };
    py.detach(|| vf::run(filter.as_deref(), &ctx))
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

/// Writes `root/train` and `root/eval`; returns `(train, eval, centroid baseline)`.
#[pyfunction]
#[pyo3(signature = (root, classes=4, per_class=128, size=56, seed=42))]
fn synth_dataset(root: PathBuf, classes: usize, per_class: usize, size: usize, seed: u64) -> PyResult<(usize, usize, f64)> {
    let cfg = harness::SynthConfig::new(classes, per_class, size, seed);
    let (tr, ev) = harness::synth_dataset(&root, &cfg).py()?;
    Ok((tr.len(), ev.len(), harness::nearest_centroid_accuracy(&tr, &ev).py()?))
}

type LogTuple = (usize, f64, f64, f64);

/// Trains on `root/train`, evaluating on `root/eval` after each epoch.
/// Returns the model and the log as `(epoch, train_loss, eval_top1, lr)`.
#[pyfunction]
#[pyo3(signature = (config, root, epochs=30, seed=42, lr=None, batch_size=None))]
fn train(
    py: Python<'_>,
    config: &PyModelConfig,
    root: PathBuf,
    epochs: usize,
    seed: u64,
    lr: Option<f64>,
    batch_size: Option<usize>,
) -> PyResult<(PyModel, Vec<LogTuple>)> {
    let classes = Some(config.0.num_classes);
    let tr = harness::ingest_with_classes(root.join("train"), classes).py()?;
    let ev = harness::ingest_with_classes(root.join("eval"), classes).py()?;
    let d = harness::TrainConfig::with_epochs(epochs);
    let tc = harness::TrainConfig {
        seed,
        base_lr: lr.unwrap_or(d.base_lr),
        batch_size: batch_size.unwrap_or(d.batch_size),
        ..d
    };
    let cfg = config.0.clone();
    let out = py.detach(|| harness::train(&cfg, &tc, &tr, &ev)).py()?;
    let log = out.log.iter().map(|r| (r.epoch, r.train_loss, r.eval_top1, r.lr)).collect();
    Ok((PyModel(out.model), log))
}

#[pyfunction]
fn evaluate(model: &PyModel, root: PathBuf) -> PyResult<f64> {
    let data = harness::ingest(root).py()?;
    harness::evaluate(&model.0, &data).py()
}

#[pymodule]
fn lsla(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAttentionConfig>()?;
    m.add_class::<PyAttentionParams>()?;
    m.add_class::<PyWindowMask>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_shift_mask, m)?)?;
    m.add_function(wrap_pyfunction!(attend, m)?)?;
    m.add_function(wrap_pyfunction!(attend_with_weights, m)?)?;
    m.add_function(wrap_pyfunction!(construct_equivalent_qbar, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_vo, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
