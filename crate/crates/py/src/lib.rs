//! Python bindings: tensors, attention specs, encoders, task generators,
//! format parsers, span metrics and the benchmark suite.

use std::path::PathBuf;

use arena::attention::{full_attention, AttentionSpec};
use arena::bench::{run_suite, SuiteConfig};
use arena::data::{gray, parse_cifar10_bytes, to_grayscale, TokenSequence, CIFAR_PLANE};
use arena::metrics::{attention_span_with, required_span, uniform_span, SpanOptions};
use arena::model::{
    build_encoder, evaluate, forward_classify, load_checkpoint, predict, preset, save_checkpoint, train, Example,
    ForwardCtx, ModelParams, TrainConfig,
};
use arena::tasks::listops::{self, gen_listops, ListOpsConfig};
use arena::tasks::pathfinder::{gen_pathfinder, PathfinderConfig};
use arena::{Error, Rng, Var};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(format!("[{}] {other}", other.kind())),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for arena::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Row-major f32 matrix or vector.
#[pyclass(name = "Tensor", module = "arena_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: arena::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        Ok(PyTensor { inner: arena::Tensor::from_rows(&rows).py()? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<Vec<f32>> {
        (0..self.inner.rows()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Attention mechanism selector, built from its JSON form.
#[pyclass(name = "AttentionSpec", module = "arena_py", from_py_object)]
#[derive(Clone)]
pub struct PyAttentionSpec {
    inner: AttentionSpec,
}

#[pymethods]
impl PyAttentionSpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: AttentionSpec = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyAttentionSpec { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    #[getter]
    fn exposes_weights(&self) -> bool {
        self.inner.exposes_weights()
    }

    fn __repr__(&self) -> String {
        format!("AttentionSpec({})", self.inner.name())
    }
}

fn examples(items: Vec<(Vec<u32>, usize)>) -> Vec<Example> {
    items.into_iter().map(|(ids, label)| Example::single(TokenSequence::unpadded(ids), label)).collect()
}

/// A classification encoder built from a named preset.
#[pyclass(name = "Model", module = "arena_py")]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset_name, attention=None, seed=0))]
    fn new(preset_name: &str, attention: Option<PyAttentionSpec>, seed: u64) -> PyResult<Self> {
        let mut cfg = preset(preset_name).py()?.encoder;
        if let Some(a) = attention {
            cfg.attention = a.inner;
        }
        cfg.validate().py()?;
        Ok(PyModel { inner: build_encoder(&cfg, &mut Rng::new(seed)).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: load_checkpoint(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).py()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.count()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Class logits for one unpadded token sequence.
    #[pyo3(signature = (tokens, seed=0))]
    fn forward(&self, tokens: Vec<u32>, seed: u64) -> PyResult<Vec<f32>> {
        let out = forward_classify(&self.inner, &TokenSequence::unpadded(tokens), &mut ForwardCtx::new(seed)).py()?;
        Ok(out.data().to_vec())
    }

    /// Trains on `(tokens, label)` pairs and returns the per-step losses.
    #[pyo3(signature = (data, steps, batch_size=8, learning_rate=1e-3, warmup_steps=0, seed=0))]
    fn fit(
        &mut self,
        data: Vec<(Vec<u32>, usize)>,
        steps: usize,
        batch_size: usize,
        learning_rate: f32,
        warmup_steps: usize,
        seed: u64,
    ) -> PyResult<Vec<f32>> {
        let cfg = TrainConfig {
            steps,
            batch_size,
            learning_rate,
            warmup_steps,
            weight_decay: 0.0,
            seed,
            micro_batch: None,
            eval_every: 0,
        };
        Ok(train(&mut self.inner, &cfg, &examples(data), None).py()?.losses)
    }

    #[pyo3(signature = (data, seed=0))]
    fn evaluate(&self, data: Vec<(Vec<u32>, usize)>, seed: u64) -> PyResult<f64> {
        evaluate(&self.inner, &examples(data), seed).py()
    }

    #[pyo3(signature = (data, seed=0))]
    fn predict(&self, data: Vec<(Vec<u32>, usize)>, seed: u64) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: predict(&self.inner, &examples(data), seed).py()? })
    }

    /// Mean required attention span over the first `samples` examples.
    #[pyo3(signature = (data, samples=100, seed=0, exclude_cls=false, normalized=false))]
    fn required_span(
        &self,
        data: Vec<(Vec<u32>, usize)>,
        samples: usize,
        seed: u64,
        exclude_cls: bool,
        normalized: bool,
    ) -> PyResult<f64> {
        let opts = SpanOptions { exclude_cls, normalized };
        Ok(required_span(&self.inner, &examples(data), samples, seed, opts).py()?.aggregate)
    }
}

#[pyfunction]
fn attention(q: &PyTensor, k: &PyTensor, v: &PyTensor) -> PyResult<PyTensor> {
    let [q, k, v] = [q, k, v].map(|t| Var::constant(t.inner.clone()));
    let out = full_attention(&q, &k, &v, None).py()?;
    Ok(PyTensor { inner: out.output.value().clone() })
}

#[pyfunction]
#[pyo3(signature = (weights, exclude_cls=false, normalized=false))]
fn attention_span(weights: &PyTensor, exclude_cls: bool, normalized: bool) -> PyResult<f64> {
    attention_span_with(&weights.inner, SpanOptions { exclude_cls, normalized }).py()
}

#[pyfunction(name = "uniform_span")]
fn uniform_span_py(n: usize) -> f64 {
    uniform_span(n)
}

#[pyfunction]
fn eval_listops(text: &str) -> PyResult<u8> {
    listops::eval_listops(text).py()
}

/// `(serialized expression, label)` pairs.
#[pyfunction(name = "gen_listops")]
#[pyo3(signature = (n, max_len, max_depth=10, seed=0))]
fn gen_listops_py(n: usize, max_len: usize, max_depth: usize, seed: u64) -> PyResult<Vec<(String, u8)>> {
    let samples = gen_listops(&ListOpsConfig::new(max_len, max_depth), &Rng::new(seed), n).py()?;
    Ok(samples.into_iter().map(|s| (s.expr.to_string(), s.label)).collect())
}

/// `(pixels, label)` pairs with `size * size` row-major bytes each.
#[pyfunction(name = "gen_pathfinder")]
#[pyo3(signature = (n, size=32, seed=0))]
fn gen_pathfinder_py(py: Python<'_>, n: usize, size: usize, seed: u64) -> PyResult<Vec<(Py<PyBytes>, u8)>> {
    let cfg = PathfinderConfig::for_size(size).py()?;
    let scenes = gen_pathfinder(&cfg, &Rng::new(seed), n).py()?;
    Ok(scenes.iter().map(|s| (PyBytes::new(py, &s.pixels.tokens).unbind(), s.label())).collect())
}

/// `(label, grayscale pixels)` for every record of a CIFAR-10 binary batch.
#[pyfunction]
fn parse_cifar10(py: Python<'_>, data: &[u8]) -> PyResult<Vec<(u8, Py<PyBytes>)>> {
    let records = parse_cifar10_bytes(data).py()?;
    Ok(records.iter().map(|r| (r.label, PyBytes::new(py, &to_grayscale(r).tokens).unbind())).collect())
}

#[pyfunction]
fn grayscale(r: u8, g: u8, b: u8) -> u8 {
    gray([r, g, b])
}

/// Runs a benchmark suite given as JSON and returns the JSON report.
#[pyfunction(name = "bench")]
fn run_bench(config_json: &str) -> PyResult<String> {
    let cfg = SuiteConfig::from_json(config_json).py()?;
    run_suite(&cfg).py()?.to_json().py()
}

#[pymodule]
fn arena_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAttentionSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(attention_span, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_span_py, m)?)?;
    m.add_function(wrap_pyfunction!(eval_listops, m)?)?;
    m.add_function(wrap_pyfunction!(gen_listops_py, m)?)?;
    m.add_function(wrap_pyfunction!(gen_pathfinder_py, m)?)?;
    m.add_function(wrap_pyfunction!(parse_cifar10, m)?)?;
    m.add_function(wrap_pyfunction!(grayscale, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("CIFAR_PLANE", CIFAR_PLANE)?;
    Ok(())
}
