//! Python module `revformer`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rf::checkpoint::{self, Checkpoint as Ck};
use rf::config::RunConfig;
use rf::model::RevNet;
use rf::rev::StepContext;
use rf::{analytics, bench, kernels, train, verify, zoo, DType};

fn err(e: rf::Error) -> PyErr {
    match e {
        rf::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense f64 tensor.
#[pyclass(module = "revformer", skip_from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: rf::Tensor<f64>,
}

impl From<rf::Tensor<f64>> for Tensor {
    fn from(inner: rf::Tensor<f64>) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(rf::Tensor::new(&shape, data).map_err(err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        rf::Tensor::zeros(&shape).into()
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, std = 1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> Self {
        rf::rng::normal::<f64>(&shape, std, &mut rf::rng::rng_from(seed)).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.clone().reshape(&shape).map_err(err)?.into())
    }

    fn __add__(&self, o: &Tensor) -> PyResult<Self> {
        Ok(kernels::add(&self.inner, &o.inner).map_err(err)?.into())
    }

    fn __sub__(&self, o: &Tensor) -> PyResult<Self> {
        Ok(kernels::sub(&self.inner, &o.inner).map_err(err)?.into())
    }

    fn __matmul__(&self, o: &Tensor) -> PyResult<Self> {
        Ok(kernels::matmul(&self.inner, &o.inner).map_err(err)?.into())
    }

    fn gelu(&self) -> Self {
        kernels::gelu(&self.inner).into()
    }

    fn softmax(&self, axis: usize) -> PyResult<Self> {
        Ok(kernels::softmax(&self.inner, axis).map_err(err)?.into())
    }

    #[pyo3(signature = (gamma, beta, eps = 1e-6))]
    fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> PyResult<Self> {
        Ok(
            kernels::layer_norm(&self.inner, &gamma.inner, &beta.inner, eps)
                .map_err(err)?
                .into(),
        )
    }

    fn max_abs_diff(&self, o: &Tensor) -> PyResult<f64> {
        self.inner
            .expect_same_shape(&o.inner, "max_abs_diff")
            .map_err(err)?;
        Ok(rf::tensor::max_abs_diff(&self.inner, &o.inner))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Run configuration: model, training, verification and bench settings.
#[pyclass(module = "revformer", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn from_preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_preset(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.model.arch()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.model.depth()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.model.dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(arch={}, depth={}, dim={}, seed={})",
            self.arch(),
            self.depth(),
            self.dim(),
            self.seed()
        )
    }
}

/// f64 model built from a configuration.
#[pyclass(module = "revformer", unsendable)]
struct Model {
    net: RevNet<f64>,
    image_size: usize,
    in_chans: usize,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config, seed = None))]
    fn new(config: &Config, seed: Option<u64>) -> PyResult<Self> {
        let m = &config.inner.model;
        Ok(Self {
            net: m
                .build::<f64>(seed.unwrap_or(config.inner.seed))
                .map_err(err)?,
            image_size: m.image_size(),
            in_chans: m.in_chans(),
        })
    }

    /// Expected image shape for a batch, (batch, H, W, C).
    fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.image_size, self.image_size, self.in_chans]
    }

    fn param_count(&self) -> usize {
        self.net.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Logits in eval mode.
    fn forward(&self, images: &Tensor) -> PyResult<Tensor> {
        Ok(self
            .net
            .forward(&images.inner, &StepContext::eval())
            .map_err(err)?
            .into())
    }

    /// Worst per-segment error reconstructing inputs from outputs.
    #[pyo3(signature = (images, seed = 0, step = 0))]
    fn inversion_error(&self, images: &Tensor, seed: u64, step: u64) -> PyResult<f64> {
        verify::model_inversion_error(&self.net, &images.inner, &StepContext::train(seed, step))
            .map_err(err)
    }

    /// Gradients of one reversible training step, keyed by parameter name.
    #[pyo3(signature = (images, labels, seed = 0, step = 0))]
    fn gradients(
        &mut self,
        images: &Tensor,
        labels: Vec<usize>,
        seed: u64,
        step: u64,
    ) -> PyResult<(f64, Vec<(String, Tensor)>)> {
        use rf::nn::Module;
        self.net.zero_grad();
        let ctx = StepContext::train(seed, step);
        let stats = self
            .net
            .backprop(&images.inner, &labels, &ctx, rf::rev::Schedule::Reversible)
            .map_err(err)?;
        Ok((
            stats.loss,
            self.net
                .named_grads()
                .into_iter()
                .map(|(n, t)| (n, t.into()))
                .collect(),
        ))
    }
}

/// Contents of an `RVT1` checkpoint, with tensors widened to f64.
#[pyclass(module = "revformer")]
struct Checkpoint {
    #[pyo3(get)]
    config: String,
    #[pyo3(get)]
    step: u64,
    #[pyo3(get)]
    seed: u64,
    #[pyo3(get)]
    dtype: &'static str,
    params: Vec<(String, rf::Tensor<f64>)>,
    optimizer: Vec<(String, rf::Tensor<f64>)>,
}

fn widen<T: rf::Scalar>(list: Vec<(String, rf::Tensor<T>)>) -> Vec<(String, rf::Tensor<f64>)> {
    list.into_iter().map(|(n, t)| (n, t.cast())).collect()
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        fn build<T: rf::Scalar>(c: Ck<T>, dtype: &'static str) -> Checkpoint {
            Checkpoint {
                config: c.config,
                step: c.step,
                seed: c.rng.seed,
                dtype,
                params: widen(c.params),
                optimizer: widen(c.optimizer),
            }
        }
        Ok(match checkpoint::peek_dtype(&path).map_err(err)? {
            Some(DType::F64) => build(Ck::<f64>::load(&path).map_err(err)?, "f64"),
            _ => build(Ck::<f32>::load(&path).map_err(err)?, "f32"),
        })
    }

    fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone().into()))
            .collect()
    }

    fn optimizer_state(&self) -> Vec<(String, Tensor)> {
        self.optimizer
            .iter()
            .map(|(n, t)| (n.clone(), t.clone().into()))
            .collect()
    }
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    zoo::PRESETS.to_vec()
}

#[pyfunction]
#[pyo3(signature = (config, elem_bytes = 4))]
fn cost_report<'py>(
    py: Python<'py>,
    config: &Config,
    elem_bytes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = analytics::cost_report(&config.inner.model, elem_bytes).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("params", r.params)?;
    d.set_item("flops", r.flops)?;
    d.set_item("act_mem_cached", r.act_mem_cached)?;
    d.set_item("act_mem_reversible", r.act_mem_reversible)?;
    d.set_item("recompute_flops", r.recompute_flops)?;
    Ok(d)
}

/// Runs every suite; returns (passed, rows) with rows as
/// (suite, case, passed, value, threshold, detail).
type CheckTuple = (String, String, bool, f64, f64, String);

#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run_verify(
    py: Python<'_>,
    config: &Config,
    out: Option<PathBuf>,
) -> PyResult<(bool, Vec<CheckTuple>)> {
    let report = py
        .detach(|| verify::cmd_verify(&config.inner, out.as_deref()))
        .map_err(err)?;
    let rows = report
        .checks
        .iter()
        .map(|c| {
            let ok = c.status == verify::Status::Pass;
            (
                c.suite.to_string(),
                c.case.clone(),
                ok,
                c.value,
                c.threshold,
                c.detail.clone(),
            )
        })
        .collect();
    Ok((report.passed(), rows))
}

#[pyfunction]
#[pyo3(signature = (config, out, resume = None))]
fn run_train<'py>(
    py: Python<'py>,
    config: &Config,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = py
        .detach(|| train::cmd_train(&config.inner, &out, resume.as_deref()))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("steps", s.steps)?;
    d.set_item("final_loss", s.final_loss)?;
    d.set_item("train_loss", s.train_loss)?;
    d.set_item("train_accuracy", s.train_accuracy)?;
    d.set_item("log", s.log)?;
    d.set_item("checkpoint", s.checkpoint)?;
    Ok(d)
}

/// (arch, depth, dim, schedule, steps_per_s, peak measured, peak estimated).
type BenchTuple = (String, usize, usize, String, f64, u64, u64);

#[pyfunction]
fn run_bench(py: Python<'_>, config: &Config, out: PathBuf) -> PyResult<Vec<BenchTuple>> {
    let rows = py
        .detach(|| bench::cmd_bench(&config.inner, &out))
        .map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let schedule = r.schedule.to_string();
            (
                r.arch,
                r.depth,
                r.dim,
                schedule,
                r.steps_per_s,
                r.peak_act_bytes_measured,
                r.peak_act_bytes_estimated,
            )
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "revformer")]
fn revformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_train, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
