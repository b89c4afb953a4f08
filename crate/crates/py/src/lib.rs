use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moiie_core::analysis;
use moiie_core::autodiff::{DType, Tape};
use moiie_core::data::{make_dataset, Batch, Task, TaskSizes};
use moiie_core::moe::{build_expert_layout as core_layout, upcycle_from_dense, Balance, ExpertGroup};
use moiie_core::nn::checkpoint::{load_config, load_params};
use moiie_core::nn::save_model;
use moiie_core::train::{evaluate, run_pipeline, EvalReport};
use moiie_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::MissingInputs(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for t in Task::ALL {
        if let Some(a) = r.accuracy(t) {
            d.set_item(t.name(), a)?;
        }
    }
    d.set_item("overall", r.overall())?;
    Ok(d)
}

/// Expert counts `(text, image, shared)` for `total` experts.
#[pyfunction]
#[pyo3(signature = (total, balance = "balanced", top_k = 2))]
fn build_expert_layout(total: usize, balance: &str, top_k: usize) -> PyResult<(usize, usize, usize)> {
    let balance: Balance = balance.parse().map_err(PyValueError::new_err)?;
    Ok(core_layout(total, balance, top_k).map_err(to_py)?.counts())
}

#[pyclass(name = "Dataset", module = "pymoiie", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: moiie_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic examples per task `(cross_modal, text_only, image_only)`.
    #[staticmethod]
    fn generate(sizes: (usize, usize, usize), seed: u64) -> PyResult<Self> {
        let inner = make_dataset(TaskSizes([sizes.0, sizes.1, sizes.2]), seed).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: moiie_core::data::Dataset::read_jsonl(&path).map_err(to_py)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn task_counts(&self) -> (usize, usize, usize) {
        let c = self.inner.task_counts();
        (c[0], c[1], c[2])
    }

    fn example<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let e = self.inner.examples.get(index).ok_or_else(|| PyIndexError::new_err(index))?;
        let d = PyDict::new(py);
        d.set_item("task", e.task.name())?;
        d.set_item("seed", e.seed)?;
        d.set_item("patch_attrs", e.patch_attrs.clone())?;
        d.set_item("text_ids", e.text_ids.clone())?;
        d.set_item("answer_position", e.answer_position)?;
        d.set_item("answer_id", e.answer_id)?;
        Ok(d)
    }
}

#[pyclass(name = "TrainingConfig", module = "pymoiie", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: moiie_core::train::TrainingConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses `key=value` lines; unset keys take their defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: moiie_core::train::TrainingConfig::parse(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: moiie_core::train::TrainingConfig::load(&path).map_err(to_py)? })
    }

    /// Copy with one key replaced.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        let mut kv = moiie_core::kv::KvMap::parse(&self.inner.render()).map_err(to_py)?;
        if !kv.contains(key) {
            return Err(PyValueError::new_err(format!("unknown config key `{key}`")));
        }
        kv.set(key, value);
        let inner = moiie_core::train::TrainingConfig::from_kv(&mut kv).map_err(to_py)?;
        kv.finish().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn with_variant(&self, name: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.set_variant(name).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn run_name(&self) -> String {
        self.inner.run_name()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.model.variant_name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.model.seed
    }
}

/// A model held in float64.
#[pyclass(name = "Model", module = "pymoiie", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: moiie_core::nn::Model<f64>,
}

fn group(label: &str) -> PyResult<ExpertGroup> {
    ExpertGroup::from_label(label).ok_or_else(|| PyValueError::new_err(format!("unknown expert group `{label}` (T, I or S)")))
}

#[pymethods]
impl PyModel {
    /// Freshly initialized stage-2 model of `config` (dense base when `dense` is set).
    #[new]
    #[pyo3(signature = (config, dense = false))]
    fn new(config: &PyConfig, dense: bool) -> PyResult<Self> {
        let cfg = if dense { config.inner.model.dense_base() } else { config.inner.model.clone() };
        Ok(PyModel { inner: moiie_core::nn::Model::new(cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let cfg = load_config(&path).map_err(to_py)?;
        let params = load_params::<f64>(&path).map_err(to_py)?;
        Ok(PyModel { inner: moiie_core::nn::Model::from_params(cfg, params).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant_name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn activated_params(&self) -> usize {
        self.inner.activated_params()
    }

    /// Sparse model of `config` upcycled from this dense model.
    #[pyo3(signature = (config, seed = 0))]
    fn upcycle(&self, config: &PyConfig, seed: u64) -> PyResult<Self> {
        let moe = config.inner.model.moe.as_ref().ok_or_else(|| PyValueError::new_err("config has no MoE variant"))?;
        let inner = upcycle_from_dense(&self.inner, moe, config.inner.model.placement, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    /// Logits at the answer position of example `index`.
    fn answer_logits(&self, data: &PyDataset, index: usize) -> PyResult<Vec<f64>> {
        let e = data.inner.examples.get(index).ok_or_else(|| PyIndexError::new_err(index))?;
        let batch = Batch::from_examples(&[e]).map_err(to_py)?;
        let mut tape = Tape::new();
        let out = self.inner.forward(&mut tape, &batch).map_err(to_py)?;
        Ok(tape.value(out.logits).row(batch.answers[0].0).to_vec())
    }

    #[pyo3(signature = (data, batch_size = 64))]
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset, batch_size: usize) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &evaluate(&self.inner, &data.inner, batch_size).map_err(to_py)?)
    }

    /// Accuracy with routing forced to the expert group `T`, `I` or `S`.
    #[pyo3(signature = (data, group_label, batch_size = 64))]
    fn group_accuracy<'py>(&self, py: Python<'py>, data: &PyDataset, group_label: &str, batch_size: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = analysis::expert_group_ablation(&self.inner, &data.inner, group(group_label)?, batch_size).map_err(to_py)?;
        report_dict(py, &r)
    }

    /// Routing-pathway trace CSV over `data`.
    #[pyo3(signature = (data, batch_size = 64))]
    fn pathway_csv(&self, data: &PyDataset, batch_size: usize) -> PyResult<String> {
        Ok(analysis::pathway_stats(&self.inner, &data.inner, batch_size).map_err(to_py)?.to_csv())
    }
}

/// Runs both training stages. Returns the final accuracies and, with `out_dir`, the run directory.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train<'py>(py: Python<'py>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = out_dir.as_deref();
    let (dir, eval) = py
        .detach(|| match cfg.dtype {
            DType::F32 => run_pipeline::<f32>(&cfg, out, None).map(|s| (s.run_dir, s.eval)),
            DType::F64 => run_pipeline::<f64>(&cfg, out, None).map(|s| (s.run_dir, s.eval)),
        })
        .map_err(to_py)?;
    let d = report_dict(py, &eval)?;
    d.set_item("run_dir", dir.map(|p| p.display().to_string()))?;
    Ok(d)
}

#[pyfunction]
fn export_report(run_dir: PathBuf) -> PyResult<String> {
    analysis::export_report(&run_dir).map_err(to_py)
}

#[pymodule]
fn pymoiie(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_expert_layout, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(export_report, m)?)?;
    Ok(())
}
