//! Python bindings: configuration, training, checkpoints, masks, schedules
//! and metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mope::data::Task;
use mope::eval::{self, MetricMap};
use mope::layout::{build_layout, build_stage1_mask, build_stage2_mask, partition_blocks};
use mope::model::Model;
use mope::numerics::GradCheck;
use mope::persist::{Checkpoint, RunConfig};
use mope::training::{gradcheck_model, lr_at_step, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: mope::Error) -> PyErr {
    match e {
        mope::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse::<Task>().map_err(|e| PyValueError::new_err(e.to_string()))
}

fn mask_rows(m: &mope::numerics::BoolMatrix) -> Vec<Vec<bool>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Run configuration (data, template, model and optimiser sections).
#[pyclass(name = "RunConfig", module = "mope_baf", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Desk-scale defaults for `task` ("sarcasm2" or "sentiment3").
    #[staticmethod]
    #[pyo3(signature = (task = "sarcasm2"))]
    fn desk(task: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::desk(parse_task(task)?) })
    }

    /// Parses TOML; omitted keys take the desk defaults.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Copy with every seed set to `seed`.
    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.with_seed(seed) }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.data.task.to_string()
    }

    /// Number of learnable scalars of a freshly initialised model.
    fn n_parameters(&self) -> PyResult<usize> {
        Ok(Model::new(self.inner.model.clone()).map_err(py_err)?.params().n_scalars())
    }

    /// Parameter names in schema order.
    fn parameter_names(&self) -> PyResult<Vec<String>> {
        let model = Model::new(self.inner.model.clone()).map_err(py_err)?;
        Ok(model.params().names().map(str::to_string).collect())
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(task={:?}, seed={})", self.task(), self.inner.data.split_seed)
    }
}

/// Trained parameters with their configuration.
#[pyclass(name = "Checkpoint", module = "mope_baf")]
struct PyCheckpoint {
    inner: Checkpoint,
    model: Model,
}

impl PyCheckpoint {
    fn wrap(inner: Checkpoint) -> PyResult<Self> {
        let model = inner.model().map_err(py_err)?;
        Ok(Self { inner, model })
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::wrap(Checkpoint::load(&path).map_err(py_err)?)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Self::wrap(Checkpoint::from_bytes(data).map_err(py_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.inner.config.clone() }
    }

    /// Metrics on a regenerated split ("dev" or "test"); `split_seed`
    /// defaults to the recorded one.
    #[pyo3(signature = (split = "test", split_seed = None))]
    fn evaluate(&self, split: &str, split_seed: Option<u64>) -> PyResult<MetricMap> {
        let mut cfg = self.inner.config.clone();
        if let Some(s) = split_seed {
            cfg.data.split_seed = s;
        }
        let data = cfg.split().map_err(py_err)?;
        let samples = match split {
            "dev" => &data.dev,
            "test" => &data.test,
            "train" => &data.train,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        eval::evaluate(&self.model, samples, cfg.data.task).map_err(py_err)
    }

    /// Parameter tensors as flat lists keyed by name.
    fn parameters(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().to_vec())))
            .collect()
    }
}

/// Outcome of `train`.
#[pyclass(name = "RunResult", module = "mope_baf")]
struct PyRunResult {
    #[pyo3(get)]
    dev: MetricMap,
    #[pyo3(get)]
    test: MetricMap,
    #[pyo3(get)]
    best_step: usize,
    /// Rows of (step, lr, train_loss, dev_acc, dev_f1).
    #[pyo3(get)]
    trace: Vec<(usize, f64, f64, Option<f64>, Option<f64>)>,
    best: Checkpoint,
    last: Checkpoint,
}

#[pymethods]
impl PyRunResult {
    fn best_checkpoint(&self) -> PyResult<PyCheckpoint> {
        PyCheckpoint::wrap(self.best.clone())
    }

    fn final_checkpoint(&self) -> PyResult<PyCheckpoint> {
        PyCheckpoint::wrap(self.last.clone())
    }
}

/// Regenerates the split, trains and evaluates the best-dev checkpoint.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let result = py.detach(|| mope::experiment::run(&cfg)).map_err(py_err)?;
    Ok(PyRunResult {
        best: result.best_checkpoint(&cfg),
        last: result.final_checkpoint(&cfg),
        best_step: result.outcome.best_step,
        trace: result
            .outcome
            .trace
            .iter()
            .map(|r| (r.step, r.lr, r.train_loss, r.dev_acc, r.dev_f1))
            .collect(),
        dev: result.dev,
        test: result.test,
    })
}

/// Largest relative gradient error of a fresh model on two training samples,
/// with the parameter it occurred in.
#[pyfunction]
#[pyo3(signature = (config, step = 1e-4))]
fn gradcheck(py: Python<'_>, config: &PyRunConfig, step: f64) -> PyResult<(f64, Option<String>)> {
    let mut cfg = config.inner.clone();
    cfg.data.shots_per_class = 1;
    cfg.data.test_size = 0;
    py.detach(|| {
        let split = cfg.split()?;
        let model = Model::new(cfg.model.clone())?;
        let batch: Vec<_> = split.train.iter().take(2).cloned().collect();
        gradcheck_model(&model, &batch, &GradCheck::new(step))
    })
    .map(|r| (r.report.max_rel_error, r.worst_param))
    .map_err(py_err)
}

/// Stage-1 attention mask of `[VP | LP | image | text]` as nested lists.
#[pyfunction]
fn stage1_mask(vp: usize, lp: usize, img: usize, txt: usize) -> PyResult<Vec<Vec<bool>>> {
    let layout = build_layout(vp, lp, img, txt, 1).map_err(py_err)?;
    Ok(mask_rows(&build_stage1_mask(&layout)))
}

/// Stage-2 attention mask of `[VLP | image | text]`.
#[pyfunction]
fn stage2_mask(vlp: usize, img: usize, txt: usize) -> Vec<Vec<bool>> {
    mask_rows(&build_stage2_mask(vlp, img, txt))
}

/// Block sizes for `layers` stage-1 layers split into `blocks`.
#[pyfunction]
fn block_sizes(layers: usize, blocks: usize) -> PyResult<Vec<usize>> {
    partition_blocks(layers, blocks).map(|b| b.block_sizes).map_err(py_err)
}

/// Learning rate at `step` under linear warmup then linear decay.
#[pyfunction]
#[pyo3(signature = (step, peak_lr = 3e-5, total_steps = 200, warmup_frac = 0.1))]
fn learning_rate(step: usize, peak_lr: f64, total_steps: usize, warmup_frac: f64) -> PyResult<f64> {
    let cfg = TrainConfig {
        peak_lr,
        total_steps,
        warmup_frac,
        ..TrainConfig::desk()
    };
    lr_at_step(&cfg, step).map_err(py_err)
}

/// Metrics for `task` from predicted and gold class indices.
#[pyfunction]
#[pyo3(signature = (preds, golds, task = "sarcasm2"))]
fn metrics(preds: Vec<usize>, golds: Vec<usize>, task: &str) -> PyResult<MetricMap> {
    eval::task_metrics(parse_task(task)?, &preds, &golds).map_err(py_err)
}

/// Mean and population sd per metric, with "mean (sd)" strings in percent.
#[pyfunction]
fn aggregate(py: Python<'_>, runs: Vec<MetricMap>) -> PyResult<Py<PyAny>> {
    let agg = eval::aggregate_runs(&runs).map_err(py_err)?;
    let summary: BTreeMap<String, String> = agg
        .mean
        .keys()
        .map(|k| (k.clone(), agg.format(k).unwrap_or_default()))
        .collect();
    let d = pyo3::types::PyDict::new(py);
    d.set_item("runs", agg.runs)?;
    d.set_item("mean", agg.mean)?;
    d.set_item("sd", agg.sd)?;
    d.set_item("summary", summary)?;
    Ok(d.into_any().unbind())
}

#[pymodule]
fn mope_baf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(stage1_mask, m)?)?;
    m.add_function(wrap_pyfunction!(stage2_mask, m)?)?;
    m.add_function(wrap_pyfunction!(block_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    Ok(())
}
