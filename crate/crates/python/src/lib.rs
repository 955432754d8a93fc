use std::path::PathBuf;

use ::mvalign as core;
use core::autodiff::Tensor;
use core::discrepancy::MetricSpec;
use core::probe::{extract_features, probe_train_eval, ProbeConfig};
use core::trainer::{
    checkpoint_load, checkpoint_save, TrainConfig, TrainState, Trainer as CoreTrainer,
};
use core::views::{synth_generate, MultiViewDataset, SynthSpec};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        core::Error::NonFinite(_) | core::Error::MissingGrad(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, d], rows.concat()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

fn json_arg<T: for<'de> serde::Deserialize<'de> + Default>(s: Option<&str>) -> PyResult<T> {
    match s {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Multi-view dataset held in memory.
#[pyclass(module = "mvalign", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: MultiViewDataset,
}

#[pymethods]
impl Dataset {
    /// Draw `n` samples from the synthetic generator; `spec` is a JSON object.
    #[staticmethod]
    #[pyo3(signature = (n, spec=None))]
    fn synth(n: usize, spec: Option<&str>) -> PyResult<Self> {
        let spec: SynthSpec = json_arg(spec)?;
        Ok(Dataset {
            inner: synth_generate(&spec, n).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: MultiViewDataset::load_mvds(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_mvds(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.inner.num_views()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(<[u32]>::to_vec)
    }

    fn view(&self, m: usize) -> PyResult<Vec<Vec<f64>>> {
        if m >= self.inner.num_views() {
            return Err(PyValueError::new_err(format!("view {m} out of range")));
        }
        Ok(rows(&self.inner.view_tensor(m)))
    }

    fn single_view(&self, m: usize) -> PyResult<Self> {
        Ok(Dataset {
            inner: self.inner.single_view(m).map_err(to_py)?,
        })
    }
}

/// Stepwise training driver over an owned dataset.
#[pyclass(module = "mvalign")]
struct Trainer {
    state: Option<TrainState>,
    data: MultiViewDataset,
}

impl Trainer {
    fn state(&self) -> &TrainState {
        self.state.as_ref().expect("state present between calls")
    }
}

#[pymethods]
impl Trainer {
    /// `config` is a JSON training config; missing keys take defaults. The
    /// dataset it describes is loaded unless `data` is given.
    #[new]
    #[pyo3(signature = (config=None, data=None))]
    fn new(config: Option<&str>, data: Option<Dataset>) -> PyResult<Self> {
        let cfg: TrainConfig = json_arg(config)?;
        cfg.validate().map_err(to_py)?;
        let data = match data {
            Some(d) => d.inner,
            None => cfg.dataset.load().map_err(to_py)?,
        };
        let state = TrainState::for_dataset(cfg, &data).map_err(to_py)?;
        Ok(Trainer {
            state: Some(state),
            data,
        })
    }

    /// Resume from a checkpoint; the dataset comes from its config.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = checkpoint_load(&path).map_err(to_py)?;
        let data = state.config.dataset.load().map_err(to_py)?;
        Ok(Trainer {
            state: Some(state),
            data,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint_save(self.state(), &path).map_err(to_py)
    }

    /// Run one batch and return its metrics row as a dict.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let state = self.state.take().expect("state present between calls");
        let mut t = match CoreTrainer::new(state.clone(), &self.data) {
            Ok(t) => t,
            Err(e) => {
                self.state = Some(state);
                return Err(to_py(e));
            }
        };
        let out = t.step();
        self.state = Some(if out.is_ok() { t.state } else { state });
        let (row, _) = out.map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("epoch", row.epoch)?;
        d.set_item("step", row.step)?;
        d.set_item("loss_total", row.loss_total)?;
        d.set_item("loss_loco", row.loss_loco)?;
        d.set_item("loss_gloco", row.loss_gloco)?;
        d.set_item("gswd_mean_pairwise", row.gswd_mean_pairwise)?;
        d.set_item("critic_value", row.critic_value)?;
        Ok(d)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.state().epoch
    }

    #[getter]
    fn global_step(&self) -> u64 {
        self.state().global_step
    }

    #[getter]
    fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.state().config.batch_size
    }

    #[getter]
    fn config(&self) -> String {
        self.state().config.to_json()
    }

    /// Concatenated per-view features of `data` (default: the training set).
    #[pyo3(signature = (data=None))]
    fn features(&self, data: Option<&Dataset>) -> PyResult<Vec<Vec<f64>>> {
        let data = data.map_or(&self.data, |d| &d.inner);
        Ok(rows(
            &extract_features(&self.state().encoders, data).map_err(to_py)?,
        ))
    }

    /// Fit a probe on the frozen features and return the report as JSON.
    #[pyo3(signature = (config=None))]
    fn probe(&self, config: Option<&str>) -> PyResult<String> {
        let cfg: ProbeConfig = json_arg(config)?;
        let labels = self
            .data
            .labels()
            .ok_or_else(|| PyValueError::new_err("dataset has no labels"))?;
        let feats = extract_features(&self.state().encoders, &self.data).map_err(to_py)?;
        let report = probe_train_eval(&feats, labels, &cfg).map_err(to_py)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Discrepancy between two sample sets given as lists of equal-length rows.
#[pyfunction]
#[pyo3(signature = (a, b, kind="gswd", p=1.0, slices=64, seed=0))]
fn metric(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    kind: &str,
    p: f64,
    slices: usize,
    seed: u64,
) -> PyResult<f64> {
    let spec = MetricSpec {
        kind: kind.parse().map_err(to_py)?,
        p,
        slices,
        ..MetricSpec::default()
    };
    core::discrepancy::metric_value(&tensor(a)?, &tensor(b)?, &spec, seed).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, p=1.0))]
fn wasserstein_1d(a: Vec<f64>, b: Vec<f64>, p: f64) -> PyResult<f64> {
    core::discrepancy::wasserstein_1d(&a, &b, p).map_err(to_py)
}

#[pyfunction]
fn rgb_to_lab(r: f64, g: f64, b: f64) -> PyResult<(f64, f64, f64)> {
    let [l, a, bb] = core::views::rgb_to_lab(r, g, b).map_err(to_py)?;
    Ok((l, a, bb))
}

/// Finite-difference check of every loss; returns `(name, max_rel_err)` pairs.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let entries = py.detach(|| core::suite::loss_suite(seed)).map_err(to_py)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.name, e.max_rel_err))
        .collect())
}

#[pymodule]
#[pyo3(name = "mvalign")]
fn mvalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(metric, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
