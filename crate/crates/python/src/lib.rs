//! Python bindings: configs, datasets, the in-memory experiment and the
//! ranking metrics.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use metakg::archive::Archive;
use metakg::ckg::{Dataset as CoreDataset, ItemId};
use metakg::cli::{self, adapted_from_archive, adapted_to_archive, RunConfig};
use metakg::eval::{self, EvalReport, Scenario};
use metakg::meta::Adapted;
use metakg::propagation::ParamBundle;
use metakg::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Config(_) | Error::Parse { .. } | Error::Infeasible(_) | Error::IndexOutOfRange { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn scenario(name: &str) -> PyResult<Scenario> {
    name.parse().map_err(to_py)
}

/// Run settings. Keyword arguments override the defaults.
#[pyclass(name = "Config", module = "metakg", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kw) = kwargs {
            let json = py.import("json")?;
            let mut base: serde_json::Value =
                serde_json::to_value(&inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            let text: String = json.call_method1("dumps", (kw,))?.extract()?;
            let over: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            for (k, v) in over.as_object().into_iter().flatten() {
                if base.get(k).is_none() {
                    return Err(PyKeyError::new_err(format!("unknown config key `{k}`")));
                }
                base[k] = v.clone();
            }
            inner = serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = RunConfig::load(&path).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        py.import("json")?.call_method1("loads", (text,))
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, embed_dim={}, layers={:?})", self.inner.seed, self.inner.embed_dim, self.inner.layers)
    }
}

/// Interactions, knowledge triples and timestamps.
#[pyclass(name = "Dataset", module = "metakg")]
struct PyDataset {
    inner: CoreDataset,
    noisy: Vec<bool>,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = CoreDataset::load(&dir).map_err(to_py)?;
        Ok(Self { inner, noisy: Vec::new() })
    }

    /// A planted dataset drawn from the `synth_*` settings of `config`.
    #[staticmethod]
    fn synthetic(config: &PyConfig) -> PyResult<Self> {
        let s = cli::gen_synth(&config.inner.synthetic_spec(), config.inner.seed).map_err(to_py)?;
        Ok(Self {
            inner: s.dataset,
            noisy: s.noisy,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(to_py)
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn n_kg_triples(&self) -> usize {
        self.inner.kg.len()
    }

    /// Per-user flags of planted noisy users (empty for loaded data).
    #[getter]
    fn noisy_users(&self) -> Vec<bool> {
        self.noisy.clone()
    }
}

/// Model parameters (pretrained, meta-trained or baseline).
#[pyclass(name = "Params", module = "metakg", skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: ParamBundle,
}

#[pymethods]
impl PyParams {
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut a = Archive::new();
        self.inner.to_archive(&mut a);
        a.save(&path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let a = Archive::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: ParamBundle::from_archive(&a).map_err(to_py)?,
        })
    }

    /// Number of scalar parameters.
    #[getter]
    fn size(&self) -> usize {
        self.inner.entries().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// Parameters adapted to one scenario, with per-user state if any.
#[pyclass(name = "AdaptedModel", module = "metakg")]
struct PyAdapted {
    inner: Adapted,
}

#[pymethods]
impl PyAdapted {
    fn save(&self, path: PathBuf) -> PyResult<()> {
        adapted_to_archive(&self.inner).save(&path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let a = Archive::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: adapted_from_archive(&a).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_adapted_users(&self) -> usize {
        self.inner.user_gamma.len()
    }
}

/// Evaluation rows of one or more scenarios.
#[pyclass(name = "Report", module = "metakg")]
struct PyReport {
    inner: EvalReport,
}

#[pymethods]
impl PyReport {
    fn mean_recall(&self, scenario_name: &str) -> PyResult<Option<f64>> {
        Ok(self.inner.mean_recall(scenario(scenario_name)?))
    }

    fn mean_ndcg(&self, scenario_name: &str) -> PyResult<Option<f64>> {
        Ok(self.inner.mean_ndcg(scenario(scenario_name)?))
    }

    #[pyo3(signature = (per_user = false))]
    fn to_tsv(&self, per_user: bool) -> String {
        self.inner.to_tsv(per_user)
    }

    /// One dict per user.
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let out = PyList::empty(py);
        for r in &self.inner.rows {
            let d = PyDict::new(py);
            d.set_item("scenario", r.scenario.to_string())?;
            d.set_item("user", r.user)?;
            d.set_item("recall", r.recall)?;
            d.set_item("ndcg", r.ndcg)?;
            d.set_item("n_relevant", r.n_relevant)?;
            d.set_item("n_candidates", r.n_candidates)?;
            out.append(d)?;
        }
        Ok(out)
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }
}

/// The scenario split of a dataset plus every training stage.
#[pyclass(name = "Experiment", module = "metakg")]
struct PyExperiment {
    inner: cli::Experiment,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(dataset: &PyDataset, config: &PyConfig) -> PyResult<Self> {
        let inner = cli::Experiment::new(&dataset.inner, config.inner.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_train_tasks(&self) -> usize {
        self.inner.train_tasks.len()
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings()
    }

    /// Knowledge-graph pretraining. Returns the initial model parameters
    /// and the per-step losses.
    fn pretrain(&self, py: Python<'_>) -> PyResult<(PyParams, Vec<f64>)> {
        let exp = &self.inner;
        py.detach(|| {
            let kge = exp.pretrain()?;
            let params = exp.init_params(Some(&kge.params))?;
            Ok((PyParams { inner: params }, kge.step_losses))
        })
        .map_err(to_py)
    }

    /// Parameters with no pretraining.
    fn init_params(&self) -> PyResult<PyParams> {
        Ok(PyParams {
            inner: self.inner.init_params(None).map_err(to_py)?,
        })
    }

    /// Meta-training. Returns the parameters and the query loss of each step.
    fn meta_train(&self, py: Python<'_>, params: &PyParams) -> PyResult<(PyParams, Vec<f64>)> {
        let (exp, p) = (&self.inner, params.inner.clone());
        let run = py.detach(|| exp.meta_train(p)).map_err(to_py)?;
        let losses = run.log.iter().map(|s| s.query_loss).collect();
        Ok((PyParams { inner: run.params }, losses))
    }

    /// The non-meta baseline under the same step budget.
    fn base_train(&self, py: Python<'_>, params: &PyParams) -> PyResult<PyParams> {
        let (exp, p) = (&self.inner, params.inner.clone());
        let (params, _) = py.detach(|| exp.base_train(p)).map_err(to_py)?;
        Ok(PyParams { inner: params })
    }

    fn adapt(&self, py: Python<'_>, params: &PyParams, scenario_name: &str) -> PyResult<PyAdapted> {
        let s = scenario(scenario_name)?;
        let (exp, p) = (&self.inner, &params.inner);
        let inner = py
            .detach(|| {
                let data = exp.scenario(s)?;
                exp.adapt(p, &data)
            })
            .map_err(to_py)?;
        Ok(PyAdapted { inner })
    }

    fn evaluate(&self, py: Python<'_>, model: &PyAdapted, scenario_name: &str) -> PyResult<PyReport> {
        let s = scenario(scenario_name)?;
        let (exp, m) = (&self.inner, &model.inner);
        let inner = py
            .detach(|| {
                let data = exp.scenario(s)?;
                exp.evaluate(m, &data)
            })
            .map_err(to_py)?;
        Ok(PyReport { inner })
    }

    /// Every stage on every configured scenario.
    fn run_all(&self, py: Python<'_>) -> PyResult<PyReport> {
        let exp = &self.inner;
        let inner = py.detach(|| exp.run_all()).map_err(to_py)?;
        Ok(PyReport { inner })
    }
}

fn relevant_set(relevant: Vec<usize>) -> BTreeSet<ItemId> {
    relevant.into_iter().map(ItemId).collect()
}

fn ranked_ids(ranked: Vec<usize>) -> Vec<ItemId> {
    ranked.into_iter().map(ItemId).collect()
}

#[pyfunction]
fn recall_at_k(ranked: Vec<usize>, relevant: Vec<usize>, k: usize) -> Option<f64> {
    eval::recall_at_k(&ranked_ids(ranked), &relevant_set(relevant), k)
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<usize>, relevant: Vec<usize>, k: usize) -> Option<f64> {
    eval::ndcg_at_k(&ranked_ids(ranked), &relevant_set(relevant), k)
}

/// The command line, e.g. `run_cli(["pretrain", "--config", "run.toml"])`.
/// Returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("metakg".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule(name = "metakg")]
fn py_metakg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyAdapted>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
