//! Python bindings: `sempipe.Session` plus the planner's pure functions.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

use sempipe_core::cache::ResultCache;
use sempipe_core::cli::{default_models, record_json};
use sempipe_core::cost::{self, ExecMode, PlanEstimate, Policy, SampleConfig};
use sempipe_core::datasource::{DataSourceDescriptor, DatasetRegistry};
use sempipe_core::exec::{ConverterStore, OptimizerConfig, RunReport, Session as CoreSession};
use sempipe_core::generators::{self, Backend, HttpBackend, HttpConfig, MockBackend, MockTable};
use sempipe_core::logical::{enumerate_reorderings, PipelineDescription};
use sempipe_core::physical::{ModelRegistry, TokenBudget};
use sempipe_core::schema::SchemaRegistry;
use sempipe_core::udf::UdfRegistry;
use sempipe_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Pipeline(_)
        | Error::InvalidPolicy(_)
        | Error::UnknownDataset(_)
        | Error::UnknownSchema(_)
        | Error::Dependency(_)
        | Error::Registry(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// serde value -> Python object via the stdlib json module.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn pipeline_text(py: Python<'_>, pipeline: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = pipeline.extract::<String>() {
        return Ok(s);
    }
    py.import("json")?.call_method1("dumps", (pipeline,))?.extract()
}

fn parse_policy(s: &str) -> PyResult<Policy> {
    s.parse().map_err(py_err)
}

/// An optimizer session: datasets, models, backend and result cache.
#[pyclass(module = "sempipe")]
struct Session {
    schemas: SchemaRegistry,
    datasets: DatasetRegistry,
    models: ModelRegistry,
    udfs: UdfRegistry,
    backend: Box<dyn Backend>,
    cache: ResultCache,
    converters: ConverterStore,
}

impl Session {
    fn core(&self) -> CoreSession<'_> {
        CoreSession {
            schemas: &self.schemas,
            datasets: &self.datasets,
            models: &self.models,
            udfs: &self.udfs,
            backend: self.backend.as_ref(),
            cache: &self.cache,
            converters: &self.converters,
        }
    }

    fn config(sample_fraction: f64, min_samples: usize, workers: usize) -> PyResult<OptimizerConfig> {
        if workers == 0 {
            return Err(PyValueError::new_err("workers must be at least 1"));
        }
        Ok(OptimizerConfig {
            sample: SampleConfig::new(sample_fraction, min_samples, None).map_err(py_err)?,
            mode: if workers > 1 { ExecMode::Parallel(workers) } else { ExecMode::Serial },
            ..OptimizerConfig::default()
        })
    }
}

#[pymethods]
impl Session {
    /// `mock_table` is a JSON string or a dict; `backend` is "mock" or "http".
    #[new]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (datasets=None, models=None, mock_table=None, backend="mock", cache_dir=None, endpoint=None, api_key_env="OPENAI_API_KEY"))]
    fn new(
        py: Python<'_>,
        datasets: Option<PathBuf>,
        models: Option<PathBuf>,
        mock_table: Option<&Bound<'_, PyAny>>,
        backend: &str,
        cache_dir: Option<PathBuf>,
        endpoint: Option<String>,
        api_key_env: &str,
    ) -> PyResult<Self> {
        let datasets = match datasets {
            Some(p) => DatasetRegistry::open(p).map_err(py_err)?,
            None => DatasetRegistry::in_memory(),
        };
        let models = match models {
            Some(p) => ModelRegistry::from_file(&p).map_err(py_err)?,
            None => default_models(),
        };
        let backend: Box<dyn Backend> = match backend {
            "mock" => {
                let table = match mock_table {
                    Some(t) => MockTable::from_json(&pipeline_text(py, t)?).map_err(py_err)?,
                    None => MockTable::default(),
                };
                Box::new(MockBackend::new(table))
            }
            "http" => Box::new(HttpBackend::new(HttpConfig {
                api_key_env: api_key_env.to_string(),
                default_endpoint: endpoint,
                ..HttpConfig::default()
            })),
            other => return Err(PyValueError::new_err(format!("unknown backend `{other}`"))),
        };
        let cache = match cache_dir {
            Some(d) => ResultCache::on_disk(d).map_err(py_err)?,
            None => ResultCache::in_memory(),
        };
        Ok(Session {
            schemas: SchemaRegistry::new(),
            datasets,
            models,
            udfs: UdfRegistry::with_builtins(),
            backend,
            cache,
            converters: ConverterStore::default(),
        })
    }

    #[pyo3(signature = (dataset_id, path, kind="directory-of-text-files", schema="TextFile"))]
    fn register(&mut self, dataset_id: &str, path: PathBuf, kind: &str, schema: &str) -> PyResult<()> {
        let kind = kind.parse().map_err(py_err)?;
        self.schemas.get(schema).map_err(py_err)?;
        self.datasets
            .register(DataSourceDescriptor::new(dataset_id, kind, path, schema))
            .map_err(py_err)?;
        Ok(())
    }

    fn datasets(&self) -> Vec<String> {
        self.datasets.ids().map(str::to_string).collect()
    }

    /// Operator ids of every legal reordering of the pipeline.
    fn reorderings(&self, py: Python<'_>, pipeline: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<String>>> {
        let desc = PipelineDescription::from_json(&pipeline_text(py, pipeline)?).map_err(py_err)?;
        let compiled = self.core().compile(&desc).map_err(py_err)?;
        Ok(enumerate_reorderings(&compiled.plan)
            .plans
            .iter()
            .map(|p| p.op_ids().into_iter().map(str::to_string).collect())
            .collect())
    }

    /// Samples and plans without executing; returns the report as a dict.
    #[pyo3(signature = (pipeline, policy, sample_fraction=0.05, min_samples=3, workers=1))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        pipeline: &Bound<'py, PyAny>,
        policy: &str,
        sample_fraction: f64,
        min_samples: usize,
        workers: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let desc = PipelineDescription::from_json(&pipeline_text(py, pipeline)?).map_err(py_err)?;
        let (policy, config) = (parse_policy(policy)?, Self::config(sample_fraction, min_samples, workers)?);
        let report: RunReport = py
            .detach(|| {
                let s = self.core();
                let compiled = s.compile(&desc)?;
                s.optimize(&compiled, &policy, &config).map(|o| o.report)
            })
            .map_err(py_err)?;
        to_py(py, &report)
    }

    /// Optimizes and executes; returns `(records, report)`.
    #[pyo3(signature = (pipeline, policy, sample_fraction=0.05, min_samples=3, workers=1))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        pipeline: &Bound<'py, PyAny>,
        policy: &str,
        sample_fraction: f64,
        min_samples: usize,
        workers: usize,
    ) -> PyResult<(Bound<'py, PyList>, Bound<'py, PyAny>)> {
        let desc = PipelineDescription::from_json(&pipeline_text(py, pipeline)?).map_err(py_err)?;
        let (policy, config) = (parse_policy(policy)?, Self::config(sample_fraction, min_samples, workers)?);
        let (records, report) = py
            .detach(|| {
                let s = self.core();
                let compiled = s.compile(&desc)?;
                s.optimize_and_run(&compiled, &policy, &config).map(|(r, rep, _)| (r, rep))
            })
            .map_err(py_err)?;
        let rows = PyList::empty(py);
        for r in &records {
            rows.append(to_py(py, &record_json(r))?)?;
        }
        Ok((rows, to_py(py, &report)?))
    }

    fn backend_calls(&self) -> u64 {
        self.backend.calls()
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(backend={}, datasets={}, models={})",
            self.backend.id(),
            self.datasets.ids().count(),
            self.models.models.len()
        )
    }
}

fn estimates(rows: Vec<(f64, f64, f64)>) -> Vec<PlanEstimate> {
    rows.into_iter()
        .enumerate()
        .map(|(i, (r, u, q))| PlanEstimate::new(&format!("{i:08}"), r, u, q))
        .collect()
}

/// Indices of the non-dominated `(runtime_s, usd, quality)` triples.
#[pyfunction]
fn pareto_frontier(rows: Vec<(f64, f64, f64)>) -> Vec<usize> {
    cost::pareto_frontier(&estimates(rows))
}

/// Picks among the frontier of `rows` under a policy such as
/// "min-cost-at-quality=0.8". Returns `(index, constraint_met)`.
#[pyfunction]
fn choose(rows: Vec<(f64, f64, f64)>, policy: &str) -> PyResult<(usize, bool)> {
    let e = estimates(rows);
    let c = cost::choose(&e, &cost::pareto_frontier(&e), &parse_policy(policy)?).map_err(py_err)?;
    Ok((c.index, c.constraint_met))
}

#[pyfunction]
fn count_tokens(text: &str) -> usize {
    generators::count_tokens(text)
}

/// Keeps the leading `budget` fraction of the tokens of `text`.
#[pyfunction]
fn reduce_input(text: &str, budget: f64) -> PyResult<String> {
    let b = TokenBudget::new(budget).map_err(py_err)?;
    Ok(generators::reduce_input(text, b))
}

#[pyfunction]
fn default_model_registry(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &default_models().models)
}

#[pymodule]
fn sempipe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    m.add_function(wrap_pyfunction!(choose, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_input, m)?)?;
    m.add_function(wrap_pyfunction!(default_model_registry, m)?)?;
    Ok(())
}
