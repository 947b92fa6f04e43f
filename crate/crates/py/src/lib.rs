//! Python bindings: cost model, config handling, pruning helpers and the
//! end-to-end simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sfprompt_core::costmodel::{self, presets, CostTriple, Method, SweepAxis};
use sfprompt_core::experiment::{self, ExperimentConfig};
use sfprompt_core::server::{self, AggregationMode};
use sfprompt_core::{data, Error};

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::InvalidConfig { .. } | Error::ConfigParse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Inputs of the closed-form cost model.
#[pyclass(name = "CostParams", module = "sfprompt", from_py_object)]
#[derive(Clone)]
pub struct PyCostParams {
    inner: costmodel::CostParams,
}

#[pymethods]
impl PyCostParams {
    #[new]
    #[pyo3(signature = (
        model_size, dataset_size, clients, local_epochs, head_fraction, body_fraction,
        prune_fraction, cut_layer_size, forward_fraction = 1.0 / 3.0, client_power = 1.0,
        server_power = 1.0, rate = 1.0, prompt_size = 0.0, include_prompt = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model_size: f64,
        dataset_size: f64,
        clients: usize,
        local_epochs: usize,
        head_fraction: f64,
        body_fraction: f64,
        prune_fraction: f64,
        cut_layer_size: f64,
        forward_fraction: f64,
        client_power: f64,
        server_power: f64,
        rate: f64,
        prompt_size: f64,
        include_prompt: bool,
    ) -> PyResult<Self> {
        let inner = costmodel::CostParams {
            model_size,
            dataset_size,
            clients,
            local_epochs,
            head_fraction,
            body_fraction,
            prune_fraction,
            cut_layer_size,
            forward_fraction,
            client_power,
            server_power,
            rate,
            prompt_size,
            include_prompt,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// `vit-base` (391 MB) or `vit-large` (1243 MB), five clients per round.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        presets::by_name(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset `{name}`")))
    }

    #[getter]
    fn model_size(&self) -> f64 {
        self.inner.model_size
    }

    #[getter]
    fn retained(&self) -> f64 {
        self.inner.retained()
    }

    fn with_model_size(&self, model_size: f64) -> Self {
        let mut inner = self.inner;
        inner.model_size = model_size;
        Self { inner }
    }

    /// `(compute_per_client, comm_total, latency)`
    fn fl(&self) -> PyResult<(f64, f64, f64)> {
        costmodel::fl_costs(&self.inner).map(triple).map_err(to_py)
    }

    fn sfl(&self) -> PyResult<(f64, f64, f64)> {
        costmodel::sfl_costs(&self.inner).map(triple).map_err(to_py)
    }

    fn sfprompt(&self) -> PyResult<(f64, f64, f64)> {
        costmodel::sfprompt_costs(&self.inner)
            .map(triple)
            .map_err(to_py)
    }

    fn crossover_model_size(&self) -> PyResult<f64> {
        costmodel::crossover_model_size(&self.inner).map_err(to_py)
    }

    /// Rows of `(method, axis_value, compute, comm, latency)`.
    fn sweep(&self, axis: &str, values: Vec<f64>) -> PyResult<Vec<SweepRow>> {
        let axis: SweepAxis = axis.parse().map_err(to_py)?;
        let rows = costmodel::cost_sweep(&self.inner, axis, &values).map_err(to_py)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                let (a, b, c) = triple(r.costs);
                (r.method.label().to_owned(), r.axis_value, a, b, c)
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// `(method, axis_value, compute, comm, latency)`
type SweepRow = (String, f64, f64, f64, f64);

fn triple(c: CostTriple) -> (f64, f64, f64) {
    (c.compute_per_client, c.comm_total, c.latency)
}

#[pyclass(name = "RoundReport", module = "sfprompt", get_all, from_py_object)]
#[derive(Clone)]
pub struct PyRoundReport {
    round: u32,
    selected: Vec<usize>,
    pruned_sizes: Vec<usize>,
    mean_local_loss: f64,
    test_accuracy: f64,
    bytes_up: u64,
    bytes_down: u64,
    header_bytes: u64,
    latency_s: f64,
}

#[pymethods]
impl PyRoundReport {
    fn __repr__(&self) -> String {
        format!(
            "RoundReport(round={}, test_accuracy={:.4}, bytes_up={}, bytes_down={})",
            self.round, self.test_accuracy, self.bytes_up, self.bytes_down
        )
    }
}

/// Final accuracies and per-round reports of a simulation.
#[pyclass(name = "TrainingResult", module = "sfprompt", get_all)]
pub struct PyTrainingResult {
    initial_accuracy: f64,
    final_accuracy: f64,
    reports: Vec<PyRoundReport>,
    prompt: Vec<f64>,
}

fn parse(config_json: &str) -> PyResult<ExperimentConfig> {
    experiment::parse_config(config_json).map_err(to_py)
}

/// Config JSON with every field at its default.
#[pyfunction]
fn default_config() -> PyResult<String> {
    experiment::dump_config(&ExperimentConfig::default()).map_err(to_py)
}

/// Parses and validates a config, returning it with defaults filled in.
#[pyfunction]
fn validate_config(config_json: &str) -> PyResult<String> {
    experiment::dump_config(&parse(config_json)?).map_err(to_py)
}

/// Analytic `(method, compute, comm, latency)` rows for the config's own setup.
#[pyfunction]
fn config_costs(config_json: &str) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let params = parse(config_json)?.cost_params().map_err(to_py)?;
    let rows = experiment::cost_rows(&params).map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|(m, c): (Method, CostTriple)| {
            (
                m.label().to_owned(),
                c.compute_per_client,
                c.comm_total,
                c.latency,
            )
        })
        .collect())
}

/// Runs the simulator in memory. Releases the GIL while training.
#[pyfunction]
fn run_training(py: Python<'_>, config_json: &str) -> PyResult<PyTrainingResult> {
    let config = parse(config_json)?;
    let out = py.detach(|| server::run_training(&config)).map_err(to_py)?;
    Ok(PyTrainingResult {
        initial_accuracy: out.initial_accuracy,
        final_accuracy: out.final_accuracy,
        prompt: out.prompt.values().to_vec(),
        reports: out
            .reports
            .into_iter()
            .map(|r| PyRoundReport {
                round: r.round,
                selected: r.selected,
                pruned_sizes: r.pruned_sizes,
                mean_local_loss: r.mean_local_loss,
                test_accuracy: r.test_accuracy,
                bytes_up: r.bytes_up,
                bytes_down: r.bytes_down,
                header_bytes: r.header_bytes,
                latency_s: r.latency_s,
            })
            .collect(),
    })
}

/// Runs the simulator and writes rounds.csv, summary.csv, costs.csv and model.ckpt.
#[pyfunction]
fn run_to_dir(py: Python<'_>, config_json: &str, out_dir: PathBuf) -> PyResult<f64> {
    let config = parse(config_json)?;
    let (out, _) = py
        .detach(|| experiment::run(&config, &out_dir))
        .map_err(to_py)?;
    Ok(out.final_accuracy)
}

#[pyfunction]
fn el2n_score(probs: Vec<f64>, label: usize) -> PyResult<f64> {
    data::el2n_score(&probs, label).map_err(to_py)
}

/// Ascending indices of the samples kept after removing the `gamma` lowest scores.
#[pyfunction]
fn prune_indices(scores: Vec<f64>, gamma: f64) -> PyResult<Vec<usize>> {
    data::prune_indices(&scores, gamma).map_err(to_py)
}

#[pyfunction]
fn select_clients(n: usize, k: usize, round: u32, seed: u64) -> PyResult<Vec<usize>> {
    server::select_clients(n, k, round, seed).map_err(to_py)
}

/// Weighted (`n_k / N`) or uniform mean of flat parameter vectors.
#[pyfunction]
#[pyo3(signature = (vectors, sizes, mode = "weighted"))]
fn aggregate(vectors: Vec<Vec<f64>>, sizes: Vec<usize>, mode: &str) -> PyResult<Vec<f64>> {
    use sfprompt_core::client::Upload;
    use sfprompt_core::model::PromptParams;
    use sfprompt_core::tensor::{ParamSet, Tensor};

    let mode = match mode {
        "weighted" => AggregationMode::Weighted,
        "uniform" => AggregationMode::Uniform,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    if vectors.len() != sizes.len() {
        return Err(PyValueError::new_err("vectors and sizes differ in length"));
    }
    let uploads = vectors
        .into_iter()
        .zip(sizes)
        .enumerate()
        .map(|(id, (v, n))| {
            let mut tail = ParamSet::new();
            tail.insert("v", Tensor::from_vec(v)?, false)?;
            Ok(Upload {
                client_id: id,
                tail,
                prompt: PromptParams::empty(1),
                n_samples: n,
                byte_size: 0,
            })
        })
        .collect::<sfprompt_core::Result<Vec<_>>>()
        .map_err(to_py)?;
    let (tail, _) = server::aggregate(&uploads, mode).map_err(to_py)?;
    Ok(tail.tensor("v").map_err(to_py)?.data().to_vec())
}

#[pymodule]
fn sfprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCostParams>()?;
    m.add_class::<PyRoundReport>()?;
    m.add_class::<PyTrainingResult>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_costs, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(el2n_score, m)?)?;
    m.add_function(wrap_pyfunction!(prune_indices, m)?)?;
    m.add_function(wrap_pyfunction!(select_clients, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    Ok(())
}
