//! Python bindings: compressors, bit accounting, data partitioning and the
//! experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedcomloc::compressors::{self, CompressorKind, CompressorSpec};
use fedcomloc::data::{self, PartitionSpec, SynthSpec};
use fedcomloc::harness::{self, ExperimentConfig, RunOptions};
use fedcomloc::metrics;
use fedcomloc::rng::derive_stream;
use fedcomloc::{Error, ParamVector};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<CompressorKind> {
    match kind {
        "identity" => Ok(CompressorKind::Identity),
        "topk" => Ok(CompressorKind::Topk),
        "quant" => Ok(CompressorKind::Quant),
        "topk_quant" => Ok(CompressorKind::TopkQuant),
        other => Err(PyValueError::new_err(format!("unknown compressor kind {other:?}"))),
    }
}

/// A compressor: `identity`, `topk`, `quant` or `topk_quant`.
#[pyclass(name = "Compressor", module = "fedcomloc_py", from_py_object)]
#[derive(Clone)]
struct PyCompressor {
    spec: CompressorSpec,
}

#[pymethods]
impl PyCompressor {
    #[new]
    #[pyo3(signature = (kind, density = 1.0, bits = 8))]
    fn new(kind: &str, density: f64, bits: u32) -> PyResult<Self> {
        let spec = CompressorSpec {
            kind: parse_kind(kind)?,
            density,
            bits,
        };
        spec.validate().map_err(to_py)?;
        Ok(PyCompressor { spec })
    }

    #[getter]
    fn kind(&self) -> String {
        match self.spec.kind {
            CompressorKind::Identity => "identity",
            CompressorKind::Topk => "topk",
            CompressorKind::Quant => "quant",
            CompressorKind::TopkQuant => "topk_quant",
        }
        .to_string()
    }

    #[getter]
    fn density(&self) -> f64 {
        self.spec.density
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.spec.bits
    }

    /// Number of entries Top-K keeps in dimension `d`.
    fn effective_k(&self, d: usize) -> usize {
        self.spec.effective_k(d)
    }

    /// Wire cost in bits of one compressed vector of dimension `d`.
    fn bit_cost(&self, d: usize) -> u64 {
        self.spec.bit_cost(d)
    }

    /// Compresses `x`, drawing randomness from the `(seed, label)` stream.
    #[pyo3(signature = (x, seed = 0, label = "python"))]
    fn apply(&self, x: Vec<f64>, seed: u64, label: &str) -> PyResult<Vec<f64>> {
        let mut rng = derive_stream(seed, label);
        self.spec
            .apply(&ParamVector::from(x), &mut rng)
            .map(ParamVector::into_inner)
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Compressor({})", self.spec)
    }
}

#[pyfunction]
fn top_k(x: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    compressors::top_k(&ParamVector::from(x), k)
        .map(ParamVector::into_inner)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x, r, seed = 0, label = "python"))]
fn quantize(x: Vec<f64>, r: u32, seed: u64, label: &str) -> PyResult<Vec<f64>> {
    compressors::quantize(&ParamVector::from(x), r, &mut derive_stream(seed, label))
        .map(ParamVector::into_inner)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (kind, d, density = 1.0, bits = 8))]
fn bit_cost(kind: &str, d: usize, density: f64, bits: u32) -> PyResult<u64> {
    Ok(PyCompressor::new(kind, density, bits)?.spec.bit_cost(d))
}

#[pyfunction]
fn total_cost(comm_rounds: u64, local_steps: u64, tau: f64) -> PyResult<f64> {
    if !(tau >= 0.0) {
        return Err(PyValueError::new_err("tau must be >= 0"));
    }
    Ok(metrics::total_cost(comm_rounds, local_steps, tau))
}

/// Per-class Dirichlet split of sample indices; returns one sorted index list
/// per client.
#[pyfunction]
#[pyo3(signature = (labels, n_clients, alpha, seed = 0))]
fn dirichlet_partition(
    labels: Vec<usize>,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    data::dirichlet_partition(
        &labels,
        &PartitionSpec { n_clients, alpha },
        &mut derive_stream(seed, "partition"),
    )
    .map(|p| p.cells().to_vec())
    .map_err(to_py)
}

/// Synthetic Gaussian clusters scaled to `[0, 1]`. Returns a dict with
/// `train_x`, `train_y`, `test_x`, `test_y` (features as row lists).
#[pyfunction]
#[pyo3(signature = (n, n_features, n_classes, margin = 4.0, seed = 0))]
fn synth<'py>(
    py: Python<'py>,
    n: usize,
    n_features: usize,
    n_classes: usize,
    margin: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let split = data::synth_classification(
        &SynthSpec {
            n,
            n_features,
            n_classes,
            margin,
        },
        &mut derive_stream(seed, "data/synth"),
    )
    .map_err(to_py)?;
    let rows = |d: &data::Dataset| -> Vec<Vec<f64>> { (0..d.len()).map(|i| d.row(i).to_vec()).collect() };
    let out = PyDict::new(py);
    out.set_item("train_x", rows(&split.train))?;
    out.set_item("train_y", split.train.labels().to_vec())?;
    out.set_item("test_x", rows(&split.test))?;
    out.set_item("test_y", split.test.labels().to_vec())?;
    Ok(out)
}

/// A parsed experiment file.
#[pyclass(name = "Experiment", module = "fedcomloc_py", from_py_object)]
#[derive(Clone)]
struct PyExperiment {
    config: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text)
            .map(|config| PyExperiment { config })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path)
            .map(|config| PyExperiment { config })
            .map_err(to_py)
    }

    /// `key: message` strings; empty when the experiment is valid.
    fn validate(&self) -> Vec<String> {
        harness::validate_config(&self.config)
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    /// Names of the (run, stepsize) cells, in execution order.
    fn cells(&self) -> Vec<String> {
        self.config.cells().into_iter().map(|c| c.name).collect()
    }

    /// Runs every cell and returns one summary dict per cell.
    #[pyo3(signature = (output_dir = None, seed = None, threads = None))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        output_dir: Option<PathBuf>,
        seed: Option<u64>,
        threads: Option<usize>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let options = RunOptions {
            seed,
            output_dir,
            quiet: true,
            threads,
        };
        let config = self.config.clone();
        let report = py.detach(|| harness::run_config(config, &options)).map_err(to_py)?;
        report
            .cells
            .iter()
            .map(|cell| {
                let d = PyDict::new(py);
                d.set_item("name", &cell.cell.name)?;
                d.set_item("gamma", cell.cell.fed.gamma)?;
                d.set_item("csv", cell.csv_path.to_string_lossy().into_owned())?;
                d.set_item("json", cell.json_path.to_string_lossy().into_owned())?;
                match &cell.outcome {
                    Ok(out) => {
                        let s = &out.summary;
                        d.set_item("ok", true)?;
                        d.set_item("best_accuracy", s.best_accuracy)?;
                        d.set_item("final_accuracy", s.final_accuracy)?;
                        d.set_item("final_loss", s.final_loss)?;
                        d.set_item("comm_rounds", s.comm_rounds)?;
                        d.set_item("uplink_bits", s.uplink_bits)?;
                        d.set_item("downlink_bits", s.downlink_bits)?;
                        d.set_item("local_steps", s.local_steps)?;
                    }
                    Err(e) => {
                        d.set_item("ok", false)?;
                        d.set_item("error", e.to_string())?;
                    }
                }
                Ok(d)
            })
            .collect()
    }
}

/// Validates and runs the experiment file at `path`; see `Experiment.run`.
#[pyfunction]
#[pyo3(signature = (path, output_dir = None, seed = None, threads = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    path: PathBuf,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    PyExperiment::load(path)?.run(py, output_dir, seed, threads)
}

#[pymodule]
fn fedcomloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCompressor>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(bit_cost, m)?)?;
    m.add_function(wrap_pyfunction!(total_cost, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("CSV_HEADER", metrics::CSV_HEADER)?;
    Ok(())
}
