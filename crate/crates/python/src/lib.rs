//! Python bindings: metrics, loss weights, graph topology, corpus
//! generation, training and inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use aurelgraph::anfl::build_topology as topology;
use aurelgraph::config::TrainConfig;
use aurelgraph::data::{generate_synthetic, load_corpus, save_corpus, SyntheticSpec};
use aurelgraph::error::{Error, ErrorKind};
use aurelgraph::gradcheck::GradCheckOptions;
use aurelgraph::gradcheck_suite::run_suite;
use aurelgraph::losses::compute_weights as weights;
use aurelgraph::metrics::{auc_score as auc, evaluate, f1_score as f1};
use aurelgraph::tensor::Tensor;
use aurelgraph::trainer::{infer, train_stage1, train_stage2, Checkpoint};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Usage => PyValueError::new_err(msg),
        ErrorKind::Data => PyIOError::new_err(msg),
        ErrorKind::Numeric => PyArithmeticError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Per-AU loss weights `N (1/r_i) / sum_j (1/r_j)`.
#[pyfunction]
fn compute_weights(rates: Vec<f64>) -> PyResult<Vec<f64>> {
    weights(&rates).map_err(to_py)
}

/// `(precision, recall, f1)`; `None` where undefined.
#[pyfunction]
#[pyo3(signature = (preds, labels, threshold = 0.5))]
fn f1_score(preds: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<(Option<f64>, Option<f64>, Option<f64>)> {
    let s = f1(&preds, &labels, threshold).map_err(to_py)?;
    Ok((s.precision, s.recall, s.f1))
}

/// Rank-based AUC, ties counted half; `None` when one class is absent.
#[pyfunction]
fn auc_score(preds: Vec<f64>, labels: Vec<u8>) -> PyResult<Option<f64>> {
    auc(&preds, &labels).map_err(to_py)
}

/// K-nearest-neighbour adjacency (0/1 rows) over node features.
#[pyfunction]
fn build_topology(features: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<u8>>> {
    let a = topology(&matrix(features)?, k).map_err(to_py)?;
    Ok((0..a.n()).map(|i| (0..a.n()).map(|j| u8::from(a.get(i, j))).collect()).collect())
}

/// Writes a synthetic corpus; `preset` is `coupled`, `relational` or
/// `independent`. Returns the per-AU occurrence rates.
#[pyfunction]
#[pyo3(signature = (path, samples = 512, preset = "coupled", seed = 0, n_aus = 6))]
fn generate_corpus(path: PathBuf, samples: usize, preset: &str, seed: u64, n_aus: usize) -> PyResult<Vec<f64>> {
    let spec = match preset {
        "coupled" => SyntheticSpec::coupled(n_aus),
        "relational" => SyntheticSpec::relational(n_aus),
        "independent" => SyntheticSpec::independent(SyntheticSpec::coupled(n_aus).base_rates),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    let corpus = generate_synthetic(samples, &spec, seed).map_err(to_py)?;
    save_corpus(&corpus, &path).map_err(to_py)?;
    Ok(corpus.rates)
}

/// Default configuration as `key = value` text.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_text()
}

/// Runs the finite-difference suite; one `(component, max_rel_err, passed)`
/// per component.
#[pyfunction]
#[pyo3(signature = (seed = 0, lambda_ = 0.05))]
fn gradcheck(seed: u64, lambda_: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = run_suite(seed, lambda_, GradCheckOptions::default()).map_err(to_py)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.component.to_string(), c.max_relative_error, c.passed()))
        .collect())
}

/// Trains both stages on a corpus file and saves the stage-2 checkpoint.
/// `overrides` are `key=value` strings. Returns the epoch log as JSON lines.
#[pyfunction]
#[pyo3(signature = (corpus, checkpoint, overrides = Vec::new()))]
fn train(corpus: PathBuf, checkpoint: PathBuf, overrides: Vec<String>) -> PyResult<Vec<String>> {
    let cfg = TrainConfig::resolve(None, &overrides).map_err(to_py)?;
    let data = load_corpus(&corpus).map_err(to_py)?;
    let s1 = train_stage1(&data, &cfg).map_err(to_py)?;
    let s2 = train_stage2(&data, Some(&s1.checkpoint), &cfg).map_err(to_py)?;
    s2.checkpoint.save(&checkpoint).map_err(to_py)?;
    Ok(s1.log.iter().chain(&s2.log).map(|r| r.to_json_line()).collect())
}

/// A trained checkpoint.
#[pyclass]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage.number()
    }

    #[getter]
    fn n_aus(&self) -> usize {
        self.inner.arch.n_aus
    }

    /// AU probabilities for each input (a list of rows).
    fn predict(&self, inputs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let tensors = inputs.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let out = infer(&self.inner.model, &refs).map_err(to_py)?;
        let n = self.inner.arch.n_aus;
        Ok(out.probabilities.data().chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// Evaluation report on a corpus file, as JSON text.
    #[pyo3(signature = (corpus, threshold = 0.5))]
    fn evaluate(&self, corpus: PathBuf, threshold: f64) -> PyResult<String> {
        let data = load_corpus(&corpus).map_err(to_py)?;
        Ok(evaluate(&self.inner.model, &data, threshold).map_err(to_py)?.to_json())
    }
}

#[pymodule]
fn aurelgraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_weights, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(auc_score, m)?)?;
    m.add_function(wrap_pyfunction!(build_topology, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
