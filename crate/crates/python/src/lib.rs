//! Python bindings for trajnet-core.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use trajnet_core::agingvae::{one_hot_gap as core_one_hot_gap, vae_predict_batch, AgingVaeModel, PredictMode};
use trajnet_core::conversion::{compute_residual as core_residual, predict_conversion, ConversionModel};
use trajnet_core::datamodel::{self as dm, Matrix, ResidualSequence, VoxelSource};
use trajnet_core::graphencoder::{classify, encode_graph, GraphEncoderModel};
use trajnet_core::harness::{self, RunConfig, Workspace};
use trajnet_core::interpret::{self, Averaging};
use trajnet_core::netgen::{self, ContrastiveOptions};
use trajnet_core::synth::{CohortKind, SyntheticCohort};
use trajnet_core::Error;

create_exception!(trajnet, TrajnetError, PyException, "Base class of trajnet errors.");
create_exception!(trajnet, ValidationError, TrajnetError, "Invalid input or configuration.");
create_exception!(trajnet, DependencyError, TrajnetError, "An upstream stage has not run.");
create_exception!(trajnet, NumericalError, TrajnetError, "NaN/Inf or divergence.");
create_exception!(trajnet, StateError, TrajnetError, "Model used before training or loading.");

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Validation { .. } | Error::Config(_) | Error::Stratification(_) | Error::Load { .. } => {
            ValidationError::new_err(msg)
        }
        Error::Dependency { .. } => DependencyError::new_err(msg),
        Error::Numerical(_) => NumericalError::new_err(msg),
        Error::State(_) => StateError::new_err(msg),
        _ => TrajnetError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for trajnet_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| TrajnetError::new_err(e.to_string()))
}

fn rows(m: &Matrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Settings of a pipeline run, addressed by dotted `key = value` names.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(t) = text {
            inner.apply_text(t).py()?;
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, folds={})", self.inner.seed, self.inner.folds)
    }
}

/// An artifact root; each method runs one pipeline stage.
#[pyclass(name = "Workspace")]
struct PyWorkspace {
    inner: Workspace,
}

#[pymethods]
impl PyWorkspace {
    #[new]
    fn new(root: PathBuf) -> Self {
        Self { inner: Workspace::new(root) }
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    #[pyo3(signature = (config, materialize=false))]
    fn synth(&self, py: Python<'_>, config: &PyRunConfig, materialize: bool) -> PyResult<()> {
        py.detach(|| self.inner.synth(&config.inner, materialize)).py()
    }

    fn train_netgen(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<()> {
        py.detach(|| self.inner.train_netgen(&config.inner).map(|_| ())).py()
    }

    fn build_graphs(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<()> {
        py.detach(|| self.inner.build_graphs(&config.inner)).py()
    }

    fn train_encoder(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<()> {
        py.detach(|| self.inner.train_encoder(&config.inner).map(|_| ())).py()
    }

    fn train_vae(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<()> {
        py.detach(|| self.inner.train_vae(&config.inner).map(|_| ())).py()
    }

    fn train_rnn(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<()> {
        py.detach(|| self.inner.train_rnn(&config.inner).map(|_| ())).py()
    }

    /// `(subject_id, probability)` for each longitudinal MCI subject.
    fn predict(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<Vec<(String, f64)>> {
        py.detach(|| self.inner.predict(&config.inner)).py()
    }

    /// Interpretation summary as a JSON string.
    #[pyo3(signature = (config, subject=None))]
    fn interpret(&self, py: Python<'_>, config: &PyRunConfig, subject: Option<String>) -> PyResult<String> {
        let s = py.detach(|| self.inner.interpret(&config.inner, subject.as_deref())).py()?;
        to_json(&s)
    }

    /// Evaluation report as a JSON string.
    fn evaluate(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<String> {
        let r = py.detach(|| self.inner.evaluate(&config.inner)).py()?;
        to_json(&r)
    }

    fn report(&self) -> PyResult<PathBuf> {
        harness::write_report(&self.inner).py()
    }
}

/// A structural network: 68 node and 2227 edge feature rows of width 32.
#[pyclass(name = "BrainNetwork", from_py_object)]
#[derive(Clone)]
struct PyBrainNetwork {
    inner: dm::BrainNetwork,
}

#[pymethods]
impl PyBrainNetwork {
    /// Builds a network on the canonical topology.
    #[new]
    fn new(node_features: Vec<Vec<f32>>, edge_features: Vec<Vec<f32>>, subject_id: &str, visit: u32) -> PyResult<Self> {
        let n = Matrix::from_rows(&node_features).py()?;
        let e = Matrix::from_rows(&edge_features).py()?;
        let inner = dm::BrainNetwork::new(dm::AtlasTopology::canonical(), n, e, subject_id, visit).py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id().to_string()
    }

    #[getter]
    fn visit(&self) -> u32 {
        self.inner.visit()
    }

    fn node_features(&self) -> Vec<Vec<f32>> {
        rows(self.inner.node_features())
    }

    fn edge_features(&self) -> Vec<Vec<f32>> {
        rows(self.inner.edge_features())
    }

    /// `(u, v)` endpoints of every edge, in edge order.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.topology().edges().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("BrainNetwork(subject_id={:?}, visit={})", self.inner.subject_id(), self.inner.visit())
    }
}

#[pyclass(name = "Subject")]
struct PySubject {
    inner: dm::LongitudinalSubject,
}

#[pymethods]
impl PySubject {
    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    #[getter]
    fn group(&self) -> &'static str {
        self.inner.group.as_str()
    }

    #[getter]
    fn conversion_label(&self) -> bool {
        self.inner.conversion_label
    }

    /// `(visit_index, age, network)` per visit.
    fn visits(&self) -> Vec<(u32, f64, PyBrainNetwork)> {
        self.inner
            .visits
            .iter()
            .map(|v| (v.visit_index, v.age, PyBrainNetwork { inner: v.network.clone() }))
            .collect()
    }
}

/// Loads a persisted network dataset.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PySubject>> {
    Ok(dm::load_dataset(&path).py()?.into_iter().map(|inner| PySubject { inner }).collect())
}

/// A generated cohort with on-demand voxel vectors.
#[pyclass(name = "SyntheticCohort")]
struct PyCohort {
    inner: Arc<SyntheticCohort>,
}

#[pymethods]
impl PyCohort {
    /// `(subject_id, group, visit count, conversion_label)` per subject.
    fn records(&self) -> Vec<(String, &'static str, usize, bool)> {
        self.inner
            .records()
            .iter()
            .map(|r| (r.subject_id.clone(), r.group.as_str(), r.visits.len(), r.conversion_label))
            .collect()
    }

    fn node_voxels(&self, subject: usize, visit: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&self.inner.node_voxels(subject, visit).py()?))
    }

    fn edge_voxels(&self, subject: usize, visit: usize, fa: bool) -> PyResult<Vec<Vec<f32>>> {
        let m = if fa { dm::Modality::FA } else { dm::Modality::T1 };
        Ok(rows(&self.inner.edge_voxels(subject, visit, m).py()?))
    }

    #[getter]
    fn abnormal_edges(&self) -> Vec<usize> {
        self.inner.ground_truth().abnormal_edges
    }
}

/// Generates the `"baseline"` or `"longitudinal"` cohort of `config`.
#[pyfunction]
fn generate_cohort(config: &PyRunConfig, kind: &str) -> PyResult<PyCohort> {
    let kind = match kind {
        "baseline" => CohortKind::Baseline,
        "longitudinal" => CohortKind::Longitudinal,
        other => return Err(ValidationError::new_err(format!("unknown cohort kind `{other}`"))),
    };
    let (c, _) = SyntheticCohort::generate(&config.inner.synth, kind).py()?;
    Ok(PyCohort { inner: Arc::new(c) })
}

#[pyclass(name = "GraphEncoder")]
struct PyGraphEncoder {
    inner: GraphEncoderModel,
}

#[pymethods]
impl PyGraphEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: GraphEncoderModel::load(&path).py()? })
    }

    /// The 256-wide graph feature.
    fn encode(&self, network: &PyBrainNetwork) -> PyResult<Vec<f32>> {
        Ok(encode_graph(&self.inner, &network.inner).py()?.values().to_vec())
    }

    /// AD probability.
    fn classify(&self, network: &PyBrainNetwork) -> PyResult<f64> {
        classify(&self.inner, &network.inner).py()
    }
}

#[pyclass(name = "AgingVae")]
struct PyAgingVae {
    inner: AgingVaeModel,
}

#[pymethods]
impl PyAgingVae {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: AgingVaeModel::load(&path).py()? })
    }

    /// Forecast `n` visit intervals ahead; `seed` switches to sampling.
    #[pyo3(signature = (feature, n, seed=None))]
    fn predict(&self, feature: Vec<f32>, n: usize, seed: Option<u64>) -> PyResult<Vec<f32>> {
        let mode = seed.map_or(PredictMode::Mean, |seed| PredictMode::Sample { seed });
        if feature.len() != dm::GRAPH_FEATURE_DIM {
            return Err(ValidationError::new_err(format!("feature must have length {}", dm::GRAPH_FEATURE_DIM)));
        }
        Ok(vae_predict_batch(&self.inner, &[&feature], &[n], mode).py()?.remove(0))
    }
}

#[pyclass(name = "ConversionModel")]
struct PyConversionModel {
    inner: ConversionModel,
}

#[pymethods]
impl PyConversionModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ConversionModel::load(&path).py()? })
    }

    /// `(next_residual, probability)` for a residual prefix.
    fn predict(&self, residuals: Vec<Vec<f32>>) -> PyResult<(Vec<f32>, f64)> {
        let idx = (1..=residuals.len() as u32).collect();
        let seq = ResidualSequence::new(residuals, idx).py()?;
        predict_conversion(&self.inner, &seq).py()
    }
}

#[pyfunction]
#[pyo3(signature = (n, width=16))]
fn one_hot_gap(n: usize, width: usize) -> PyResult<Vec<f32>> {
    core_one_hot_gap(n, width).py()
}

#[pyfunction]
#[pyo3(signature = (za, zb, tau, symmetric=true, include_positive=true))]
fn contrastive_loss(za: Vec<Vec<f32>>, zb: Vec<Vec<f32>>, tau: f64, symmetric: bool, include_positive: bool) -> PyResult<f64> {
    let a = Matrix::from_rows(&za).py()?;
    let b = Matrix::from_rows(&zb).py()?;
    netgen::contrastive_loss_value(&a, &b, tau, ContrastiveOptions { symmetric, include_positive }).py()
}

#[pyfunction]
#[pyo3(signature = (raw, target=3000, seed=0))]
fn pad_and_sample(raw: Vec<f32>, target: usize, seed: u64) -> PyResult<Vec<f32>> {
    netgen::pad_and_sample(&raw, target, seed).py()
}

#[pyfunction]
fn compute_residual(actual: Vec<f32>, predicted: Vec<f32>) -> PyResult<Vec<f32>> {
    core_residual(&actual, &predicted).py()
}

/// `(edge_residuals, node_residuals)` between two networks.
#[pyfunction]
#[pyo3(signature = (actual, predicted, signed_mean=false))]
fn residual_network(actual: &PyBrainNetwork, predicted: &PyBrainNetwork, signed_mean: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let how = if signed_mean { Averaging::SignedMean } else { Averaging::MeanAbs };
    let r = interpret::residual_network(&actual.inner, &predicted.inner, how).py()?;
    Ok((r.edge, r.node))
}

#[pyfunction]
#[pyo3(signature = (edge_residuals, fraction=0.05))]
fn rank_edges(edge_residuals: Vec<f64>, fraction: f64) -> PyResult<Vec<usize>> {
    let r = interpret::ResidualNetwork {
        edge: edge_residuals,
        node: Vec::new(),
        subject_id: String::new(),
        visits: (0, 0),
    };
    interpret::rank_edges(&r, fraction).py()
}

/// Confusion counts and ratios as a JSON string; undefined ratios are the
/// string `"undefined"`.
#[pyfunction]
#[pyo3(signature = (predictions, labels, threshold=0.5))]
fn compute_metrics(predictions: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<String> {
    to_json(&harness::compute_metrics(&predictions, &labels, threshold).py()?)
}

#[pyfunction]
fn kfold_split(labels: Vec<bool>, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    harness::kfold_split(&labels, k, seed).py()
}

/// Brain-network trajectory pipeline.
#[pymodule]
mod trajnet {
    #[pymodule_export]
    use super::{
        compute_metrics, compute_residual, contrastive_loss, generate_cohort, kfold_split, load_dataset, one_hot_gap,
        pad_and_sample, rank_edges, residual_network, DependencyError, NumericalError, PyAgingVae, PyBrainNetwork,
        PyCohort, PyConversionModel, PyGraphEncoder, PyRunConfig, PySubject, PyWorkspace, StateError, TrajnetError,
        ValidationError,
    };
}
