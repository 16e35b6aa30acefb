//! Python bindings for terradyn.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use terradyn::bench::{self, EvalOptions, StateGroup};
use terradyn::dataio::{self, SyntheticConfig};
use terradyn::energy::{self, FeatureSelection};
use terradyn::learn::{self, PatchSpec, TrainConfig};
use terradyn::rollout::RolloutConfig;
use terradyn::{Dynamics, ModelKind};

fn py_err(e: terradyn::Error) -> PyErr {
    let msg = format!("{}: {}", e.class().name(), e);
    match e {
        terradyn::Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn model_kind(name: &str) -> PyResult<ModelKind> {
    name.parse().map_err(py_err)
}

fn state_group(name: &str) -> PyResult<StateGroup> {
    name.parse().map_err(py_err)
}

#[pyclass(name = "VehicleParams", from_py_object)]
#[derive(Clone)]
struct PyParams(terradyn::VehicleParams);

#[pymethods]
impl PyParams {
    #[new]
    fn new() -> Self {
        Self(terradyn::VehicleParams::default())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        terradyn::VehicleParams::load(&path).map(Self).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(py_err)
    }

    #[getter]
    fn wheelbase(&self) -> f64 {
        self.0.wheelbase()
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.0.mass
    }
    #[setter]
    fn set_mass(&mut self, v: f64) {
        self.0.mass = v;
    }
    #[getter]
    fn friction(&self) -> f64 {
        self.0.friction
    }
    #[setter]
    fn set_friction(&mut self, v: f64) {
        self.0.friction = v;
    }
    #[getter]
    fn front_axle_distance(&self) -> f64 {
        self.0.front_axle_distance
    }
    #[setter]
    fn set_front_axle_distance(&mut self, v: f64) {
        self.0.front_axle_distance = v;
    }
    #[getter]
    fn rear_axle_distance(&self) -> f64 {
        self.0.rear_axle_distance
    }
    #[setter]
    fn set_rear_axle_distance(&mut self, v: f64) {
        self.0.rear_axle_distance = v;
    }
    #[getter]
    fn max_steering(&self) -> f64 {
        self.0.max_steering
    }
    #[setter]
    fn set_max_steering(&mut self, v: f64) {
        self.0.max_steering = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "VehicleParams(mass={}, friction={}, wheelbase={})",
            self.0.mass,
            self.0.friction,
            self.0.wheelbase()
        )
    }
}

#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(terradyn::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataio::load_trajectory(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataio::save_trajectory(&self.0, &path).map_err(py_err)
    }

    fn to_text(&self) -> PyResult<String> {
        dataio::trajectory_to_text(&self.0).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn times(&self) -> Vec<f64> {
        self.0.states.iter().map(|s| s.time).collect()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.states.iter().map(|s| s.position.into()).collect()
    }

    /// Roll, pitch, yaw per state.
    fn euler(&self) -> Vec<[f64; 3]> {
        self.0
            .states
            .iter()
            .map(|s| {
                let e = s.euler();
                [e.roll, e.pitch, e.yaw]
            })
            .collect()
    }

    fn velocities(&self) -> Vec<[f64; 3]> {
        self.0.states.iter().map(|s| s.body_velocity.into()).collect()
    }

    fn angular_velocities(&self) -> Vec<[f64; 3]> {
        self.0.states.iter().map(|s| s.body_angular_velocity.into()).collect()
    }

    fn accelerations(&self) -> Vec<[f64; 3]> {
        self.0.states.iter().map(|s| s.body_acceleration.into()).collect()
    }

    /// Steering and wheel speed per step.
    fn controls(&self) -> Vec<[f64; 2]> {
        self.0.controls.iter().map(|u| [u.steering, u.wheel_speed]).collect()
    }

    /// Copy with every body acceleration multiplied by `factor`.
    fn scaled_acceleration(&self, factor: f64) -> Self {
        let mut t = self.0.clone();
        t.states.iter_mut().for_each(|s| s.body_acceleration *= factor);
        Self(t)
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(id={:?}, states={}, dt={})", self.0.id, self.0.len(), self.0.dt)
    }
}

#[pyclass(name = "ElevationMap", from_py_object)]
#[derive(Clone)]
struct PyMap(terradyn::ElevationMap);

#[pymethods]
impl PyMap {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        terradyn::ElevationMap::load(&path).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (origin_x, origin_y, resolution, width, height, level=0.0))]
    fn flat(origin_x: f64, origin_y: f64, resolution: f64, width: usize, height: usize, level: f64) -> PyResult<Self> {
        let origin = nalgebra::Vector2::new(origin_x, origin_y);
        terradyn::ElevationMap::flat(origin, resolution, width, height, level)
            .map(Self)
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_binary(&path).map_err(py_err)
    }

    fn height_at(&self, x: f64, y: f64) -> PyResult<f64> {
        self.0.height_at(nalgebra::Vector2::new(x, y)).map_err(py_err)
    }

    fn surface_normal(&self, x: f64, y: f64) -> PyResult<[f64; 3]> {
        self.0
            .surface_normal(nalgebra::Vector2::new(x, y))
            .map(Into::into)
            .map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.0.resolution()
    }
}

#[pyclass(name = "Weights", from_py_object)]
#[derive(Clone)]
struct PyWeights(learn::MlpWeights);

#[pymethods]
impl PyWeights {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        learn::MlpWeights::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }
}

#[pyclass(name = "EnergyModel", from_py_object)]
#[derive(Clone)]
struct PyEnergy(energy::EnergyModel);

#[pymethods]
impl PyEnergy {
    /// Fits per-feature Gaussians to a set of trajectories.
    #[staticmethod]
    #[pyo3(signature = (trajectories, components=vec![0, 1, 2], temperature=energy::DEFAULT_TEMPERATURE))]
    fn fit(trajectories: Vec<PyTrajectory>, components: Vec<usize>, temperature: f64) -> PyResult<Self> {
        let ts: Vec<_> = trajectories.into_iter().map(|t| t.0).collect();
        let sel = FeatureSelection::new(components).map_err(py_err)?;
        energy::fit(&ts, &sel, temperature).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        energy::EnergyModel::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataio::write_atomic(&path, self.0.to_text().as_bytes()).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn energy(&self, trajectory: &PyTrajectory) -> PyResult<f64> {
        energy::energy(&self.0, &trajectory.0).map_err(py_err)
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.0.temperature
    }

    /// (mean, variance) per feature.
    fn gaussians(&self) -> Vec<(f64, f64)> {
        self.0.gaussians.iter().map(|g| (g.mean, g.variance)).collect()
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset(dataio::SyntheticDataset);

#[pymethods]
impl PyDataset {
    #[getter]
    fn map(&self) -> PyMap {
        PyMap(self.0.map.clone())
    }

    #[getter]
    fn trajectories(&self) -> Vec<PyTrajectory> {
        self.0.trajectories.iter().cloned().map(PyTrajectory).collect()
    }

    /// Writes the dataset and returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        dataio::save_dataset(&dir, &self.0.manifest, &self.0.map, &self.0.trajectories).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.trajectories.len()
    }
}

/// Generates a synthetic map and Slip3D-driven trajectories.
#[pyfunction]
#[pyo3(signature = (seed, trajectories=60, horizon=4.0, speed_scale=1.0, steering_scale=1.0, noise=true, truth_params=None, dataset_id="nominal"))]
#[allow(clippy::too_many_arguments)]
fn generate(
    seed: u64,
    trajectories: usize,
    horizon: f64,
    speed_scale: f64,
    steering_scale: f64,
    noise: bool,
    truth_params: Option<PyParams>,
    dataset_id: &str,
) -> PyResult<PyDataset> {
    let mut cfg = SyntheticConfig::nominal().scaled(dataset_id, speed_scale, steering_scale);
    cfg.trajectory_count = trajectories;
    cfg.horizon_s = horizon;
    if !noise {
        cfg.noise = dataio::ProcessNoise::none();
    }
    if let Some(p) = truth_params {
        cfg.truth_params = p.0;
    }
    dataio::generate_synthetic(seed, &cfg).map(PyDataset).map_err(py_err)
}

/// Loads a dataset manifest; returns (map, trajectories).
#[pyfunction]
#[pyo3(signature = (manifest, split=None))]
fn load_dataset(manifest: PathBuf, split: Option<&str>) -> PyResult<(PyMap, Vec<PyTrajectory>)> {
    let split = split.map(|s| s.parse()).transpose().map_err(py_err)?;
    let d = dataio::load_dataset(&manifest, split).map_err(py_err)?;
    Ok((PyMap(d.map), d.trajectories.into_iter().map(PyTrajectory).collect()))
}

/// Open-loop rollout from the first state of `trajectory`, replaying its controls.
#[pyfunction]
#[pyo3(signature = (model, trajectory, map, params=None, weights=None, substeps=1))]
fn rollout(
    model: &str,
    trajectory: &PyTrajectory,
    map: &PyMap,
    params: Option<PyParams>,
    weights: Option<PyWeights>,
    substeps: usize,
) -> PyResult<PyTrajectory> {
    let kind = model_kind(model)?;
    let dynamics = Dynamics::new(kind, weights.as_ref().map(|w| &w.0)).map_err(py_err)?;
    let params = params.map(|p| p.0).unwrap_or_default();
    terradyn::rollout::rollout(&dynamics, &trajectory.0, &map.0, &params, &RolloutConfig { substeps })
        .map(|r| PyTrajectory(r.predicted))
        .map_err(py_err)
}

/// Horizon max normed error for one state group.
#[pyfunction]
fn hmne(pred: &PyTrajectory, gt: &PyTrajectory, group: &str) -> PyResult<f64> {
    bench::hmne(&pred.0, &gt.0, state_group(group)?).map_err(py_err)
}

type ReportCells = BTreeMap<String, BTreeMap<String, (f64, f64, usize)>>;

/// Benchmarks models and returns {model: {group: (mean, std, count)}}.
#[pyfunction]
#[pyo3(signature = (models, trajectories, map, params=None, weights=None, jobs=1))]
fn evaluate(
    models: Vec<String>,
    trajectories: Vec<PyTrajectory>,
    map: &PyMap,
    params: Option<PyParams>,
    weights: Option<PyWeights>,
    jobs: usize,
) -> PyResult<ReportCells> {
    let kinds = models.iter().map(|m| model_kind(m)).collect::<PyResult<Vec<_>>>()?;
    let ts: Vec<_> = trajectories.into_iter().map(|t| t.0).collect();
    let params = params.map(|p| p.0).unwrap_or_default();
    let opts = EvalOptions {
        jobs,
        ..EvalOptions::default()
    };
    let report = bench::evaluate("python", &kinds, &ts, &map.0, &params, weights.as_ref().map(|w| &w.0), &opts)
        .map_err(py_err)?;
    Ok(report
        .rows
        .iter()
        .map(|row| {
            let cells = StateGroup::ALL
                .iter()
                .map(|&g| {
                    let c = row.cell(g);
                    (g.key().to_string(), (c.mean, c.std, c.count))
                })
                .collect();
            (row.model.name().to_string(), cells)
        })
        .collect())
}

/// Trains the learned model on single-step transitions; returns (weights, validation losses).
#[pyfunction]
#[pyo3(signature = (trajectories, map, epochs=200, learning_rate=1e-3, hidden=vec![64, 64], patch_size=15, patch_resolution=0.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    trajectories: Vec<PyTrajectory>,
    map: &PyMap,
    epochs: usize,
    learning_rate: f64,
    hidden: Vec<usize>,
    patch_size: usize,
    patch_resolution: f64,
    seed: u64,
) -> PyResult<(PyWeights, Vec<f64>)> {
    let ts: Vec<_> = trajectories.into_iter().map(|t| t.0).collect();
    let patch = PatchSpec {
        size: patch_size,
        resolution: patch_resolution,
    };
    let samples = learn::transition_samples(&ts, &map.0, patch).map_err(py_err)?;
    let cfg = TrainConfig {
        epochs,
        learning_rate,
        hidden,
        seed,
        ..TrainConfig::default()
    };
    let (w, h) = learn::train(&samples, &cfg, patch).map_err(py_err)?;
    let losses = std::iter::once(&h.initial).chain(&h.epochs).map(|e| e.validation).collect();
    Ok((PyWeights(w), losses))
}

/// Least-squares cubic through (x, y); coefficients in ascending order.
#[pyfunction]
fn trend(x: Vec<f64>, y: Vec<f64>) -> PyResult<[f64; 4]> {
    if x.len() != y.len() {
        return Err(py_err(terradyn::Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        }));
    }
    let pts: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    bench::trend(&pts).map(|f| f.coefficients).map_err(py_err)
}

#[pyfunction]
fn wrap_angle(a: f64) -> f64 {
    terradyn::wrap_angle(a)
}

#[pymodule]
#[pyo3(name = "terradyn")]
fn terradyn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyMap>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyEnergy>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(hmne, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(trend, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    Ok(())
}
