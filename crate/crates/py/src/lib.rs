//! Python module `lidet`: scene generation, geometry, matching, models and the command line.

use std::path::{Path, PathBuf};

use clap::Parser;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lidet::harness::{Cli, RunConfig};
use lidet::scenegen::{Box3D, PointCloud};
use lidet::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::Checkpoint { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A 3D box: centre, (length, width, height), yaw, BEV velocity and class index.
#[pyclass(name = "Box3D", module = "lidet", from_py_object)]
#[derive(Clone)]
struct PyBox3D {
    inner: Box3D,
}

#[pymethods]
impl PyBox3D {
    #[new]
    #[pyo3(signature = (center, size, yaw, velocity = [0.0, 0.0], class_id = 0))]
    fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2], class_id: usize) -> PyResult<Self> {
        Ok(Self {
            inner: Box3D::new(center, size, yaw, velocity, class_id).map_err(to_py)?,
        })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.inner.size
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.inner.yaw
    }

    #[getter]
    fn velocity(&self) -> [f64; 2] {
        self.inner.velocity
    }

    #[getter]
    fn class_id(&self) -> usize {
        self.inner.class_id
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!(
            "Box3D(center={:?}, size={:?}, yaw={}, velocity={:?}, class_id={})",
            b.center, b.size, b.yaw, b.velocity, b.class_id
        )
    }
}

fn wrap_boxes(boxes: Vec<Box3D>) -> Vec<PyBox3D> {
    boxes.into_iter().map(|inner| PyBox3D { inner }).collect()
}

/// Run configuration loaded from TOML.
#[pyclass(name = "RunConfig", module = "lidet", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults when `path` is omitted. Relative paths resolve against the file's directory.
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text, Path::new("<string>")).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names()
    }
}

/// Seeded synthetic scene: `(points as [x, y, z, intensity] rows, boxes)`.
#[pyfunction]
#[pyo3(signature = (seed, config = None))]
fn generate_scene(seed: u64, config: Option<&PyRunConfig>) -> PyResult<(Vec<[f32; 4]>, Vec<PyBox3D>)> {
    let scene_cfg = config.map_or_else(|| RunConfig::default().scene, |c| c.inner.scene.clone());
    let s = lidet::scenegen::generate_scene(seed, &scene_cfg).map_err(to_py)?;
    Ok((s.cloud.points, wrap_boxes(s.boxes)))
}

#[pyfunction]
fn read_cloud(path: PathBuf) -> PyResult<Vec<[f32; 4]>> {
    Ok(lidet::scenegen::read_cloud(&path).map_err(to_py)?.points)
}

#[pyfunction]
fn write_cloud(path: PathBuf, points: Vec<[f32; 4]>) -> PyResult<()> {
    let pc = PointCloud::new(points).map_err(to_py)?;
    lidet::scenegen::write_cloud(&path, &pc).map_err(to_py)
}

/// Rotated bird's-eye-view IoU of two boxes.
#[pyfunction]
fn rotated_bev_iou(a: &PyBox3D, b: &PyBox3D) -> PyResult<f64> {
    lidet::evalkit::rotated_bev_iou(&a.inner, &b.inner).map_err(to_py)
}

/// Minimum-cost assignment for a cost matrix with one row per ground truth and one column
/// per prediction. Returns `(prediction, ground_truth)` pairs.
#[pyfunction]
fn hungarian_match(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("cost rows must have equal length"));
    }
    let flat: Vec<f64> = cost.into_iter().flatten().collect();
    Ok(lidet::setloss::hungarian_match(&flat, m, n).map_err(to_py)?.pairs)
}

#[pyfunction]
#[pyo3(signature = (logit, target, alpha = 0.25, gamma = 2.0))]
fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    lidet::setloss::focal_loss(logit, target, alpha, gamma)
}

/// Detector built from a config, optionally with checkpoint weights.
#[pyclass(name = "Model", module = "lidet")]
struct PyModel {
    inner: lidet::harness::Model,
    seed: u64,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, checkpoint = None))]
    fn new(config: &PyRunConfig, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let cfg = &config.inner;
        let inner = match checkpoint {
            Some(p) => lidet::harness::load_model(cfg, &p),
            None => lidet::harness::Model::new(&cfg.model, cfg.class_names().len(), cfg.seed),
        }
        .map_err(to_py)?;
        Ok(Self { inner, seed: cfg.seed })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.store.names().to_vec()
    }

    /// Top-`topk` detections of the last decoder layer as `(box, score)`, best first.
    #[pyo3(signature = (points, topk = 300))]
    fn detect(&self, py: Python<'_>, points: Vec<[f32; 4]>, topk: usize) -> PyResult<Vec<(PyBox3D, f64)>> {
        let pc = PointCloud::new(points).map_err(to_py)?;
        let dets = py
            .detach(|| {
                let input = self.inner.prepare(&pc, lidet::harness::train::prepare_seed(self.seed, 0))?;
                self.inner.detect(&input, topk)
            })
            .map_err(to_py)?;
        Ok(dets.into_iter().map(|d| (PyBox3D { inner: d.bbox }, d.score)).collect())
    }
}

/// Runs one `lidet` command line, e.g. `run_cli(["--config", "x.toml", "train"])`.
/// Returns the main output path.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    let cli = Cli::try_parse_from(std::iter::once("lidet".to_string()).chain(args)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let path = py.detach(|| lidet::harness::run(&cli)).map_err(to_py)?;
    Ok(path.display().to_string())
}

#[pymodule]
#[pyo3(name = "lidet")]
fn lidet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox3D>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(read_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(write_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(rotated_bev_iou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_match, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
