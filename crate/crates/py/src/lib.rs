//! Python bindings: datasets, perturbations, saliency, the experiment
//! pipeline and the LiDAR power model.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use intact::actstudent::Variant;
use intact::config::ExperimentConfig;
use intact::lidarmodel;
use intact::metateacher::TeacherModel;
use intact::nn::{Checkpoint, Predictor};
use intact::perturb;
use intact::pointcloud::{self, ShapeKind, Split};
use intact::{pipeline, rng, saliency, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "PointCloud", module = "intact_py", from_py_object)]
#[derive(Clone)]
pub struct PyPointCloud {
    inner: pointcloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, label=0, id=0))]
    fn new(points: Vec<[f64; 3]>, label: usize, id: u64) -> Self {
        Self {
            inner: pointcloud::PointCloud::new(points, label, id),
        }
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.clone()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={}, label={}, id={})", self.inner.len(), self.inner.label, self.inner.id)
    }
}

#[pyclass(name = "Dataset", module = "intact_py")]
pub struct PyDataset {
    inner: pointcloud::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        pointcloud::Dataset::load(&dir).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Clouds of `"train"`, `"val"` or `"test"`.
    fn split(&self, name: &str) -> PyResult<Vec<PyPointCloud>> {
        let split: Split = name.parse().map_err(to_py)?;
        Ok(self
            .inner
            .split_owned(split)
            .into_iter()
            .map(|inner| PyPointCloud { inner })
            .collect())
    }
}

#[pyfunction]
#[pyo3(signature = (classes=None, per_class=40, n_points=512, seed=0))]
fn make_dataset(classes: Option<Vec<String>>, per_class: usize, n_points: usize, seed: u64) -> PyResult<PyDataset> {
    let classes = match classes {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<ShapeKind>())
            .collect::<intact::Result<Vec<_>>>()
            .map_err(to_py)?,
        None => ShapeKind::ALL.to_vec(),
    };
    let cfg = pointcloud::DatasetConfig {
        classes,
        per_class,
        n_points,
        seed,
    };
    pointcloud::make_dataset(&cfg).map(|inner| PyDataset { inner }).map_err(to_py)
}

#[pyclass(name = "PerturbationSpec", module = "intact_py", from_py_object)]
#[derive(Clone)]
pub struct PyPerturbationSpec {
    inner: perturb::PerturbationSpec,
}

#[pymethods]
impl PyPerturbationSpec {
    #[new]
    #[pyo3(signature = (drop_fraction=0.0, sigma=0.0, targeted=false))]
    fn new(drop_fraction: f64, sigma: f64, targeted: bool) -> PyResult<Self> {
        let inner = perturb::PerturbationSpec {
            drop_fraction,
            sigma,
            targeted,
            ..perturb::PerturbationSpec::clean()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn drop_fraction(&self) -> f64 {
        self.inner.drop_fraction
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn targeted(&self) -> bool {
        self.inner.targeted
    }

    fn __repr__(&self) -> String {
        format!(
            "PerturbationSpec(drop_fraction={}, sigma={}, targeted={})",
            self.inner.drop_fraction, self.inner.sigma, self.inner.targeted
        )
    }
}

/// Uniform drop then isotropic noise, seeded by `(seed, cloud.id)`.
#[pyfunction]
fn perturb_uniform(cloud: &PyPointCloud, spec: &PyPerturbationSpec, seed: u64) -> PyResult<PyPointCloud> {
    let mut r = rng::stream(seed, "python", &[cloud.inner.id]);
    perturb::perturb_uniform(&cloud.inner, &spec.inner, &mut r)
        .map(|inner| PyPointCloud { inner })
        .map_err(to_py)
}

/// Drop points, targeting the most salient ones when `spec.targeted`.
#[pyfunction]
fn drop_points(cloud: &PyPointCloud, spec: &PyPerturbationSpec, saliency: Vec<f64>, seed: u64) -> PyResult<PyPointCloud> {
    let map = saliency::SaliencyMap::from_scores(saliency).map_err(to_py)?;
    let mut r = rng::stream(seed, "python", &[cloud.inner.id]);
    perturb::drop_points(&cloud.inner, &spec.inner, Some(&map), &mut r)
        .map(|inner| PyPointCloud { inner })
        .map_err(to_py)
}

#[pyclass(name = "Teacher", module = "intact_py")]
pub struct PyTeacher {
    inner: TeacherModel,
}

#[pymethods]
impl PyTeacher {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TeacherModel::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn predict(&self, cloud: &PyPointCloud) -> PyResult<usize> {
        self.inner.predict(&cloud.inner).map_err(to_py)
    }

    /// Per-point saliency for the cloud's own label.
    fn saliency(&self, cloud: &PyPointCloud) -> PyResult<Vec<f64>> {
        saliency::class_saliency(&self.inner, &cloud.inner)
            .map(|m| m.effective_scores())
            .map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }
}

#[pyclass(name = "Student", module = "intact_py")]
pub struct PyStudent {
    inner: Checkpoint,
}

#[pymethods]
impl PyStudent {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn predict(&self, cloud: &PyPointCloud) -> PyResult<usize> {
        self.inner.network.predict(&cloud.inner).map_err(to_py)
    }
}

/// Experiment configuration: defaults, an optional TOML file and
/// `key.path=value` overrides.
#[pyclass(name = "Config", module = "intact_py")]
pub struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::load(path.as_deref(), &overrides)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.paths.out.clone()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn teacher_path(&self) -> PathBuf {
        self.inner.teacher_path()
    }

    fn student_path(&self, variant: &str) -> PyResult<PathBuf> {
        let v: Variant = variant.parse().map_err(to_py)?;
        Ok(pipeline::student_path(&self.inner, v))
    }

    fn gen_data(&self, py: Python<'_>) -> PyResult<PyDataset> {
        py.detach(|| pipeline::gen_data(&self.inner))
            .map(|inner| PyDataset { inner })
            .map_err(to_py)
    }

    #[pyo3(signature = (dump_saliency=false))]
    fn train_teacher(&self, py: Python<'_>, dump_saliency: bool) -> PyResult<PyTeacher> {
        py.detach(|| pipeline::train_teacher(&self.inner, dump_saliency))
            .map(|inner| PyTeacher { inner })
            .map_err(to_py)
    }

    /// Train the named variants (`baseline`, `act`, `intact`; all by default).
    #[pyo3(signature = (variants=None))]
    fn train_students(&self, py: Python<'_>, variants: Option<Vec<String>>) -> PyResult<Vec<String>> {
        let vs = match variants {
            Some(names) => names
                .iter()
                .map(|n| n.parse::<Variant>())
                .collect::<intact::Result<Vec<_>>>()
                .map_err(to_py)?,
            None => Variant::ALL.to_vec(),
        };
        py.detach(|| pipeline::train_students(&self.inner, &vs))
            .map(|done| done.iter().map(|(v, _, _)| v.name().to_string()).collect())
            .map_err(to_py)
    }

    /// Evaluate every model; returns `{condition: {model: (mean, stderr)}}`.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let table = py.detach(|| pipeline::evaluate(&self.inner)).map_err(to_py)?;
        let out = PyDict::new(py);
        for (r, cond) in table.conditions.iter().enumerate() {
            let row = PyDict::new(py);
            for (m, model) in table.models.iter().enumerate() {
                let a = &table.cells[r][m];
                row.set_item(model, (a.mean, a.stderr))?;
            }
            out.set_item(cond, row)?;
        }
        Ok(out)
    }
}

/// Power budget at `range` metres. `params` uses the `key = value` text
/// format of the command line tool; omitted keys keep their defaults.
#[pyfunction]
#[pyo3(signature = (range, params=None))]
fn lidar_budget<'py>(py: Python<'py>, range: f64, params: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: lidarmodel::LidarConfig = match params {
        Some(text) => text.parse().map_err(to_py)?,
        None => lidarmodel::LidarConfig::default(),
    };
    let b = lidarmodel::total_power(&cfg, range).map_err(to_py)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("range", b.range),
        ("p_laser", b.p_laser),
        ("p_scan", b.p_scan),
        ("p_signal", b.p_signal),
        ("p_control", b.p_control),
        ("p_total", b.p_total),
        ("p_adc", b.p_adc),
        ("f_s", b.f_s),
        ("e_pulse_required", b.e_pulse_required),
        ("e_pulse_available", b.e_pulse_available),
        ("delta_r", b.delta_r),
        ("delta_theta", b.delta_theta),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Perturbation severity implied by operating at `range` with a pulse
/// budget sized for `reference_range`.
#[pyfunction]
#[pyo3(signature = (range, reference_range, params=None))]
fn lidar_severity(range: f64, reference_range: f64, params: Option<&str>) -> PyResult<PyPerturbationSpec> {
    let cfg: lidarmodel::LidarConfig = match params {
        Some(text) => text.parse().map_err(to_py)?,
        None => lidarmodel::LidarConfig::default(),
    };
    let at = lidarmodel::total_power(&cfg, range).map_err(to_py)?;
    let reference = lidarmodel::total_power(&cfg, reference_range).map_err(to_py)?;
    Ok(PyPerturbationSpec {
        inner: lidarmodel::severity_from_budget(&at, &reference),
    })
}

#[pymodule]
fn intact_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPerturbationSpec>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyStudent>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(drop_points, m)?)?;
    m.add_function(wrap_pyfunction!(lidar_budget, m)?)?;
    m.add_function(wrap_pyfunction!(lidar_severity, m)?)?;
    Ok(())
}
