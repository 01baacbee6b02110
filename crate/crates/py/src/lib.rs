//! Python bindings: volumes and projections as numpy arrays, the experiment
//! pipeline, trained fields and the metrics.

use std::path::PathBuf;

use naf_core::config::ExperimentConfig;
use naf_core::experiment::{self, Method};
use naf_core::geometry::Aabb;
use naf_core::metrics::{self, SsimParams};
use naf_core::phantom::{ProjectionSet, Volume};
use naf_core::trainer::{extract_volume, Checkpoint};
use naf_core::{io, Error};
use numpy::{IntoPyArray, PyArray1, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Experiment configuration, edited as TOML text.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// The desk benchmark: 64³ Shepp-Logan, 50 views over 180°, 3% noise.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: ExperimentConfig::desk(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(text, &PathBuf::from("<string>")).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.inner.geometry.num_views
    }

    #[setter]
    fn set_num_views(&mut self, n: usize) {
        self.inner.geometry.num_views = n;
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.train.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: usize) {
        self.inner.train.iterations = n;
    }

    #[getter]
    fn noise(&self) -> f64 {
        self.inner.noise.fraction
    }

    #[setter]
    fn set_noise(&mut self, f: f64) {
        self.inner.noise.fraction = f;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, views={}, iterations={})",
            self.inner.seed, self.inner.geometry.num_views, self.inner.train.iterations
        )
    }
}

/// A scalar grid with its physical extent. `array()` is indexed `[z, y, x]`.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    /// Wraps a `[z, y, x]` float32 array spanning `extent_min`..`extent_max` mm.
    #[new]
    #[pyo3(signature = (array, extent_min, extent_max))]
    fn new(array: PyReadonlyArray3<'_, f32>, extent_min: [f64; 3], extent_max: [f64; 3]) -> PyResult<Self> {
        let inner = Volume {
            data: array.as_array().to_owned(),
            extent: Aabb {
                min: extent_min,
                max: extent_max,
            },
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_volume(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_volume(&path, &self.inner).map_err(to_py)
    }

    fn array<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.data.clone().into_pyarray(py)
    }

    /// `[nx, ny, nz]`.
    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        (self.inner.extent.min, self.inner.extent.max)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims())
    }
}

/// Detector intensities, indexed `[view, row, col]`.
#[pyclass(name = "Projections", from_py_object)]
#[derive(Clone)]
struct PyProjections {
    inner: ProjectionSet,
}

#[pymethods]
impl PyProjections {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_projections(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_projections(&path, &self.inner).map_err(to_py)
    }

    fn array<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.images.clone().into_pyarray(py)
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.inner.geometry.num_views
    }

    #[getter]
    fn noise_fraction(&self) -> f64 {
        self.inner.noise_fraction
    }

    fn __repr__(&self) -> String {
        let s = self.inner.images.shape();
        format!("Projections(views={}, rows={}, cols={})", s[0], s[1], s[2])
    }
}

/// A trained attenuation field.
#[pyclass(name = "Field")]
struct PyField {
    inner: Checkpoint,
}

#[pymethods]
impl PyField {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Attenuation at an `(n, 3)` array of positions in mm.
    fn query<'py>(&self, py: Python<'py>, points: PyReadonlyArray2<'py, f32>) -> PyResult<Bound<'py, PyArray1<f32>>> {
        let mu = self.inner.model.query(points.as_array()).map_err(to_py)?;
        Ok(mu.into_pyarray(py))
    }

    /// Samples the field at voxel centres of a `[nx, ny, nz]` grid.
    fn extract(&self, dims: [usize; 3]) -> PyResult<PyVolume> {
        let extent = self.inner.model.extent;
        Ok(PyVolume {
            inner: extract_volume(&self.inner.model, dims, extent).map_err(to_py)?,
        })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model.num_params()
    }
}

/// Returns `(truth, clean, noisy)` for `config`.
#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig) -> PyResult<(PyVolume, PyProjections, PyProjections)> {
    let cfg = config.inner.clone();
    let sim = py.detach(|| experiment::simulate_in_memory(&cfg)).map_err(to_py)?;
    Ok((
        PyVolume { inner: sim.truth },
        PyProjections { inner: sim.clean },
        PyProjections { inner: sim.noisy },
    ))
}

/// Reconstructs with `method` (naf, naf-frequency, fdk or sart). Returns the
/// volume and, for neural methods, the trained field.
#[pyfunction]
#[pyo3(signature = (method, projections, config, truth=None))]
fn reconstruct(
    py: Python<'_>,
    method: &str,
    projections: &PyProjections,
    config: &PyConfig,
    truth: Option<&PyVolume>,
) -> PyResult<(PyVolume, Option<PyField>)> {
    let method: Method = method.parse().map_err(to_py)?;
    let (proj, cfg, truth) = (&projections.inner, &config.inner, truth.map(|t| &t.inner));
    let rec = py
        .detach(|| experiment::reconstruct_in_memory(method, proj, cfg, truth, |_| {}))
        .map_err(to_py)?;
    Ok((
        PyVolume { inner: rec.volume },
        rec.checkpoint.map(|inner| PyField { inner }),
    ))
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn psnr(a: &PyVolume, b: &PyVolume, data_range: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, data_range).map_err(to_py)
}

/// Mean 2D SSIM over axial slices with the default window.
#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn ssim(a: &PyVolume, b: &PyVolume, data_range: f64) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner, data_range, &SsimParams::default()).map_err(to_py)
}

/// Min-max normalises both volumes and returns `(psnr_db, ssim)`.
#[pyfunction]
#[pyo3(signature = (recon, truth, resample=false))]
fn evaluate(recon: &PyVolume, truth: &PyVolume, resample: bool) -> PyResult<(f64, f64)> {
    let r = experiment::evaluate(&recon.inner, &truth.inner, &Default::default(), resample).map_err(to_py)?;
    Ok((r.psnr_db, r.ssim))
}

#[pymodule]
fn naf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyProjections>()?;
    m.add_class::<PyField>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
