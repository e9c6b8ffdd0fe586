//! Python bindings: model construction, checkpoint I/O, inference, synthetic
//! data and the counting metrics.

use std::path::PathBuf;

use htrm::features::generate_synthetic as generate;
use htrm::metrics::{annotations_to_density as to_density, count_from_density as density_count};
use htrm::{checkpoint, CountPair, CycleAnnotation, DensityMap, FeatureSequence, HtrmError, ModelConfig, SyntheticSpec};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: HtrmError) -> PyErr {
    let message = e.to_string();
    match e.root() {
        HtrmError::Io { .. } => PyOSError::new_err(message),
        HtrmError::Numeric(_) => PyArithmeticError::new_err(message),
        _ => PyValueError::new_err(message),
    }
}

fn features(rows: &[Vec<f64>]) -> htrm::Result<FeatureSequence> {
    FeatureSequence::from_rows(rows)
}

fn pairs(truth: &[usize], predicted: &[f64]) -> htrm::Result<Vec<CountPair>> {
    if truth.len() != predicted.len() {
        return Err(HtrmError::usage(format!(
            "{} ground-truth counts but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    Ok(truth.iter().zip(predicted).map(|(&c, &p)| CountPair::new(c, p)).collect())
}

/// Repetition counting model.
#[pyclass(name = "Model", module = "htrm_py")]
struct Model {
    inner: htrm::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (frames = 64, dim = 512, heads = 4, half_window = 2, drop_prob = 0.3, windows = (1, 4, 8), seed = 0))]
    fn new(
        frames: usize,
        dim: usize,
        heads: usize,
        half_window: usize,
        drop_prob: f64,
        windows: (usize, usize, usize),
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            frames,
            dim,
            heads,
            half_window,
            drop_prob,
            windows: [windows.0, windows.1, windows.2],
            ..ModelConfig::default()
        };
        config.validate().map_err(to_py)?;
        let inner = htrm::Model::new(config, seed).map_err(to_py)?;
        Ok(Model { inner })
    }

    /// Loads a checkpoint written by `save` or the `htrm train` command.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.config.frames
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.dim
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.config.heads
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_values()
    }

    /// Per-frame density for a `[frames][dim]` feature list.
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let inner = &self.inner;
        py.detach(|| features(&rows).and_then(|f| inner.predict(&f)))
            .map(|d| d.values)
            .map_err(to_py)
    }

    /// Predicted repetition count, the sum of the density.
    fn count(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(self.predict(py, rows)?.iter().sum())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(frames={}, dim={}, heads={}, half_window={})", c.frames, c.dim, c.heads, c.half_window)
    }
}

/// Synthetic periodic features and their cycle spans `(start, end)`.
#[pyfunction]
#[pyo3(signature = (num_cycles, frames, dim, cycle_min = 3, cycle_max = 16, interruption_prob = 0.1, noise_sigma = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    num_cycles: usize,
    frames: usize,
    dim: usize,
    cycle_min: usize,
    cycle_max: usize,
    interruption_prob: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    let spec = SyntheticSpec {
        num_cycles,
        cycle_length_range: (cycle_min, cycle_max),
        interruption_prob,
        noise_sigma,
        dim,
        frames,
        seed,
    };
    let (f, ann) = generate(&spec).map_err(to_py)?;
    let rows = (0..f.frames()).map(|t| f.frame(t).to_vec()).collect();
    Ok((rows, ann.cycles().to_vec()))
}

/// Ground-truth density whose sum is the number of cycles.
#[pyfunction]
fn annotations_to_density(cycles: Vec<(usize, usize)>, frames: usize) -> PyResult<Vec<f64>> {
    let ann = CycleAnnotation::new(cycles, frames).map_err(to_py)?;
    Ok(to_density(&ann, frames).map_err(to_py)?.values)
}

#[pyfunction]
fn count_from_density(density: Vec<f64>) -> f64 {
    density_count(&DensityMap::new(density))
}

/// Mean of `|c - ĉ| / c`.
#[pyfunction]
fn mae(truth: Vec<usize>, predicted: Vec<f64>) -> PyResult<f64> {
    pairs(&truth, &predicted).and_then(|p| htrm::metrics::mae(&p)).map_err(to_py)
}

/// Fraction of predictions within one count of the truth.
#[pyfunction]
fn obo(truth: Vec<usize>, predicted: Vec<f64>) -> PyResult<f64> {
    pairs(&truth, &predicted).and_then(|p| htrm::metrics::obo(&p)).map_err(to_py)
}

#[pymodule]
fn htrm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(annotations_to_density, m)?)?;
    m.add_function(wrap_pyfunction!(count_from_density, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(obo, m)?)?;
    Ok(())
}
