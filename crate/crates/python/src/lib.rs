//! Python bindings: mixture math, flow files, homographies, synthetic
//! samples, the trained model and the flow metrics.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use uncertflow::datagen::{generate_sample, sample_rng, GenConfig};
use uncertflow::inference::{self, InferenceConfig};
use uncertflow::model::network::{ModelConfig, ModelWeights};
use uncertflow::model::train::{load_checkpoint, save_checkpoint};
use uncertflow::{io, metrics, mixture, ConstraintSpec, Error, FlowField, Homography, Image, Mask, MixtureParams};

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        "io" | "format" | "dataset" => PyIOError::new_err(e.to_string()),
        "numeric" => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows<T> = Vec<Vec<T>>;

fn image_from_rows(rows: Rows<Vec<f64>>) -> PyResult<Image> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    let c = rows.first().and_then(|r| r.first()).map_or(0, |p| p.len());
    if h == 0 || w == 0 || c == 0 {
        return Err(PyValueError::new_err("image must be a non-empty H x W x C nested list"));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for row in &rows {
        if row.len() != w {
            return Err(PyValueError::new_err("ragged image rows"));
        }
        for px in row {
            if px.len() != c {
                return Err(PyValueError::new_err("ragged image channels"));
            }
            data.extend_from_slice(px);
        }
    }
    Image::from_vec(w, h, c, data).map_err(to_py)
}

fn image_to_rows(im: &Image) -> Rows<Vec<f64>> {
    (0..im.height())
        .map(|y| (0..im.width()).map(|x| im.pixel(x, y).to_vec()).collect())
        .collect()
}

fn map_to_rows(im: &Image) -> Rows<f64> {
    (0..im.height()).map(|y| (0..im.width()).map(|x| im.get(x, y, 0)).collect()).collect()
}

fn mask_to_rows(m: &Mask) -> Rows<bool> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(x, y)).collect()).collect()
}

/// Constrained mixture of Laplace components over a 2D flow vector.
#[pyclass(name = "Mixture", module = "uncertflow_py", skip_from_py_object)]
#[derive(Clone)]
struct PyMixture {
    inner: MixtureParams,
}

#[pymethods]
impl PyMixture {
    #[new]
    #[pyo3(signature = (mu, logits, raw_scales, bounds=None))]
    fn new(mu: [f64; 2], logits: Vec<f64>, raw_scales: Vec<f64>, bounds: Option<Vec<(f64, f64)>>) -> PyResult<Self> {
        let spec = match bounds {
            Some(b) => ConstraintSpec::new(b).map_err(to_py)?,
            None => ConstraintSpec::default_for_image(64, 64),
        };
        let inner = MixtureParams::new(mu, logits, raw_scales, spec).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn density(&self, y: [f64; 2]) -> f64 {
        mixture::density(y, &self.inner)
    }

    fn nll(&self, y: [f64; 2]) -> f64 {
        mixture::nll(y, &self.inner)
    }

    /// Probability mass in the L-infinity box of radius `r` around the mean.
    fn confidence(&self, r: f64) -> f64 {
        mixture::confidence_pr(&self.inner, r)
    }

    fn variance(&self) -> f64 {
        mixture::mixture_variance(&self.inner)
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights()
    }

    fn variances(&self) -> Vec<f64> {
        self.inner.variances()
    }
}

/// Dense flow field with a validity mask.
#[pyclass(name = "Flow", module = "uncertflow_py", from_py_object)]
#[derive(Clone)]
struct PyFlow {
    inner: FlowField,
}

#[pymethods]
impl PyFlow {
    #[staticmethod]
    fn zeros(width: usize, height: usize) -> Self {
        Self {
            inner: FlowField::zeros(width, height),
        }
    }

    /// From an H x W list of `(u, v)` pairs; non-finite entries are invalid.
    #[staticmethod]
    fn from_rows(rows: Rows<[f64; 2]>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("ragged flow rows"));
        }
        let vectors: Vec<[f64; 2]> = rows.into_iter().flatten().collect();
        let valid = vectors.iter().map(|v| v[0].is_finite() && v[1].is_finite()).collect();
        let vectors = vectors.into_iter().map(|v| if v[0].is_finite() && v[1].is_finite() { v } else { [0.0; 2] }).collect();
        FlowField::from_parts(w, h, vectors, valid).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: std::path::PathBuf) -> PyResult<Self> {
        io::read_flo(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn write(&self, path: std::path::PathBuf) -> PyResult<()> {
        io::write_flo(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<Option<[f64; 2]>> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err("pixel outside the field"));
        }
        Ok(self.inner.is_valid(x, y).then(|| self.inner.get(x, y)))
    }

    /// H x W list of `(u, v)`, NaN where invalid.
    fn to_rows(&self) -> Rows<[f64; 2]> {
        (0..self.inner.height())
            .map(|y| {
                (0..self.inner.width())
                    .map(|x| if self.inner.is_valid(x, y) { self.inner.get(x, y) } else { [f64::NAN; 2] })
                    .collect()
            })
            .collect()
    }

    /// Mean endpoint error against `gt` over its valid pixels.
    fn aepe(&self, gt: &PyFlow) -> PyResult<f64> {
        metrics::aepe(&self.inner, &gt.inner, &gt.inner.valid_mask()).map_err(to_py)
    }

    /// Percentage of valid pixels with endpoint error at most `t`.
    fn pck(&self, gt: &PyFlow, t: f64) -> PyResult<f64> {
        metrics::pck(&self.inner, &gt.inner, t, &gt.inner.valid_mask()).map_err(to_py)
    }

    fn fl(&self, gt: &PyFlow) -> PyResult<f64> {
        metrics::fl(&self.inner, &gt.inner, &gt.inner.valid_mask()).map_err(to_py)
    }
}

#[pyclass(name = "Homography", module = "uncertflow_py", skip_from_py_object)]
#[derive(Clone)]
struct PyHomography {
    inner: Homography,
}

#[pymethods]
impl PyHomography {
    #[new]
    fn new(rows: [[f64; 3]; 3]) -> PyResult<Self> {
        let m = nalgebra_matrix(rows);
        Homography::new(m).map(|inner| Self { inner }).map_err(to_py)
    }

    /// Least-squares DLT from point correspondences.
    #[staticmethod]
    fn fit(src: Vec<[f64; 2]>, dst: Vec<[f64; 2]>) -> PyResult<Self> {
        Homography::from_correspondences(&src, &dst).map(|inner| Self { inner }).map_err(to_py)
    }

    fn apply(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        self.inner.apply(x, y)
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let m = self.inner.matrix();
        [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)]))
    }

    /// Flow `H(x) - x` on a `width x height` grid.
    fn to_flow(&self, width: usize, height: usize) -> PyResult<PyFlow> {
        uncertflow::geometry::homography_to_flow(&self.inner, width, height)
            .map(|inner| PyFlow { inner })
            .map_err(to_py)
    }
}

fn nalgebra_matrix(rows: [[f64; 3]; 3]) -> uncertflow::geometry::Matrix3<f64> {
    uncertflow::geometry::Matrix3::from_fn(|r, c| rows[r][c])
}

/// One synthetic training pair.
#[pyclass(name = "Sample", module = "uncertflow_py", get_all)]
struct PySample {
    query: Rows<Vec<f64>>,
    reference: Rows<Vec<f64>>,
    flow: PyFlow,
    inj_mask: Rows<bool>,
    occ_mask: Rows<bool>,
}

/// Generates sample `index` of the dataset with the given seed.
#[pyfunction]
#[pyo3(signature = (seed, index, width=64, height=64))]
fn synthetic_sample(seed: u64, index: u64, width: usize, height: usize) -> PyResult<PySample> {
    let mut cfg = GenConfig::default();
    cfg.base.width = width;
    cfg.base.height = height;
    cfg.base.margin = width.min(height) / 4;
    let pack = generate_sample(&cfg, &[], &mut sample_rng(seed, index)).map_err(to_py)?;
    Ok(PySample {
        query: image_to_rows(&pack.query),
        reference: image_to_rows(&pack.reference),
        flow: PyFlow { inner: pack.gt_flow },
        inj_mask: mask_to_rows(&pack.inj_mask),
        occ_mask: mask_to_rows(&pack.occ_mask),
    })
}

/// A trained matcher loaded from a checkpoint.
#[pyclass(name = "Model", module = "uncertflow_py")]
struct PyModel {
    weights: ModelWeights,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(|weights| Self { weights }).map_err(to_py)
    }

    /// Untrained weights for `width x height` inputs.
    #[staticmethod]
    #[pyo3(signature = (width=64, height=64, seed=1))]
    fn init(width: usize, height: usize, seed: u64) -> PyResult<Self> {
        ModelWeights::init(ModelConfig::for_image(width, height), seed)
            .map(|weights| Self { weights })
            .map_err(to_py)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.weights, Default::default()).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Returns `(flow, confidence rows)` for mode "D", "H" or "MS".
    #[pyo3(signature = (query, reference, mode="D", radius=1.0))]
    fn predict(&self, py: Python<'_>, query: Rows<Vec<f64>>, reference: Rows<Vec<f64>>, mode: &str, radius: f64) -> PyResult<(PyFlow, Rows<f64>)> {
        let q = image_from_rows(query)?;
        let r = image_from_rows(reference)?;
        let cfg = InferenceConfig {
            radius,
            ..InferenceConfig::default()
        };
        let w = &self.weights;
        let out = py
            .detach(|| match mode {
                "D" => Ok(inference::infer_direct(&q, &r, w, &cfg)),
                "H" => Ok(inference::infer_multistage_h(&q, &r, w, &cfg)),
                "MS" => Ok(inference::infer_multiscale_ms(&q, &r, w, &cfg)),
                other => Err(other.to_string()),
            })
            .map_err(|m| PyValueError::new_err(format!("unknown mode {m:?}")))?
            .map_err(to_py)?;
        Ok((PyFlow { inner: out.flow }, map_to_rows(&out.confidence)))
    }
}

/// Area under the sparsification error between a ranking and the oracle.
#[pyfunction]
#[pyo3(signature = (errors, uncertainty, steps=50))]
fn ause(errors: Vec<f64>, uncertainty: Vec<f64>, steps: usize) -> PyResult<f64> {
    let c = metrics::sparsification(&errors, &uncertainty, steps).map_err(to_py)?;
    let o = metrics::oracle(&errors, steps).map_err(to_py)?;
    metrics::ause(&c.normalize(), &o.normalize()).map_err(to_py)
}

#[pymodule]
fn uncertflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMixture>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyHomography>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ause, m)?)?;
    Ok(())
}
