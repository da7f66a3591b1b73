//! Python bindings: boxes, expected IoU, smooth maxima, box coding, CDR
//! metrics, synthetic samples and per-sample direct optimization.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tightbox::config::RunConfig;
use tightbox::geometry::{BBox, BinaryMask, ClassId, Dims, ProbabilityMap};
use tightbox::smoothmax::{SmoothMaxConfig, SmoothMaxKind};
use tightbox::synth::{self, Sample};
use tightbox::{metrics, oracle, pipeline, regression};

fn to_py(e: tightbox::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(config: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match config {
        Some(text) => RunConfig::from_json(text, Path::new("<config>")).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn parse_class(name: &str) -> PyResult<ClassId> {
    match name {
        "oc" => Ok(ClassId::OC),
        "od" => Ok(ClassId::OD),
        other => Err(PyValueError::new_err(format!("class must be 'oc' or 'od', got {other:?}"))),
    }
}

/// Axis-aligned box with `xl < xr` and `yt < yb`.
#[pyclass(name = "BBox", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyBBox {
    inner: BBox,
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(xl: f64, yt: f64, xr: f64, yb: f64) -> PyResult<Self> {
        BBox::new(xl, yt, xr, yb).map(|inner| PyBBox { inner }).map_err(to_py)
    }

    #[getter]
    fn xl(&self) -> f64 {
        self.inner.xl
    }
    #[getter]
    fn yt(&self) -> f64 {
        self.inner.yt
    }
    #[getter]
    fn xr(&self) -> f64 {
        self.inner.xr
    }
    #[getter]
    fn yb(&self) -> f64 {
        self.inner.yb
    }

    fn width(&self) -> f64 {
        self.inner.width()
    }

    fn height(&self) -> f64 {
        self.inner.height()
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("BBox({}, {}, {}, {})", b.xl, b.yt, b.xr, b.yb)
    }
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    tightbox::iou(&a.inner, &b.inner)
}

/// Closed-form expected IoU at relative position `(r1, r2)`.
#[pyfunction]
fn eiou(r1: f64, r2: f64) -> PyResult<f64> {
    regression::eiou(r1, r2).map_err(to_py)
}

/// Brute-force grid reference for [`eiou`].
#[pyfunction]
#[pyo3(signature = (r1, r2, grid = oracle::DEFAULT_GRID))]
fn eiou_grid(r1: f64, r2: f64, grid: usize) -> f64 {
    oracle::eiou_grid(r1, r2, grid)
}

/// `(value, gradient)` of a smooth maximum; `kind` is "softmax", "quasimax" or "hard".
#[pyfunction]
#[pyo3(signature = (xs, alpha = 8.0, kind = "softmax"))]
fn smooth_max(xs: Vec<f64>, alpha: f64, kind: &str) -> PyResult<(f64, Vec<f64>)> {
    let kind = match kind {
        "softmax" => SmoothMaxKind::AlphaSoftmax,
        "quasimax" => SmoothMaxKind::AlphaQuasimax,
        "hard" => SmoothMaxKind::Hard,
        other => return Err(PyValueError::new_err(format!("unknown smooth-max kind {other:?}"))),
    };
    let cfg = SmoothMaxConfig { kind, alpha };
    cfg.validate().map_err(to_py)?;
    cfg.eval(&xs).map_err(to_py)
}

/// Normalized side distances from `location` to `bbox`.
#[pyfunction]
fn encode_target(location: (f64, f64), bbox: &PyBBox, s: f64) -> [f64; 4] {
    regression::encode_target(location, &bbox.inner, s).0
}

#[pyfunction]
fn decode_box(location: (f64, f64), offsets: [f64; 4], s: f64) -> PyResult<PyBBox> {
    regression::decode_box(location, offsets, s)
        .map(|inner| PyBBox { inner })
        .map_err(to_py)
}

#[pyfunction]
fn cdr_from_boxes(oc: &PyBBox, od: &PyBBox) -> f64 {
    metrics::cdr_from_boxes(&oc.inner, &od.inner)
}

#[pyfunction]
fn cdr_error(pred: f64, truth: f64) -> f64 {
    metrics::cdr_error(pred, truth)
}

#[pyfunction]
#[pyo3(signature = (preds, truths, threshold = metrics::GLAUCOMA_THRESHOLD))]
fn f1_glaucoma(preds: Vec<f64>, truths: Vec<f64>, threshold: f64) -> PyResult<f64> {
    metrics::f1_glaucoma(&preds, &truths, threshold).map_err(to_py)
}

fn mask_from_rows(rows: &[Vec<bool>]) -> PyResult<BinaryMask> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("mask rows have different lengths"));
    }
    Ok(BinaryMask::from_fn(Dims::new(rows.len(), width), |x, y| rows[y][x]))
}

fn mask_to_rows(m: &BinaryMask) -> Vec<Vec<bool>> {
    let d = m.dims();
    (0..d.height).map(|y| (0..d.width).map(|x| m.get(x, y)).collect()).collect()
}

/// Dice coefficient of two masks given as lists of rows.
#[pyfunction]
fn dice(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    metrics::dice(&mask_from_rows(&a)?, &mask_from_rows(&b)?).map_err(to_py)
}

/// One synthetic sample with its ground truth.
#[pyclass(name = "Sample", frozen, skip_from_py_object)]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }
    #[getter]
    fn true_cdr(&self) -> f64 {
        self.inner.true_cdr
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.dims().height
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.dims().width
    }

    /// Tight box of "oc" or "od".
    fn bbox(&self, class: &str) -> PyResult<PyBBox> {
        let c = parse_class(class)?;
        let inner = self.inner.label.first_of(c).expect("synthetic samples carry both classes");
        Ok(PyBBox { inner })
    }

    fn mask(&self, class: &str) -> PyResult<Vec<Vec<bool>>> {
        Ok(mask_to_rows(self.inner.mask(parse_class(class)?)))
    }

    /// Row-major 8-bit grayscale pixels.
    fn image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.image.pixels)
    }
}

/// `n` synthetic samples; `config` is an optional run-configuration JSON string.
#[pyfunction]
#[pyo3(signature = (n, seed = 7, config = None))]
fn generate(py: Python<'_>, n: usize, seed: u64, config: Option<&str>) -> PyResult<Vec<PySample>> {
    let mut cfg = parse_config(config)?;
    cfg.synth.seed = seed;
    let data = py.detach(|| synth::generate(&cfg.synth, n)).map_err(to_py)?;
    Ok(data.samples.into_iter().map(|inner| PySample { inner }).collect())
}

fn planes_to_rows(p: &ProbabilityMap, class: ClassId) -> Vec<Vec<f64>> {
    let d = p.dims();
    (0..d.height).map(|y| (0..d.width).map(|x| p.get(class, x, y)).collect()).collect()
}

/// Optimize one sample and score it. Returns a dict with the trace, the
/// metrics and both probability maps.
#[pyfunction]
#[pyo3(signature = (sample, config = None))]
fn optimize<'py>(py: Python<'py>, sample: &PySample, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config)?;
    let run = py.detach(|| pipeline::run_sample(&sample.inner, &cfg)).map_err(to_py)?;
    let t = &run.result.trace;
    let out = PyDict::new(py);
    out.set_item("steps", t.steps)?;
    out.set_item("stop_reason", format!("{:?}", t.stop_reason))?;
    out.set_item(
        "trace",
        t.rows.iter().map(|r| (r.step, r.total, r.seg, r.reg)).collect::<Vec<_>>(),
    )?;
    let m = &run.metrics;
    out.set_item("cdr_pred", m.cdr_pred)?;
    out.set_item("cdr_true", m.cdr_true)?;
    out.set_item("cdr_error", m.cdr_error)?;
    out.set_item("dice_oc", m.dice_oc)?;
    out.set_item("dice_od", m.dice_od)?;
    out.set_item("box_oc", m.box_oc.map(|inner| PyBBox { inner }))?;
    out.set_item("box_od", m.box_od.map(|inner| PyBBox { inner }))?;
    let p = &run.result.probabilities;
    out.set_item("prob_oc", planes_to_rows(p, ClassId::OC))?;
    out.set_item("prob_od", planes_to_rows(p, ClassId::OD))?;
    Ok(out)
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().resolved().to_json()
}

#[pymodule]
fn tightbox_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PySample>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(eiou, m)?)?;
    m.add_function(wrap_pyfunction!(eiou_grid, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_max, m)?)?;
    m.add_function(wrap_pyfunction!(encode_target, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(cdr_from_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(cdr_error, m)?)?;
    m.add_function(wrap_pyfunction!(f1_glaucoma, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
