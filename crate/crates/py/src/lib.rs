//! Python bindings for the selective-stereo crate.
//!
//! Images and disparity fields cross the boundary as flat row-major
//! `list[float]` plus explicit `(height, width)` arguments, keeping the
//! extension free of array-library dependencies.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use selective_stereo::data::{gen_stereogram, SceneMode};
use selective_stereo::metrics;
use selective_stereo::model::{Model, ModelConfig, Variant};
use selective_stereo::sru;
use selective_stereo::tensor::TensorValue;
use selective_stereo::training;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<TensorValue> {
    if data.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "expected {}x{} = {} values, got {}",
            height,
            width,
            height * width,
            data.len()
        )));
    }
    Ok(TensorValue::new(vec![1, height, width], data))
}

/// A stereo pair with ground truth, as produced by the synthetic generator.
#[pyclass(frozen)]
struct Stereogram {
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    /// Left image, row-major, values in [0, 1].
    #[pyo3(get)]
    left: Vec<f64>,
    /// Right image, row-major, values in [0, 1].
    #[pyo3(get)]
    right: Vec<f64>,
    /// Ground-truth disparity in pixels.
    #[pyo3(get)]
    gt_disparity: Vec<f64>,
    /// Per-pixel validity (False at occlusions).
    #[pyo3(get)]
    valid_mask: Vec<bool>,
}

/// Generates a deterministic random-dot stereogram with ground truth.
///
/// `mode` is one of "planes", "slanted", "dots". Dimensions must be
/// divisible by 32 and `max_disp` must lie in (0, width / 4).
#[pyfunction]
fn generate_stereogram(
    width: usize,
    height: usize,
    max_disp: f64,
    mode: &str,
    seed: u64,
) -> PyResult<Stereogram> {
    let mode = SceneMode::parse(mode)
        .ok_or_else(|| PyValueError::new_err(format!("unknown scene mode {mode:?}")))?;
    let s = gen_stereogram(width, height, max_disp, mode, seed).map_err(err)?;
    Ok(Stereogram {
        height,
        width,
        left: s.left.data,
        right: s.right.data,
        gt_disparity: s.gt_disparity.data,
        valid_mask: s.valid_mask,
    })
}

/// The recurrent stereo disparity estimator.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model.
    ///
    /// `variant` is one of "gru_baseline", "sru_sum", "sru_csa_contrary",
    /// "sru_csa_full".
    #[new]
    #[pyo3(signature = (channels=32, radius=4, kernels=(1, 3), variant="sru_csa_full", csa_ratio=4, sae_kernel=7, seed=0))]
    fn new(
        channels: usize,
        radius: i64,
        kernels: (usize, usize),
        variant: &str,
        csa_ratio: usize,
        sae_kernel: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            channels,
            radius,
            kernels,
            variant: Variant::parse(variant)
                .ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?,
            csa_ratio,
            sae_kernel,
        };
        Ok(PyModel {
            inner: Model::new(cfg, seed).map_err(err)?,
        })
    }

    /// Loads model weights from a training checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (_, model, _, _) = training::restore_checkpoint(path.as_ref()).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    /// Total number of trainable parameters.
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.cfg.variant.as_str()
    }

    /// Predicts a full-resolution disparity field (row-major list) from a
    /// grayscale stereo pair given as flat row-major lists in [0, 1].
    #[pyo3(signature = (left, right, height, width, iters=16))]
    fn predict(
        &self,
        left: Vec<f64>,
        right: Vec<f64>,
        height: usize,
        width: usize,
        iters: usize,
    ) -> PyResult<Vec<f64>> {
        let l = image(left, height, width)?;
        let r = image(right, height, width)?;
        let d = training::predict(&self.inner, &l, &r, iters).map_err(err)?;
        Ok(d.data)
    }
}

/// Mean absolute disparity error over valid pixels.
#[pyfunction]
fn epe(pred: Vec<f64>, gt: Vec<f64>, valid: Vec<bool>) -> PyResult<f64> {
    let n = pred.len();
    let p = TensorValue::new(vec![n], pred);
    let g = TensorValue::new(vec![n], gt);
    metrics::epe(&p, &g, &valid).map_err(err)
}

/// Percentage of valid pixels with error above `threshold` pixels.
#[pyfunction]
fn bad_ratio(pred: Vec<f64>, gt: Vec<f64>, valid: Vec<bool>, threshold: f64) -> PyResult<f64> {
    let n = pred.len();
    let p = TensorValue::new(vec![n], pred);
    let g = TensorValue::new(vec![n], gt);
    metrics::bad_over(&p, &g, &valid, threshold).map_err(err)
}

/// Full evaluation report with an edge / non-edge split driven by a
/// Canny edge map of the left image. Returns a dict.
#[pyfunction]
#[pyo3(signature = (pred, gt, valid, left, height, width, canny_low=0.1, canny_high=0.2))]
#[allow(clippy::too_many_arguments)]
fn region_report<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
    left: Vec<f64>,
    height: usize,
    width: usize,
    canny_low: f64,
    canny_high: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let img = image(left, height, width)?;
    let edges = metrics::canny_edges(&img, canny_low, canny_high).map_err(err)?;
    let n = pred.len();
    let p = TensorValue::new(vec![n], pred);
    let g = TensorValue::new(vec![n], gt);
    let report = metrics::region_metrics(&p, &g, &valid, &edges).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("epe", report.epe)?;
    for (t, v) in &report.bad_over {
        out.set_item(format!("bad_{}px", *t as i64), v)?;
    }
    for (key, region) in [("edge", &report.edge), ("non_edge", &report.non_edge)] {
        match region {
            Some(r) => {
                let d = PyDict::new(py);
                d.set_item("pixels", r.pixels)?;
                d.set_item("epe", r.epe)?;
                d.set_item("bad_1px", r.bad_1px)?;
                out.set_item(key, d)?;
            }
            None => out.set_item(key, py.None())?,
        }
    }
    Ok(out)
}

/// Receptive-field width of a recurrent unit with square kernel `kernel`
/// operating at pyramid level `level` (0 = 1/4, 1 = 1/8, 2 = 1/16).
#[pyfunction]
fn receptive_field(level: usize, kernel: usize) -> PyResult<usize> {
    if level > 2 || kernel.is_multiple_of(2) {
        return Err(PyValueError::new_err(
            "level must be 0..=2 and kernel odd",
        ));
    }
    Ok(sru::level_receptive_field(level, kernel))
}

/// The six (level, kernel, field) receptive fields of a dual-kernel stack.
#[pyfunction]
fn dual_kernel_fields(small: usize, large: usize) -> PyResult<Vec<(usize, usize, usize)>> {
    if small.is_multiple_of(2) || large.is_multiple_of(2) || small >= large {
        return Err(PyValueError::new_err(
            "kernels must be odd with small < large",
        ));
    }
    Ok(sru::dual_kernel_fields(small, large).to_vec())
}

#[pymodule]
fn selective_stereo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Stereogram>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_stereogram, m)?)?;
    m.add_function(wrap_pyfunction!(epe, m)?)?;
    m.add_function(wrap_pyfunction!(bad_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(region_report, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(dual_kernel_fields, m)?)?;
    Ok(())
}
