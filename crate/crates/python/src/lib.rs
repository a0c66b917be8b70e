//! Python bindings: strokes, canvases, the reference renderer, stroke
//! matching, synthetic samples, training, painting and plan replay.

use std::path::PathBuf;

use candle_core::Device;
use dqpaint::checkpoint;
use dqpaint::inference::{self, PaintOptions};
use dqpaint::losses::{gaussian::gaussian_wasserstein, matching::match_strokes};
use dqpaint::render::{self, Brush};
use dqpaint::synthesis::{sample_with_seed, SynthConfig};
use dqpaint::training::{self, TrainConfig};
use dqpaint::{CanvasImage, Error, StrokeParams, StrokeSet};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py<T>(r: dqpaint::Result<T>) -> PyResult<T> {
    r.map_err(|e| match e {
        Error::Io(_) | Error::Checkpoint { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    })
}

/// One brush stroke: centre, extent, rotation and colour, all in `[0, 1]`.
#[pyclass(name = "Stroke", module = "dqpaint", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyStroke {
    inner: StrokeParams,
}

#[pymethods]
impl PyStroke {
    #[new]
    #[allow(clippy::too_many_arguments)]
    fn new(x: f64, y: f64, h: f64, w: f64, theta: f64, r: f64, g: f64, b: f64) -> PyResult<Self> {
        let inner = StrokeParams::new(x, y, h, w, theta, r, g, b);
        py(inner.validate())?;
        Ok(Self { inner })
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.to_array().to_vec()
    }

    fn __repr__(&self) -> String {
        let v = self.inner.to_array();
        format!(
            "Stroke(x={:.4}, y={:.4}, h={:.4}, w={:.4}, theta={:.4}, r={:.4}, g={:.4}, b={:.4})",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
        )
    }
}

/// An RGB image with values in `[0, 1]`.
#[pyclass(name = "Canvas", module = "dqpaint", from_py_object)]
#[derive(Clone)]
pub struct PyCanvas {
    inner: CanvasImage,
}

#[pymethods]
impl PyCanvas {
    #[staticmethod]
    fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            inner: CanvasImage::filled(height, width, value),
        }
    }

    /// Row-major `height x width x 3` floats.
    #[staticmethod]
    fn from_list(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: py(CanvasImage::from_vec(height, width, data))?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: py(CanvasImage::load(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        py(self.inner.save(&path))
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn mean_abs_diff(&self, other: &PyCanvas) -> PyResult<f64> {
        py(self.inner.mean_abs_diff(&other.inner))
    }

    fn max_abs_diff(&self, other: &PyCanvas) -> PyResult<f64> {
        py(self.inner.max_abs_diff(&other.inner))
    }

    /// Composites one stroke in place.
    #[pyo3(signature = (stroke, confidence = 1.0))]
    fn paint(&mut self, stroke: &PyStroke, confidence: f64) -> PyResult<()> {
        py(render::paint_stroke(
            &mut self.inner,
            &stroke.inner,
            confidence,
            &Brush::Plain,
        ))
    }

    fn __repr__(&self) -> String {
        format!("Canvas({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Renders `strokes` in order over a copy of `canvas`.
#[pyfunction]
fn render_strokes(canvas: &PyCanvas, strokes: Vec<PyStroke>) -> PyResult<PyCanvas> {
    let set = StrokeSet::with_unit_confidence(strokes.iter().map(|s| s.inner).collect());
    Ok(PyCanvas {
        inner: py(render::render_sequence(&canvas.inner, &set, &Brush::Plain))?,
    })
}

/// Optimal matching of predicted to target strokes. Returns
/// `(assignment, cost)` where `assignment[i]` indexes `predicted`.
#[pyfunction]
fn match_stroke_sets(target: Vec<PyStroke>, predicted: Vec<PyStroke>) -> PyResult<(Vec<usize>, f64)> {
    let t: Vec<_> = target.iter().map(|s| s.inner).collect();
    let p: Vec<_> = predicted.iter().map(|s| s.inner).collect();
    let m = py(match_strokes(&t, &p))?;
    Ok((m.assignment, m.cost))
}

/// Squared 2-Wasserstein distance between the strokes' Gaussians.
#[pyfunction]
fn stroke_wasserstein(u: &PyStroke, v: &PyStroke) -> PyResult<f64> {
    py(gaussian_wasserstein(&u.inner, &v.inner))
}

/// One synthetic training sample: `(canvas, target, strokes, confidences)`.
#[pyfunction]
#[pyo3(signature = (seed, index = 0, patch_size = 32, max_strokes = 8))]
fn synth_sample(
    seed: u64,
    index: usize,
    patch_size: usize,
    max_strokes: usize,
) -> PyResult<(PyCanvas, PyCanvas, Vec<PyStroke>, Vec<f64>)> {
    let cfg = SynthConfig {
        patch_size,
        max_strokes,
        ..SynthConfig::default()
    };
    py(cfg.validate())?;
    let s = py(sample_with_seed(&cfg, seed, index))?;
    let (strokes, conf) = s
        .target_strokes
        .iter()
        .map(|(p, c)| (PyStroke { inner: *p }, c))
        .unzip();
    Ok((
        PyCanvas { inner: s.canvas },
        PyCanvas { inner: s.target },
        strokes,
        conf,
    ))
}

/// Ordered record of accepted strokes; replays into the painting.
#[pyclass(name = "StrokePlan", module = "dqpaint", from_py_object)]
#[derive(Clone)]
pub struct PyStrokePlan {
    inner: inference::StrokePlan,
}

#[pymethods]
impl PyStrokePlan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: py(inference::StrokePlan::load(&path))?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: py(inference::StrokePlan::parse(text, "<string>"))?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        py(self.inner.save(&path))
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size
    }

    #[getter]
    fn scales(&self) -> Vec<usize> {
        self.inner.scales.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.accepted()
    }

    /// `(scale, row, col, stroke, confidence)` tuples in painting order.
    fn strokes(&self) -> Vec<(usize, usize, usize, PyStroke, f64)> {
        self.inner
            .strokes
            .iter()
            .map(|s| (s.scale, s.row, s.col, PyStroke { inner: s.stroke }, s.confidence))
            .collect()
    }

    /// Returns `(canvas, frames)`; frames are empty without a stride.
    #[pyo3(signature = (stride = None))]
    fn replay(&self, stride: Option<usize>) -> PyResult<(PyCanvas, Vec<PyCanvas>)> {
        let r = py(inference::replay(&self.inner, stride, &Brush::Plain))?;
        let frames = r.frames.into_iter().map(|inner| PyCanvas { inner }).collect();
        Ok((PyCanvas { inner: r.canvas }, frames))
    }
}

/// A trained painter loaded from a checkpoint directory.
#[pyclass(name = "Painter", module = "dqpaint")]
pub struct PyPainter {
    ckpt: checkpoint::Checkpoint,
}

#[pymethods]
impl PyPainter {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: py(checkpoint::load(&path, None, &Device::Cpu))?,
        })
    }

    #[getter]
    fn hash(&self) -> String {
        self.ckpt.hash.clone()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.ckpt.manifest.painter.patch_size
    }

    #[getter]
    fn max_strokes(&self) -> usize {
        self.ckpt.manifest.painter.max_strokes
    }

    /// Paints `image` coarse to fine; returns `(painting, plan)`.
    #[pyo3(signature = (image, size = 256, scales = None))]
    fn paint(&self, image: &PyCanvas, size: usize, scales: Option<Vec<usize>>) -> PyResult<(PyCanvas, PyStrokePlan)> {
        let mut opts = PaintOptions::new(size, self.patch_size());
        if let Some(s) = scales {
            opts.scales = s;
        }
        let res = py(inference::paint(
            &image.inner,
            &self.ckpt.painter,
            &opts,
            &self.ckpt.hash,
        ))?;
        Ok((PyCanvas { inner: res.canvas }, PyStrokePlan { inner: res.plan }))
    }
}

/// Trains from the desk preset plus `overrides` (config keys to values) and
/// returns the final checkpoint directory.
#[pyfunction]
#[pyo3(signature = (out, overrides = None))]
fn train(out: PathBuf, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let mut cfg = TrainConfig::desk();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            // Python spells booleans with a capital letter.
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value,
            };
            py(cfg.set(&key, &value))?;
        }
    }
    let summary = py(training::train(cfg, &out, &Device::Cpu))?;
    Ok(summary.final_checkpoint.display().to_string())
}

#[pymodule]
#[pyo3(name = "dqpaint")]
fn dqpaint_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStroke>()?;
    m.add_class::<PyCanvas>()?;
    m.add_class::<PyStrokePlan>()?;
    m.add_class::<PyPainter>()?;
    m.add_function(wrap_pyfunction!(render_strokes, m)?)?;
    m.add_function(wrap_pyfunction!(match_stroke_sets, m)?)?;
    m.add_function(wrap_pyfunction!(stroke_wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
