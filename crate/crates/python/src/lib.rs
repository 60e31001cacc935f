//! Python bindings. Images, probability maps and masks cross the boundary as
//! row-major lists of rows.

use std::collections::{BTreeMap, HashMap};

use pyo3::exceptions::{PyIOError, PyMemoryError, PyValueError};
use pyo3::prelude::*;

use vesselseg_core::checkpoint;
use vesselseg_core::dataio::{self, SloImage, VesselMask};
use vesselseg_core::error::Error;
use vesselseg_core::eval;
use vesselseg_core::inference::{self, TilingPolicy};
use vesselseg_core::model::{build_unet, UNetConfig, UpsampleMode};
use vesselseg_core::plane::Plane;
use vesselseg_core::train::{dice_focal_loss, LossParams};
use vesselseg_core::vmetrics::{self, FractalOptions};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::OutOfMemory { .. } => PyMemoryError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn plane_from_rows<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Plane<T>> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Plane::from_vec(width, height, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows_of<T: Copy>(plane: &Plane<T>) -> Vec<Vec<T>> {
    (0..plane.height()).map(|y| plane.row(y).to_vec()).collect()
}

/// Mask rows as Python ints; `Vec<u8>` would convert to `bytes`.
fn mask_rows(labels: &Plane<u8>) -> Vec<Vec<u32>> {
    (0..labels.height())
        .map(|y| labels.row(y).iter().map(|&v| u32::from(v)).collect())
        .collect()
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<VesselMask> {
    VesselMask::new(plane_from_rows(rows)?).map_err(to_py)
}

/// A U-Net with its weights.
#[pyclass(name = "Model", module = "vesselseg")]
struct PyModel {
    inner: vesselseg_core::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network.
    #[new]
    #[pyo3(signature = (depth = 4, base_channels = 16, seed = 0, upsample = "transposed"))]
    fn new(depth: usize, base_channels: usize, seed: u64, upsample: &str) -> PyResult<Self> {
        let upsample: UpsampleMode = upsample.parse().map_err(to_py)?;
        let inner = build_unet(&UNetConfig {
            depth,
            base_channels,
            init_seed: seed,
            upsample,
        })
        .map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load_checkpoint(path).map_err(to_py)?,
        })
    }

    /// Writes a checkpoint and returns its id.
    #[pyo3(signature = (path, metadata = None))]
    fn save(&mut self, path: &str, metadata: Option<BTreeMap<String, String>>) -> PyResult<String> {
        let id = checkpoint::save_checkpoint(&self.inner, &metadata.unwrap_or_default(), path).map_err(to_py)?;
        self.inner.set_checkpoint_id(id.clone());
        Ok(id)
    }

    #[getter]
    fn checkpoint_id(&self) -> Option<String> {
        self.inner.checkpoint_id().map(str::to_string)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.config().depth
    }

    /// Vessel probabilities for an image with intensities in [0, 1].
    #[pyo3(signature = (image, tiled = false, tile = 512, overlap = 64))]
    fn segment(
        &self,
        py: Python<'_>,
        image: Vec<Vec<f32>>,
        tiled: bool,
        tile: usize,
        overlap: usize,
    ) -> PyResult<Vec<Vec<f32>>> {
        let image = SloImage::new("array", plane_from_rows(image)?, 8).map_err(to_py)?;
        let map = py
            .detach(|| {
                if tiled {
                    let policy = TilingPolicy {
                        tile_width: tile,
                        tile_height: tile,
                        overlap,
                    };
                    inference::segment_tiled(&self.inner, &image, &policy)
                } else {
                    inference::segment_full(&self.inner, &image)
                }
            })
            .map_err(to_py)?;
        Ok(rows_of(&map.values))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(depth={}, base_channels={}, upsample='{}', parameters={})",
            c.depth,
            c.base_channels,
            c.upsample.as_str(),
            self.inner.parameter_count()
        )
    }
}

/// Grey image scaled to [0, 1].
#[pyfunction]
fn load_image(path: &str) -> PyResult<Vec<Vec<f32>>> {
    Ok(rows_of(dataio::load_image(path).map_err(to_py)?.pixels()))
}

/// Binary mask (nonzero pixels are vessel) as 0/1 rows.
#[pyfunction]
fn load_mask(path: &str) -> PyResult<Vec<Vec<u32>>> {
    Ok(mask_rows(dataio::load_mask(path).map_err(to_py)?.labels()))
}

/// Vessel iff `p >= threshold`, compared in single precision.
#[pyfunction]
#[pyo3(signature = (probs, threshold = inference::DEFAULT_THRESHOLD))]
fn binarize(probs: Vec<Vec<f32>>, threshold: f64) -> PyResult<Vec<Vec<u32>>> {
    let t = threshold as f32;
    Ok(probs
        .into_iter()
        .map(|r| r.into_iter().map(|p| u32::from(p >= t)).collect())
        .collect())
}

#[pyfunction]
fn vessel_density(mask: Vec<Vec<u8>>) -> PyResult<f64> {
    vmetrics::vessel_density(&mask_from_rows(mask)?, None).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (mask, box_sizes = None, offsets = 1))]
fn fractal_dimension(mask: Vec<Vec<u8>>, box_sizes: Option<Vec<usize>>, offsets: usize) -> PyResult<f64> {
    let options = FractalOptions { box_sizes, offsets };
    Ok(vmetrics::fractal_dimension_with(&mask_from_rows(mask)?, &options)
        .map_err(to_py)?
        .0)
}

/// Dice Focal loss of flattened probabilities against 0/1 targets.
#[pyfunction]
#[pyo3(signature = (probs, targets, lambda_dice = 1.0, lambda_focal = 1.0, gamma = 2.0, epsilon = 1.0, prob_clip = 1e-7))]
fn loss(
    probs: Vec<f64>,
    targets: Vec<u8>,
    lambda_dice: f64,
    lambda_focal: f64,
    gamma: f64,
    epsilon: f64,
    prob_clip: f64,
) -> PyResult<f64> {
    let params = LossParams {
        lambda_dice,
        lambda_focal,
        gamma,
        epsilon,
        prob_clip,
    };
    dice_focal_loss(&probs, &targets, &params).map_err(to_py)
}

fn maps_and_masks(probs: Vec<Vec<Vec<f32>>>, masks: Vec<Vec<Vec<u8>>>) -> PyResult<(Vec<Plane<f32>>, Vec<VesselMask>)> {
    let p = probs.into_iter().map(plane_from_rows).collect::<PyResult<Vec<_>>>()?;
    let m = masks.into_iter().map(mask_from_rows).collect::<PyResult<Vec<_>>>()?;
    Ok((p, m))
}

/// Pooled metrics over lists of probability maps and masks. Without a
/// threshold the F1-optimal one is chosen on the same data.
#[pyfunction]
#[pyo3(signature = (probs, masks, threshold = None))]
fn evaluate(
    probs: Vec<Vec<Vec<f32>>>,
    masks: Vec<Vec<Vec<u8>>>,
    threshold: Option<f64>,
) -> PyResult<HashMap<&'static str, f64>> {
    let (p, m) = maps_and_masks(probs, masks)?;
    let r = eval::evaluate_maps(&p, &m, threshold).map_err(to_py)?;
    Ok(HashMap::from([
        ("auc", r.auc),
        ("auprc", r.auprc),
        ("sensitivity", r.sensitivity),
        ("specificity", r.specificity),
        ("f1", r.f1),
        ("accuracy", r.accuracy),
        ("threshold", r.threshold),
    ]))
}

/// `(threshold, f1)` maximising pooled F1; ties go to the lower threshold.
#[pyfunction]
#[pyo3(signature = (probs, masks, grid = None))]
fn best_f1_threshold(
    probs: Vec<Vec<Vec<f32>>>,
    masks: Vec<Vec<Vec<u8>>>,
    grid: Option<Vec<f64>>,
) -> PyResult<(f64, f64)> {
    let (p, m) = maps_and_masks(probs, masks)?;
    eval::best_f1_threshold(&p, &m, grid.as_deref()).map_err(to_py)
}

#[pymodule]
fn vesselseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", vesselseg_core::VERSION)?;
    m.add("DEFAULT_THRESHOLD", inference::DEFAULT_THRESHOLD)?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(load_mask, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(vessel_density, m)?)?;
    m.add_function(wrap_pyfunction!(fractal_dimension, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(best_f1_threshold, m)?)?;
    Ok(())
}
