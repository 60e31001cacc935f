//! Vessel density and box-counting fractal dimension of binary vessel maps.

use crate::dataio::VesselMask;
use crate::error::{Error, Result};
use crate::plane::Plane;

/// Fraction of vessel pixels, over the whole image or inside `roi` (nonzero
/// pixels of `roi` are inside).
pub fn vessel_density(mask: &VesselMask, roi: Option<&Plane<u8>>) -> Result<f64> {
    let labels = mask.labels();
    if labels.is_empty() {
        return Err(Error::Config("mask is empty".into()));
    }
    match roi {
        None => Ok(mask.vessel_count() as f64 / labels.len() as f64),
        Some(roi) => {
            if roi.dims() != labels.dims() {
                return Err(Error::Config(format!(
                    "roi {}x{} does not match mask {}x{}",
                    roi.width(),
                    roi.height(),
                    labels.width(),
                    labels.height()
                )));
            }
            let (mut inside, mut vessel) = (0u64, 0u64);
            for (&r, &m) in roi.as_slice().iter().zip(labels.as_slice()) {
                if r != 0 {
                    inside += 1;
                    vessel += m as u64;
                }
            }
            if inside == 0 {
                return Err(Error::Config("roi contains no pixels".into()));
            }
            Ok(vessel as f64 / inside as f64)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FractalOptions {
    /// Box sizes in pixels; `None` uses powers of two from 2 to `min(H, W) / 4`.
    pub box_sizes: Option<Vec<usize>>,
    /// Number of grid offsets averaged per box size; 1 anchors boxes at the origin.
    pub offsets: usize,
}

impl FractalOptions {
    pub fn anchored() -> Self {
        FractalOptions {
            box_sizes: None,
            offsets: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FractalFit {
    /// `(ln s, ln N(s))` for each box size `s`.
    pub points: Vec<(f64, f64)>,
    pub box_sizes: Vec<usize>,
    pub counts: Vec<f64>,
    /// Root-mean-square residual of the least-squares line.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VascularMetrics {
    pub vessel_density: f64,
    pub fractal_dimension: f64,
    pub fit: FractalFit,
}

pub fn default_box_sizes(width: usize, height: usize) -> Vec<usize> {
    let limit = width.min(height) / 4;
    std::iter::successors(Some(2usize), |s| Some(s * 2))
        .take_while(|&s| s <= limit)
        .collect()
}

/// Boxes of side `s` containing at least one vessel pixel, for a grid shifted
/// by `offset` pixels in both axes.
pub fn box_count(mask: &VesselMask, s: usize, offset: usize) -> usize {
    let labels = mask.labels();
    let (w, h) = labels.dims();
    let bw = (w + offset).div_ceil(s);
    let bh = (h + offset).div_ceil(s);
    let mut hit = vec![false; bw * bh];
    for y in 0..h {
        let row = labels.row(y);
        let by = (y + offset) / s;
        for (x, &v) in row.iter().enumerate() {
            if v != 0 {
                hit[by * bw + (x + offset) / s] = true;
            }
        }
    }
    hit.iter().filter(|&&b| b).count()
}

fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn fractal_dimension(mask: &VesselMask, box_sizes: Option<&[usize]>) -> Result<(f64, FractalFit)> {
    fractal_dimension_with(
        mask,
        &FractalOptions {
            box_sizes: box_sizes.map(<[usize]>::to_vec),
            offsets: 1,
        },
    )
}

/// Slope of `ln N(s)` against `ln(1/s)` fitted by least squares.
pub fn fractal_dimension_with(mask: &VesselMask, options: &FractalOptions) -> Result<(f64, FractalFit)> {
    if mask.vessel_count() == 0 {
        return Err(Error::UndefinedMetric("mask has no vessel pixels".into()));
    }
    let mut sizes = match &options.box_sizes {
        Some(s) => s.clone(),
        None => default_box_sizes(mask.width(), mask.height()),
    };
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.first() == Some(&0) {
        return Err(Error::Config("box sizes must be positive".into()));
    }
    if sizes.len() < 3 {
        return Err(Error::Config(format!(
            "box counting needs at least 3 box sizes, got {} for a {}x{} mask",
            sizes.len(),
            mask.width(),
            mask.height()
        )));
    }
    let offsets = options.offsets.max(1);
    let counts: Vec<f64> = sizes
        .iter()
        .map(|&s| {
            let total: usize = (0..offsets).map(|k| box_count(mask, s, k * s / offsets)).sum();
            total as f64 / offsets as f64
        })
        .collect();
    let points: Vec<(f64, f64)> = sizes
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| ((s as f64).ln(), n.ln()))
        .collect();
    let (slope, intercept) = least_squares(&points);
    let residual = (points
        .iter()
        .map(|&(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    Ok((
        -slope,
        FractalFit {
            points,
            box_sizes: sizes,
            counts,
            residual,
        },
    ))
}

pub fn vascular_metrics(mask: &VesselMask, options: &FractalOptions) -> Result<VascularMetrics> {
    let (fractal_dimension, fit) = fractal_dimension_with(mask, options)?;
    Ok(VascularMetrics {
        vessel_density: vessel_density(mask, None)?,
        fractal_dimension,
        fit,
    })
}
