//! Full-image and tiled segmentation, binarisation and output writers.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;

use crate::dataio::{SloImage, VesselMask};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::plane::Plane;

/// Threshold applied by the command-line tool when none is given.
pub const DEFAULT_THRESHOLD: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub values: Plane<f32>,
    pub source_id: String,
    pub checkpoint_id: Option<String>,
    /// Wall-clock time of the forward pass(es), in seconds.
    pub seconds: f64,
    pub tiled: bool,
}

impl ProbabilityMap {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Mirror-pads (without repeating the edge pixel) on the right and bottom.
pub fn pad_reflect(plane: &Plane<f32>, width: usize, height: usize) -> Plane<f32> {
    let (w, h) = plane.dims();
    Plane::from_fn(width, height, |x, y| {
        plane.get(reflect(x as isize, w), reflect(y as isize, h))
    })
}

fn round_up(v: usize, d: usize) -> usize {
    v.div_ceil(d) * d
}

/// Segments the whole image in one pass, padding to a multiple of `2^depth`.
pub fn segment_full(model: &Model, image: &SloImage) -> Result<ProbabilityMap> {
    segment_full_with_limit(model, image, None)
}

/// As [`segment_full`], failing with `OutOfMemory` when the estimated working
/// set exceeds `limit` bytes.
pub fn segment_full_with_limit(model: &Model, image: &SloImage, limit: Option<usize>) -> Result<ProbabilityMap> {
    let d = model.config().divisor();
    let (w, h) = (image.width(), image.height());
    let (pw, ph) = (round_up(w, d), round_up(h, d));
    if let Some(limit) = limit {
        let required = model.inference_bytes(ph, pw);
        if required > limit {
            return Err(Error::OutOfMemory { required, limit });
        }
    }
    let started = Instant::now();
    let input = if (pw, ph) == (w, h) {
        image.pixels().clone()
    } else {
        pad_reflect(image.pixels(), pw, ph)
    };
    let out = model.forward_one(&input)?;
    let values = if (pw, ph) == (w, h) { out } else { out.crop(0, 0, w, h) };
    Ok(ProbabilityMap {
        values,
        source_id: image.id.clone(),
        checkpoint_id: model.checkpoint_id().map(str::to_string),
        seconds: started.elapsed().as_secs_f64(),
        tiled: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilingPolicy {
    pub tile_width: usize,
    pub tile_height: usize,
    pub overlap: usize,
}

impl Default for TilingPolicy {
    fn default() -> Self {
        TilingPolicy {
            tile_width: 512,
            tile_height: 512,
            overlap: 64,
        }
    }
}

impl TilingPolicy {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        if self.tile_width == 0
            || self.tile_height == 0
            || self.tile_width % divisor != 0
            || self.tile_height % divisor != 0
        {
            return Err(Error::Config(format!(
                "tile {}x{} must be nonzero multiples of {divisor}",
                self.tile_width, self.tile_height
            )));
        }
        if 2 * self.overlap >= self.tile_width.min(self.tile_height) {
            return Err(Error::Config(format!(
                "overlap {} must be less than half the tile size",
                self.overlap
            )));
        }
        Ok(())
    }
}

fn origins(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut x = 0;
    while x + tile < len {
        out.push(x);
        x += stride;
    }
    out.push(len.saturating_sub(tile));
    out.dedup();
    out
}

/// Linear ramp over the overlap on each side that has a neighbour.
fn ramp(len: usize, overlap: usize, before: bool, after: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut w = 1.0f64;
            if before && i < overlap {
                w = w.min((i + 1) as f64 / (overlap + 1) as f64);
            }
            if after && i >= len - overlap {
                w = w.min((len - i) as f64 / (overlap + 1) as f64);
            }
            w
        })
        .collect()
}

/// A tile's origin in the padded image and its normalised blending weights.
#[derive(Clone, Debug)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub weights: Plane<f64>,
}

/// Tiles covering a `width`×`height` image (padded up to at least one tile).
/// At every covered pixel the weights of all tiles sum to 1.
pub fn tile_layout(width: usize, height: usize, policy: &TilingPolicy) -> (usize, usize, Vec<Tile>) {
    let pw = width.max(policy.tile_width);
    let ph = height.max(policy.tile_height);
    let xs = origins(pw, policy.tile_width, policy.overlap);
    let ys = origins(ph, policy.tile_height, policy.overlap);
    let mut raw = Vec::with_capacity(xs.len() * ys.len());
    let mut total = Plane::filled(pw, ph, 0.0f64);
    for (j, &y) in ys.iter().enumerate() {
        let wy = ramp(policy.tile_height, policy.overlap, j > 0, j + 1 < ys.len());
        for (i, &x) in xs.iter().enumerate() {
            let wx = ramp(policy.tile_width, policy.overlap, i > 0, i + 1 < xs.len());
            let w = Plane::from_fn(policy.tile_width, policy.tile_height, |tx, ty| wx[tx] * wy[ty]);
            for ty in 0..policy.tile_height {
                for tx in 0..policy.tile_width {
                    let v = total.get(x + tx, y + ty) + w.get(tx, ty);
                    total.set(x + tx, y + ty, v);
                }
            }
            raw.push((x, y, w));
        }
    }
    let tiles = raw
        .into_iter()
        .map(|(x, y, w)| {
            let weights = Plane::from_fn(w.width(), w.height(), |tx, ty| {
                w.get(tx, ty) / total.get(x + tx, y + ty)
            });
            Tile { x, y, weights }
        })
        .collect();
    (pw, ph, tiles)
}

/// Shrinks tiles that would be larger than the image padded to a multiple of
/// `divisor`, so a single tile sees exactly the input of [`segment_full`].
pub fn fit_policy(width: usize, height: usize, policy: &TilingPolicy, divisor: usize) -> TilingPolicy {
    let tile_width = policy.tile_width.min(round_up(width, divisor));
    let tile_height = policy.tile_height.min(round_up(height, divisor));
    TilingPolicy {
        tile_width,
        tile_height,
        overlap: policy.overlap.min((tile_width.min(tile_height) - 1) / 2),
    }
}

/// Segments overlapping tiles and blends them. When one tile covers the whole
/// image the result is bit-identical to [`segment_full`].
pub fn segment_tiled(model: &Model, image: &SloImage, policy: &TilingPolicy) -> Result<ProbabilityMap> {
    let d = model.config().divisor();
    policy.validate(d)?;
    let started = Instant::now();
    let (w, h) = (image.width(), image.height());
    let policy = &fit_policy(w, h, policy, d);
    let (pw, ph, tiles) = tile_layout(w, h, policy);
    let padded = pad_reflect(image.pixels(), pw, ph);
    let outputs = tiles
        .par_iter()
        .map(|t| model.forward_one(&padded.crop(t.x, t.y, policy.tile_width, policy.tile_height)))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Plane::filled(pw, ph, 0.0f64);
    for (t, out) in tiles.iter().zip(&outputs) {
        for ty in 0..policy.tile_height {
            for tx in 0..policy.tile_width {
                let v = acc.get(t.x + tx, t.y + ty) + t.weights.get(tx, ty) * out.get(tx, ty) as f64;
                acc.set(t.x + tx, t.y + ty, v);
            }
        }
    }
    Ok(ProbabilityMap {
        values: acc.crop(0, 0, w, h).map(|v| v as f32),
        source_id: image.id.clone(),
        checkpoint_id: model.checkpoint_id().map(str::to_string),
        seconds: started.elapsed().as_secs_f64(),
        tiled: true,
    })
}

/// Full-image segmentation under `limit`, falling back to tiling when the
/// full pass would not fit.
pub fn segment_auto(
    model: &Model,
    image: &SloImage,
    limit: Option<usize>,
    policy: &TilingPolicy,
) -> Result<ProbabilityMap> {
    match segment_full_with_limit(model, image, limit) {
        Err(Error::OutOfMemory { .. }) => segment_tiled(model, image, policy),
        other => other,
    }
}

/// Vessel wherever `p >= threshold`, with the threshold rounded to the
/// map's single precision.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> VesselMask {
    let t = threshold as f32;
    VesselMask::from_nonzero(&map.values.map(|p| u8::from(p >= t)))
}

/// 16-bit grayscale PNG with `round(p · 65535)`.
pub fn write_probability_png(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u16> = map
        .values
        .as_slice()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

/// 8-bit PNG with vessels at 255 and background at 0.
pub fn write_mask_png(mask: &VesselMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = mask.labels().as_slice().iter().map(|&v| v * 255).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

/// `key = value` lines describing how an output was produced.
pub fn write_sidecar(entries: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
