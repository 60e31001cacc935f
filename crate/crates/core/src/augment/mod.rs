//! Randomized augmentation of training windows.
//!
//! A plan is a random subset of operations with concrete parameters, applied
//! in a fixed order: affine, then intensity operations, then blur. Geometric
//! operations move the image and the mask together; everything else touches
//! the image only.

mod affine;
mod intensity;

pub use affine::{warp_image, warp_mask, AffineTransform};
pub use intensity::{clahe, equalize_histogram, gaussian_blur, log_intensity, rescale_intensity};

use crate::dataio::WindowSample;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Range { low, high }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite()) || self.low > self.high {
            return Err(Error::Config(format!(
                "{what}: invalid range [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }

    fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    fn sample(&self, rng: &mut SeededRng) -> f64 {
        rng::uniform(rng, self.low, self.high)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineSpec {
    pub probability: f64,
    pub scale: Range,
    pub rotation_deg: Range,
    pub shear_deg: Range,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClaheSpec {
    pub probability: f64,
    pub clip_limit: Range,
    pub tiles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleSpec {
    pub probability: f64,
    /// Range the output minimum is drawn from.
    pub low: Range,
    /// Range the output maximum is drawn from.
    pub high: Range,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainSpec {
    pub probability: f64,
    pub gain: Range,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurSpec {
    pub probability: f64,
    pub sigma: Range,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub affine: AffineSpec,
    pub histeq_probability: f64,
    pub clahe: ClaheSpec,
    pub rescale: RescaleSpec,
    pub log: GainSpec,
    pub blur: BlurSpec,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            enabled: true,
            affine: AffineSpec {
                probability: 0.5,
                scale: Range::new(0.9, 1.1),
                rotation_deg: Range::new(-15.0, 15.0),
                shear_deg: Range::new(-10.0, 10.0),
            },
            histeq_probability: 0.5,
            clahe: ClaheSpec {
                probability: 0.5,
                clip_limit: Range::new(1.0, 4.0),
                tiles: 8,
            },
            rescale: RescaleSpec {
                probability: 0.5,
                low: Range::new(0.0, 0.2),
                high: Range::new(0.8, 1.0),
            },
            log: GainSpec {
                probability: 0.5,
                gain: Range::new(0.5, 2.0),
            },
            blur: BlurSpec {
                probability: 0.5,
                sigma: Range::new(0.5, 2.0),
            },
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        AugmentationSpec {
            enabled: false,
            ..Self::default()
        }
    }

    /// Sets every operation's inclusion probability.
    pub fn with_probability(mut self, p: f64) -> Self {
        self.affine.probability = p;
        self.histeq_probability = p;
        self.clahe.probability = p;
        self.rescale.probability = p;
        self.log.probability = p;
        self.blur.probability = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("affine", self.affine.probability),
            ("histeq", self.histeq_probability),
            ("clahe", self.clahe.probability),
            ("rescale", self.rescale.probability),
            ("log", self.log.probability),
            ("blur", self.blur.probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        self.affine.scale.check("affine scale")?;
        self.affine.rotation_deg.check("affine rotation")?;
        self.affine.shear_deg.check("affine shear")?;
        if self.affine.scale.low <= 0.0 {
            return Err(Error::Config("affine scale must be strictly positive".into()));
        }
        if self.affine.shear_deg.low <= -90.0 || self.affine.shear_deg.high >= 90.0 {
            return Err(Error::Config(
                "affine shear must lie strictly inside (-90, 90) degrees".into(),
            ));
        }
        self.clahe.clip_limit.check("clahe clip limit")?;
        if self.clahe.clip_limit.low <= 0.0 {
            return Err(Error::Config("clahe clip limit must be positive".into()));
        }
        if self.clahe.tiles == 0 {
            return Err(Error::Config("clahe tile grid must be at least 1".into()));
        }
        self.rescale.low.check("rescale low bound")?;
        self.rescale.high.check("rescale high bound")?;
        if self.rescale.low.low < 0.0 || self.rescale.high.high > 1.0 || self.rescale.low.high >= self.rescale.high.low
        {
            return Err(Error::Config(
                "rescale bounds must satisfy 0 <= low < high <= 1 for every draw".into(),
            ));
        }
        self.log.gain.check("log gain")?;
        if self.log.gain.low <= 0.0 {
            return Err(Error::Config("log gain must be positive".into()));
        }
        self.blur.sigma.check("blur sigma")?;
        if self.blur.sigma.low < 0.0 {
            return Err(Error::Config("blur sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    Affine {
        scale: f64,
        rotation_deg: f64,
        shear_deg: f64,
    },
    HistogramEqualization,
    Clahe {
        clip_limit: f64,
        tiles: usize,
    },
    Rescale {
        low: f64,
        high: f64,
    },
    Log {
        gain: f64,
    },
    Blur {
        sigma: f64,
    },
}

impl AugOp {
    pub fn is_geometric(&self) -> bool {
        matches!(self, AugOp::Affine { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentationPlan {
    pub ops: Vec<AugOp>,
}

impl AugmentationPlan {
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// True when every operation and parameter lies within `spec`.
    pub fn conforms_to(&self, spec: &AugmentationSpec) -> bool {
        self.ops.iter().all(|op| match *op {
            AugOp::Affine {
                scale,
                rotation_deg,
                shear_deg,
            } => {
                spec.affine.scale.contains(scale)
                    && spec.affine.rotation_deg.contains(rotation_deg)
                    && spec.affine.shear_deg.contains(shear_deg)
            }
            AugOp::HistogramEqualization => true,
            AugOp::Clahe { clip_limit, tiles } => {
                spec.clahe.clip_limit.contains(clip_limit) && tiles == spec.clahe.tiles
            }
            AugOp::Rescale { low, high } => spec.rescale.low.contains(low) && spec.rescale.high.contains(high),
            AugOp::Log { gain } => spec.log.gain.contains(gain),
            AugOp::Blur { sigma } => spec.blur.sigma.contains(sigma),
        })
    }
}

fn include(rng: &mut SeededRng, p: f64) -> bool {
    rng::uniform(rng, 0.0, 1.0) < p
}

/// Includes each operation independently with its probability and draws its
/// parameters uniformly from the configured ranges.
pub fn sample_plan(spec: &AugmentationSpec, rng: &mut SeededRng) -> AugmentationPlan {
    let mut ops = Vec::new();
    if !spec.enabled {
        return AugmentationPlan { ops };
    }
    if include(rng, spec.affine.probability) {
        ops.push(AugOp::Affine {
            scale: spec.affine.scale.sample(rng),
            rotation_deg: spec.affine.rotation_deg.sample(rng),
            shear_deg: spec.affine.shear_deg.sample(rng),
        });
    }
    if include(rng, spec.histeq_probability) {
        ops.push(AugOp::HistogramEqualization);
    }
    if include(rng, spec.clahe.probability) {
        ops.push(AugOp::Clahe {
            clip_limit: spec.clahe.clip_limit.sample(rng),
            tiles: spec.clahe.tiles,
        });
    }
    if include(rng, spec.rescale.probability) {
        ops.push(AugOp::Rescale {
            low: spec.rescale.low.sample(rng),
            high: spec.rescale.high.sample(rng),
        });
    }
    if include(rng, spec.log.probability) {
        ops.push(AugOp::Log {
            gain: spec.log.gain.sample(rng),
        });
    }
    if include(rng, spec.blur.probability) {
        ops.push(AugOp::Blur {
            sigma: spec.blur.sigma.sample(rng),
        });
    }
    AugmentationPlan { ops }
}

/// Applies `plan` to a window. Output dimensions match the input, the mask
/// stays binary and intensities stay in `[0, 1]`.
pub fn apply_plan(plan: &AugmentationPlan, window: &WindowSample) -> WindowSample {
    let mut out = window.clone();
    for op in &plan.ops {
        match *op {
            AugOp::Affine {
                scale,
                rotation_deg,
                shear_deg,
            } => {
                let t = AffineTransform::about_center(out.width(), out.height(), scale, rotation_deg, shear_deg);
                out.image = warp_image(&out.image, &t);
                out.mask = warp_mask(&out.mask, &t);
            }
            AugOp::HistogramEqualization => out.image = equalize_histogram(&out.image),
            AugOp::Clahe { clip_limit, tiles } => out.image = clahe(&out.image, clip_limit, tiles),
            AugOp::Rescale { low, high } => out.image = rescale_intensity(&out.image, low, high),
            AugOp::Log { gain } => out.image = log_intensity(&out.image, gain),
            AugOp::Blur { sigma } => out.image = gaussian_blur(&out.image, sigma),
        }
        for v in out.image.as_mut_slice() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }
    out
}
