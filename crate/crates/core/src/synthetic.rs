//! Deterministic retina-like phantoms: branching dark vessels on a
//! nonuniform bright background with sensor noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::gaussian_blur;
use crate::dataio::{LabelledImage, SloImage, VesselMask};
use crate::error::Result;
use crate::plane::Plane;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Number of vessel trees rooted near the optic disc.
    pub trees: usize,
    /// Maximum branching depth of each tree.
    pub generations: usize,
    pub root_radius: f64,
    pub noise_sigma: f64,
    pub vessel_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            width: 768,
            height: 768,
            trees: 6,
            generations: 6,
            root_radius: 5.0,
            noise_sigma: 0.03,
            vessel_contrast: 0.3,
        }
    }
}

struct Branch {
    x: f64,
    y: f64,
    angle: f64,
    radius: f64,
    generation: usize,
}

fn stamp(mask: &mut Plane<u8>, cx: f64, cy: f64, r: f64) {
    let (w, h) = mask.dims();
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as isize).min(w as isize - 1);
    let y1 = ((cy + r).ceil() as isize).min(h as isize - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                mask.set(x, y, 1);
            }
        }
    }
}

fn vessel_mask(spec: &PhantomSpec, r: &mut rng::SeededRng) -> Plane<u8> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut mask = Plane::filled(spec.width, spec.height, 0u8);
    let disc = (w * r.random_range(0.35..0.65), h * r.random_range(0.4..0.6));
    let mut stack: Vec<Branch> = (0..spec.trees)
        .map(|i| Branch {
            x: disc.0,
            y: disc.1,
            angle: i as f64 / spec.trees as f64 * std::f64::consts::TAU + r.random_range(-0.3..0.3),
            radius: spec.root_radius * r.random_range(0.7..1.0),
            generation: 0,
        })
        .collect();
    let step = 2.0;
    while let Some(mut b) = stack.pop() {
        let length = (w.min(h) * 0.45 * 0.75f64.powi(b.generation as i32)) * r.random_range(0.6..1.1);
        let steps = (length / step) as usize;
        let branch_at = if b.generation + 1 < spec.generations {
            r.random_range(steps / 3..steps.max(steps / 3 + 1))
        } else {
            usize::MAX
        };
        for i in 0..steps {
            b.angle += r.random_range(-0.12..0.12);
            b.x += step * b.angle.cos();
            b.y += step * b.angle.sin();
            if b.x < -20.0 || b.y < -20.0 || b.x > w + 20.0 || b.y > h + 20.0 {
                break;
            }
            stamp(&mut mask, b.x, b.y, b.radius.max(0.6));
            if i == branch_at {
                let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
                stack.push(Branch {
                    x: b.x,
                    y: b.y,
                    angle: b.angle + side * r.random_range(0.4..1.0),
                    radius: b.radius * r.random_range(0.6..0.8),
                    generation: b.generation + 1,
                });
                b.radius *= 0.85;
                b.generation += 1;
            }
        }
    }
    mask
}

/// Builds one phantom image and its exact vessel mask.
pub fn phantom(spec: &PhantomSpec, seed: u64) -> Result<LabelledImage> {
    let mut r = rng::seeded(seed);
    let mask = vessel_mask(spec, &mut r);
    let soft = gaussian_blur(&mask.map(f32::from), 0.8);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (cx, cy) = (w * r.random_range(0.3..0.7), h * r.random_range(0.3..0.7));
    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let pixels = Plane::from_fn(spec.width, spec.height, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / w.max(h);
        let background = 0.65 - 0.3 * d * d;
        let v = background - spec.vessel_contrast * soft.get(x, y) as f64 + noise.sample(&mut r);
        v.clamp(0.0, 1.0) as f32
    });
    LabelledImage::new(
        SloImage::new(format!("phantom-{seed}"), pixels, 8)?,
        VesselMask::new(mask)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_plausible() {
        let spec = PhantomSpec {
            width: 256,
            height: 192,
            ..PhantomSpec::default()
        };
        let a = phantom(&spec, 4).unwrap();
        let b = phantom(&spec, 4).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let density = a.mask.vessel_count() as f64 / (256.0 * 192.0);
        assert!(density > 0.03 && density < 0.4, "density {density}");
        assert_ne!(phantom(&spec, 5).unwrap().mask, a.mask);
    }

    #[test]
    fn vessels_are_darker() {
        let s = phantom(&PhantomSpec::default(), 1).unwrap();
        let (mut v, mut nv, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &m) in s.image.pixels().as_slice().iter().zip(s.mask.labels().as_slice()) {
            if m == 1 {
                v += p as f64;
                nv += 1.0;
            } else {
                b += p as f64;
                nb += 1.0;
            }
        }
        assert!(v / nv + 0.1 < b / nb);
    }
}
