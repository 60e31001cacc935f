use crate::plane::Plane;

/// Inverse-mapped affine warp about a fixed center: for every output pixel
/// `d`, the source position is `center + inverse * (d - center)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    inverse: [[f64; 2]; 2],
    center: (f64, f64),
}

/// Source coordinates closer than this to an integer are snapped onto it, so
/// that exact symmetries (90° multiples, identity) resample without blending.
const SNAP: f64 = 1e-9;

impl AffineTransform {
    /// Forward map `R(rotation) · Shear_x(shear) · scale` about the window
    /// center. Zooming keeps the window size, which recrops implicitly.
    pub fn about_center(width: usize, height: usize, scale: f64, rotation_deg: f64, shear_deg: f64) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let k = shear_deg.to_radians().tan();
        // R · Sh · S
        let a = [[c * scale, (c * k - s) * scale], [s * scale, (s * k + c) * scale]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inverse = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        AffineTransform {
            inverse,
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
        }
    }

    pub fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 - self.center.0;
        let dy = y as f64 - self.center.1;
        let sx = self.center.0 + self.inverse[0][0] * dx + self.inverse[0][1] * dy;
        let sy = self.center.1 + self.inverse[1][0] * dx + self.inverse[1][1] * dy;
        (snap(sx), snap(sy))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear resampling with border replication.
pub fn warp_image(src: &Plane<f32>, t: &AffineTransform) -> Plane<f32> {
    let (w, h) = src.dims();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    Plane::from_fn(w, h, |x, y| {
        let (sx, sy) = t.source(x, y);
        let sx = sx.clamp(0.0, max_x);
        let sy = sy.clamp(0.0, max_y);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        if fx == 0.0 && fy == 0.0 {
            return src.get(x0, y0);
        }
        let top = src.get(x0, y0) as f64 * (1.0 - fx) + src.get(x1, y0) as f64 * fx;
        let bottom = src.get(x0, y1) as f64 * (1.0 - fx) + src.get(x1, y1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Nearest-neighbour resampling; positions outside the source become 0.
pub fn warp_mask(src: &Plane<u8>, t: &AffineTransform) -> Plane<u8> {
    let (w, h) = src.dims();
    Plane::from_fn(w, h, |x, y| {
        let (sx, sy) = t.source(x, y);
        let (rx, ry) = (sx.round(), sy.round());
        if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f64 || ry > (h - 1) as f64 {
            0
        } else {
            src.get(rx as usize, ry as usize)
        }
    })
}
