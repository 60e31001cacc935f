//! Photometric operations on `[0, 1]` intensity planes.

use crate::plane::Plane;

const BINS: usize = 256;

#[inline]
fn bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)
}

fn histogram<'a>(values: impl Iterator<Item = &'a f32>) -> [f64; BINS] {
    let mut h = [0.0; BINS];
    for &v in values {
        h[bin(v)] += 1.0;
    }
    h
}

/// Global histogram equalisation. Constant images are returned unchanged.
pub fn equalize_histogram(img: &Plane<f32>) -> Plane<f32> {
    let hist = histogram(img.as_slice().iter());
    let mut cdf = [0.0; BINS];
    let mut acc = 0.0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = img.len() as f64;
    let cdf_min = cdf.iter().copied().find(|&c| c > 0.0).unwrap_or(0.0);
    if n <= cdf_min {
        return img.clone();
    }
    img.map(|v| ((cdf[bin(v)] - cdf_min) / (n - cdf_min)) as f32)
}

/// Contrast-limited adaptive histogram equalisation over a `tiles`×`tiles`
/// grid. `clip_limit` is relative to the mean bin occupancy of a tile; clipped
/// counts are redistributed uniformly, and tile mappings are blended
/// bilinearly between tile centers.
pub fn clahe(img: &Plane<f32>, clip_limit: f64, tiles: usize) -> Plane<f32> {
    let (w, h) = img.dims();
    let tx = tiles.clamp(1, w);
    let ty = tiles.clamp(1, h);
    let tile_w = w.div_ceil(tx);
    let tile_h = h.div_ceil(ty);

    let mut maps = vec![[0.0f64; BINS]; tx * ty];
    for j in 0..ty {
        for i in 0..tx {
            let (x0, y0) = (i * tile_w, j * tile_h);
            let (x1, y1) = ((x0 + tile_w).min(w), (y0 + tile_h).min(h));
            if x0 >= x1 || y0 >= y1 {
                // trailing tile can be empty when the grid overshoots; reuse its neighbour
                maps[j * tx + i] = maps[j * tx + i.saturating_sub(1)];
                continue;
            }
            let mut hist = histogram((y0..y1).flat_map(|y| img.row(y)[x0..x1].iter()));
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            let limit = (clip_limit * count / BINS as f64).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / BINS as f64;
            let map = &mut maps[j * tx + i];
            let mut acc = 0.0;
            for (m, b) in map.iter_mut().zip(hist) {
                acc += b + share;
                *m = acc / count;
            }
        }
    }

    let axis = |p: usize, tile: usize, n: usize| -> (usize, usize, f64) {
        let t = ((p as f64 + 0.5) / tile as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let t0 = t.floor() as usize;
        let t1 = (t0 + 1).min(n - 1);
        (t0, t1, t - t0 as f64)
    };
    Plane::from_fn(w, h, |x, y| {
        let b = bin(img.get(x, y));
        let (i0, i1, fx) = axis(x, tile_w, tx);
        let (j0, j1, fy) = axis(y, tile_h, ty);
        let top = maps[j0 * tx + i0][b] * (1.0 - fx) + maps[j0 * tx + i1][b] * fx;
        let bottom = maps[j1 * tx + i0][b] * (1.0 - fx) + maps[j1 * tx + i1][b] * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Linear min-max stretch onto `[low, high]`. A constant image maps to `low`.
pub fn rescale_intensity(img: &Plane<f32>, low: f64, high: f64) -> Plane<f32> {
    let (min, max) = img
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = max as f64 - min as f64;
    if span <= 0.0 {
        return img.map(|_| low as f32);
    }
    img.map(|v| {
        let out = low + (v as f64 - min as f64) / span * (high - low);
        out.clamp(low, high) as f32
    })
}

/// `gain · log2(1 + v)`, clamped to `[0, 1]`.
pub fn log_intensity(img: &Plane<f32>, gain: f64) -> Plane<f32> {
    img.map(|v| (gain * (1.0 + v as f64).log2()).clamp(0.0, 1.0) as f32)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with border replication. `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &Plane<f32>, sigma: f64) -> Plane<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Plane::from_fn(w, h, |x, y| {
        let row = img.row(y);
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * row[clampi(x as isize + i as isize - r, w)] as f64)
            .sum::<f64>() as f32
    });
    Plane::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get(x, clampi(y as isize + i as isize - r, h)) as f64)
            .sum::<f64>() as f32
    })
}
