//! CPU building blocks for the U-Net: forward and backward passes over single
//! `C×H×W` activations in `f32`.
//!
//! Convolutions lower to im2col + SGEMM over horizontal bands of output rows so
//! the scratch buffer stays bounded regardless of image size. Every output
//! element is produced by the same reduction order whatever the band layout,
//! so results are bit-reproducible.

use crate::error::{Error, Result};

/// Target number of output columns per im2col band.
const BAND_COLS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

pub(crate) fn alloc(len: usize) -> Result<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::OutOfMemory {
        required: len * std::mem::size_of::<f32>(),
        limit: 0,
    })?;
    v.resize(len, 0.0);
    Ok(v)
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Tensor {
            c,
            h,
            w,
            data: alloc(c * h * w)?,
        })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks the channels of `a` followed by those of `b`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = alloc(0)?;
        data.try_reserve_exact(a.data.len() + b.data.len())
            .map_err(|_| Error::OutOfMemory {
                required: (a.data.len() + b.data.len()) * 4,
                limit: 0,
            })?;
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Splits the channel axis at `c`, the inverse of `concat`.
    pub fn split_channels(mut self, c: usize) -> (Tensor, Tensor) {
        let tail = self.data.split_off(c * self.plane_len());
        let rest = Tensor {
            c: self.c - c,
            h: self.h,
            w: self.w,
            data: tail,
        };
        self.c = c;
        (self, rest)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn rows_per_band(w: usize) -> usize {
    (BAND_COLS / w.max(1)).max(1)
}

/// Fills `col` with the 3×3 zero-padded patches of rows `y0..y1`:
/// row `(ci*9 + ky*3 + kx)`, column `(y-y0)*w + x`.
fn im2col3(x: &Tensor, y0: usize, y1: usize, col: &mut [f32]) {
    let (h, w) = (x.h, x.w);
    let n = (y1 - y0) * w;
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let s = &src[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds band patches back onto the input gradient.
fn col2im3(col: &[f32], y0: usize, y1: usize, dx: &mut Tensor) {
    let (h, w) = (dx.h, dx.w);
    let n = (y1 - y0) * w;
    let plane = h * w;
    for ci in 0..dx.c {
        let dst_plane = &mut dx.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &row[(y - y0) * w..][..w];
                    let d = &mut dst_plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (dv, sv) in d[..w - 1].iter_mut().zip(&s[1..]) {
                                *dv += sv;
                            }
                        }
                        1 => {
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += sv;
                            }
                        }
                        _ => {
                            for (dv, sv) in d[1..].iter_mut().zip(&s[..w - 1]) {
                                *dv += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C[m×n] = alpha·A[m×k]·B[k×n] + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the strided views; the raw call below only touches these.
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the assertions above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Same-padded 3×3 convolution. `weight` is `[out, in, 3, 3]`.
pub fn conv3x3(x: &Tensor, weight: &[f32], bias: &[f32], out_c: usize, relu: bool) -> Result<Tensor> {
    let k = x.c * 9;
    debug_assert_eq!(weight.len(), out_c * k);
    let mut out = Tensor::zeros(out_c, x.h, x.w)?;
    let plane = x.plane_len();
    let band = rows_per_band(x.w).min(x.h);
    let mut col = alloc(k * band * x.w)?;
    let mut y0 = 0;
    while y0 < x.h {
        let y1 = (y0 + band).min(x.h);
        let n = (y1 - y0) * x.w;
        im2col3(x, y0, y1, &mut col[..k * n]);
        sgemm(
            out_c,
            k,
            n,
            weight,
            k,
            1,
            &col,
            n,
            1,
            0.0,
            &mut out.data[y0 * x.w..],
            plane,
            1,
        );
        y0 = y1;
    }
    for (o, chunk) in out.data.chunks_mut(plane).enumerate() {
        let b = bias[o];
        if relu {
            chunk.iter_mut().for_each(|v| *v = (*v + b).max(0.0));
        } else {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients of `conv3x3` into `dw`/`db` and
/// returns the input gradient when requested. `dout` is the gradient with
/// respect to the pre-activation output.
pub fn conv3x3_backward(
    x: &Tensor,
    weight: &[f32],
    dout: &Tensor,
    dw: &mut [f32],
    db: &mut [f32],
    need_dx: bool,
) -> Result<Option<Tensor>> {
    let k = x.c * 9;
    let out_c = dout.c;
    let plane = x.plane_len();
    for (o, g) in dout.data.chunks(plane).enumerate() {
        db[o] += g.iter().sum::<f32>();
    }
    let band = rows_per_band(x.w).min(x.h);
    let mut col = alloc(k * band * x.w)?;
    let mut dcol = if need_dx { alloc(k * band * x.w)? } else { Vec::new() };
    let mut dx = if need_dx {
        Some(Tensor::zeros(x.c, x.h, x.w)?)
    } else {
        None
    };
    let mut y0 = 0;
    while y0 < x.h {
        let y1 = (y0 + band).min(x.h);
        let n = (y1 - y0) * x.w;
        im2col3(x, y0, y1, &mut col[..k * n]);
        let g = &dout.data[y0 * x.w..];
        // dW[out×k] += dOut[out×n] · col^T[n×k]
        sgemm(out_c, n, k, g, plane, 1, &col, 1, n, 1.0, dw, k, 1);
        if let Some(dx) = dx.as_mut() {
            // dcol[k×n] = W^T[k×out] · dOut[out×n]
            sgemm(k, out_c, n, weight, 1, k, g, plane, 1, 0.0, &mut dcol[..k * n], n, 1);
            col2im3(&dcol[..k * n], y0, y1, dx);
        }
        y0 = y1;
    }
    Ok(dx)
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(grad: &mut Tensor, activated: &Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow)?;
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * x.w..][..x.w];
            let r1 = &src[(2 * y + 1) * x.w..][..x.w];
            for xo in 0..ow {
                let i = 2 * xo;
                dst[y * ow + xo] = r0[i].max(r0[i + 1]).max(r1[i]).max(r1[i + 1]);
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first maximal input of its 2×2 window.
pub fn maxpool2_backward(x: &Tensor, dout: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(x.c, x.h, x.w)?;
    let (oh, ow) = (dout.h, dout.w);
    let plane = x.plane_len();
    for c in 0..x.c {
        let src = x.channel(c);
        let g = &dout.data[c * oh * ow..(c + 1) * oh * ow];
        let d = &mut dx.data[c * plane..(c + 1) * plane];
        for y in 0..oh {
            for xo in 0..ow {
                let idx = [
                    2 * y * x.w + 2 * xo,
                    2 * y * x.w + 2 * xo + 1,
                    (2 * y + 1) * x.w + 2 * xo,
                    (2 * y + 1) * x.w + 2 * xo + 1,
                ];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                d[best] += g[y * ow + xo];
            }
        }
    }
    Ok(dx)
}

/// 2×2 stride-2 transposed convolution. `weight` is `[in, out, 2, 2]`.
pub fn upconv2x2(x: &Tensor, weight: &[f32], bias: &[f32], out_c: usize) -> Result<Tensor> {
    let m = out_c * 4;
    let hw = x.plane_len();
    let mut tmp = alloc(m * hw)?;
    // tmp[(o,i,j) × p] = W^T[(o,i,j) × c] · x[c × p]
    sgemm(m, x.c, hw, weight, 1, m, &x.data, hw, 1, 0.0, &mut tmp, hw, 1);
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(out_c, oh, ow)?;
    for o in 0..out_c {
        let dst = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
        for ij in 0..4 {
            let (i, j) = (ij / 2, ij % 2);
            let src = &tmp[(o * 4 + ij) * hw..][..hw];
            for y in 0..x.h {
                let drow = &mut dst[(2 * y + i) * ow..][..ow];
                for xx in 0..x.w {
                    drow[2 * xx + j] = src[y * x.w + xx] + bias[o];
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2x2_backward(x: &Tensor, weight: &[f32], dout: &Tensor, dw: &mut [f32], db: &mut [f32]) -> Result<Tensor> {
    let out_c = dout.c;
    let m = out_c * 4;
    let hw = x.plane_len();
    let (oh, ow) = (dout.h, dout.w);
    let mut dtmp = alloc(m * hw)?;
    for o in 0..out_c {
        let src = &dout.data[o * oh * ow..(o + 1) * oh * ow];
        db[o] += src.iter().sum::<f32>();
        for ij in 0..4 {
            let (i, j) = (ij / 2, ij % 2);
            let dst = &mut dtmp[(o * 4 + ij) * hw..][..hw];
            for y in 0..x.h {
                let srow = &src[(2 * y + i) * ow..][..ow];
                for xx in 0..x.w {
                    dst[y * x.w + xx] = srow[2 * xx + j];
                }
            }
        }
    }
    // dW[c × (o,i,j)] += x[c × p] · dtmp^T[p × (o,i,j)]
    sgemm(x.c, hw, m, &x.data, hw, 1, &dtmp, 1, hw, 1.0, dw, m, 1);
    let mut dx = Tensor::zeros(x.c, x.h, x.w)?;
    // dx[c × p] = W[c × (o,i,j)] · dtmp[(o,i,j) × p]
    sgemm(x.c, m, hw, weight, m, 1, &dtmp, hw, 1, 0.0, &mut dx.data, hw, 1);
    Ok(dx)
}

pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.c, oh, ow)?;
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2_backward(dout: &Tensor) -> Result<Tensor> {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w)?;
    for c in 0..dout.c {
        let src = &dout.data[c * dout.h * dout.w..(c + 1) * dout.h * dout.w];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dst[(y / 2) * w + xx / 2] += src[y * dout.w + xx];
            }
        }
    }
    Ok(dx)
}

/// 1×1 convolution to a single channel, returning logits.
pub fn head1x1(x: &Tensor, weight: &[f32], bias: f32) -> Result<Vec<f32>> {
    let hw = x.plane_len();
    let mut z = alloc(hw)?;
    z.iter_mut().for_each(|v| *v = bias);
    for (c, &wc) in weight.iter().enumerate() {
        for (zv, &xv) in z.iter_mut().zip(x.channel(c)) {
            *zv += wc * xv;
        }
    }
    Ok(z)
}

pub fn head1x1_backward(x: &Tensor, weight: &[f32], dz: &[f32], dw: &mut [f32], db: &mut [f32]) -> Result<Tensor> {
    db[0] += dz.iter().sum::<f32>();
    let mut dx = Tensor::zeros(x.c, x.h, x.w)?;
    let hw = x.plane_len();
    for (c, &wc) in weight.iter().enumerate() {
        dw[c] += x.channel(c).iter().zip(dz).map(|(a, b)| a * b).sum::<f32>();
        for (d, &g) in dx.data[c * hw..(c + 1) * hw].iter_mut().zip(dz) {
            *d = wc * g;
        }
    }
    Ok(dx)
}
