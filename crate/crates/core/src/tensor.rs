//! Dense f32 tensors and the convolution / resampling kernels the network
//! is built from.
//!
//! Feature maps are stored channel-major as `[c, h, w]`. Convolution
//! weights are `[c_out, c_in, k, k]`. All kernels are single-threaded and
//! accumulate in a fixed order, so results are bit-reproducible.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(c, h, w)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [c, h, w] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Channel `c` of a `[c, h, w]` tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }
}

/// `c = a·b + beta·c` for row-major `c` of shape `m×n`, with arbitrary
/// strides on `a` (`m×k`) and `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the bounds of every strided access were asserted above and
    // `c` does not alias `a` or `b` (distinct borrows).
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    let mut cols = vec![0.0f32; g.patch_len() * plane];
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Lowered input kept for the backward pass. Pointwise convolutions reuse
/// the input directly.
pub(crate) enum ConvCache {
    Cols(Vec<f32>),
    Pointwise,
}

/// 2-D cross-correlation. Returns the `[c_out, oh, ow]` output and the
/// lowered input needed by [`conv2d_backward`].
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> (Tensor, ConvCache) {
    let (c_in, h, w) = x.chw();
    let c_out = weight.shape()[0];
    let kernel = weight.shape()[2];
    assert_eq!(weight.shape()[1], c_in, "conv input channels");
    let g = ConvGeometry {
        c_in,
        h,
        w,
        kernel,
        stride,
        pad,
    };
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0f32; c_out * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let kk = g.patch_len();
    let cache = if g.is_pointwise() {
        sgemm(c_out, kk, plane, weight.data(), kk, 1, x.data(), plane, 1, &mut out, beta);
        ConvCache::Pointwise
    } else {
        let cols = im2col(x.data(), &g);
        sgemm(c_out, kk, plane, weight.data(), kk, 1, &cols, plane, 1, &mut out, beta);
        ConvCache::Cols(cols)
    };
    (Tensor::from_vec(&[c_out, oh, ow], out), cache)
}

/// Gradients of [`conv2d_forward`]. Accumulates into `dw`/`db` and returns
/// the input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    cache: &ConvCache,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
    need_dx: bool,
) -> Option<Tensor> {
    let (c_in, h, w) = x.chw();
    let c_out = weight.shape()[0];
    let kernel = weight.shape()[2];
    let g = ConvGeometry {
        c_in,
        h,
        w,
        kernel,
        stride,
        pad,
    };
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let cols: &[f32] = match cache {
        ConvCache::Cols(c) => c,
        ConvCache::Pointwise => x.data(),
    };
    // dW += dY · colsᵀ
    sgemm(c_out, plane, kk, dy.data(), plane, 1, cols, 1, plane, dw.data_mut(), 1.0);
    if let Some(db) = db {
        for (co, chunk) in dy.data().chunks(plane).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f32>();
        }
    }
    if !need_dx {
        return None;
    }
    // dcols = Wᵀ · dY
    let mut dcols = vec![0.0f32; kk * plane];
    sgemm(kk, c_out, plane, weight.data(), 1, kk, dy.data(), plane, 1, &mut dcols, 0.0);
    if matches!(cache, ConvCache::Pointwise) {
        return Some(Tensor::from_vec(&[c_in, h, w], dcols));
    }
    let mut dx = vec![0.0f32; c_in * h * w];
    col2im(&dcols, &g, &mut dx);
    Some(Tensor::from_vec(&[c_in, h, w], dx))
}

/// Source taps for bilinear upsampling along one axis by an integer factor,
/// half-pixel centers (`align_corners = false`).
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f32 + 0.5) / factor as f32 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub(crate) fn upsample_bilinear_backward(dy: &Tensor, h: usize, w: usize, factor: usize) -> Tensor {
    let (c, _, ow) = dy.chw();
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let g = dy.channel(ch);
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, wd) = x.chw();
        let co = w.shape()[0];
        let k = w.shape()[2];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o] as f64;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += (x.data()[(c * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx])
                                        as f64;
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * oh + y) * ow + xx] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = random(&[3, 7, 6], 1);
            let w = random(&[4, 3, k, k], 2);
            let b = random(&[4], 3);
            let (y, _) = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let r = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random(&[2, 5, 5], 4);
        let w = random(&[3, 2, 3, 3], 5);
        let b = random(&[3], 6);
        let dy = random(&[3, 3, 3], 7);
        let (_, cache) = conv2d_forward(&x, &w, Some(&b), 2, 1);
        let mut dw = Tensor::zeros(w.shape());
        let mut db = Tensor::zeros(b.shape());
        let dx = conv2d_backward(&x, &w, &cache, 2, 1, &dy, &mut dw, Some(&mut db), true).unwrap();
        let objective = |x: &Tensor, w: &Tensor| -> f64 {
            let y = naive_conv(x, w, &b, 2, 1);
            y.data().iter().zip(dy.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for i in [0, 7, 19, 33, 49] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 1e-3, "dx[{i}]");
        }
        for i in [0, 11, 26, 53] {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * eps as f64);
            assert!((fd - dw.data()[i] as f64).abs() < 1e-3, "dw[{i}]");
        }
        let total: f32 = dy.data()[..9].iter().sum();
        assert!((db.data()[0] - total).abs() < 1e-5);
    }

    #[test]
    fn bilinear_preserves_constants_and_adjoint_holds() {
        let c = Tensor::full(&[1, 3, 4], 0.3);
        let u = upsample_bilinear(&c, 4);
        assert_eq!(u.shape(), &[1, 12, 16]);
        assert!(u.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        let x = random(&[2, 3, 4], 8);
        let dy = random(&[2, 6, 8], 9);
        let y = upsample_bilinear(&x, 2);
        let dx = upsample_bilinear_backward(&dy, 3, 4, 2);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
