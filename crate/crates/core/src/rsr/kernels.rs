//! Raw kernels of the recurrent module. Sums accumulate in f64 in raster
//! order.

use crate::tensor::Tensor;

/// Mean of the selected pixels of a `[C, h, w]` tensor, as `[C, 1, 1]`.
/// With nothing selected every pixel is used. Returns the pixel count used.
pub(crate) fn masked_mean(x: &Tensor, selected: &[bool]) -> (Tensor, usize) {
    let (c, h, w) = x.chw();
    assert_eq!(selected.len(), h * w, "selection size");
    let count = selected.iter().filter(|&&s| s).count();
    let all = count == 0;
    let used = if all { h * w } else { count };
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut acc = 0.0f64;
        for (v, &s) in x.channel(ch).iter().zip(selected) {
            if all || s {
                acc += *v as f64;
            }
        }
        out.push((acc / used as f64) as f32);
    }
    (Tensor::from_vec(&[c, 1, 1], out), used)
}

pub(crate) fn masked_mean_backward(shape: &[usize], selected: &[bool], count: usize, g: &Tensor) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut dx = Tensor::zeros(shape);
    let inv = 1.0 / count as f32;
    for ch in 0..c {
        let gc = g.data()[ch] * inv;
        let dst = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (d, &s) in dst.iter_mut().zip(selected) {
            if s {
                *d = gc;
            }
        }
    }
    dx
}

/// Channelwise sum over the `(2r+1)×(2r+1)` window around each pixel, with
/// zeros outside the image. Self-adjoint, so it is also its own backward.
pub(crate) fn box_sum(x: &Tensor, radius: usize) -> Tensor {
    let (c, h, w) = x.chw();
    if radius == 0 {
        return x.clone();
    }
    let r = radius as isize;
    let mut out = vec![0.0f32; c * h * w];
    let mut rows = vec![0.0f64; h * w];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            for xx in 0..w {
                let lo = (xx as isize - r).max(0) as usize;
                let hi = (xx as isize + r).min(w as isize - 1) as usize;
                rows[y * w + xx] = src[y * w + lo..=y * w + hi].iter().map(|&v| v as f64).sum();
            }
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let lo = (y as isize - r).max(0) as usize;
            let hi = (y as isize + r).min(h as isize - 1) as usize;
            for xx in 0..w {
                let mut acc = 0.0f64;
                for yy in lo..=hi {
                    acc += rows[yy * w + xx];
                }
                dst[y * w + xx] = acc as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Cosine similarity between `v` (length C) and every pixel vector of the
/// `[C, h, w]` map `a`; zero where either norm vanishes. Output `[1, h, w]`.
pub(crate) fn cosine_map(v: &[f32], a: &Tensor) -> Tensor {
    let (c, h, w) = a.chw();
    assert_eq!(v.len(), c, "cosine channel mismatch");
    let nv = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let mut out = vec![0.0f32; h * w];
    if nv == 0.0 {
        return Tensor::from_vec(&[1, h, w], out);
    }
    for (p, o) in out.iter_mut().enumerate() {
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        for (ch, &vc) in v.iter().enumerate() {
            let ac = a.data()[ch * h * w + p] as f64;
            dot += vc as f64 * ac;
            na += ac * ac;
        }
        if na > 0.0 {
            *o = (dot / (nv * na.sqrt())).clamp(-1.0, 1.0) as f32;
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

pub(crate) fn cosine_map_backward(v: &Tensor, a: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = a.chw();
    let vd = v.data();
    let nv2 = vd.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    let mut dv = vec![0.0f64; c];
    let mut da = Tensor::zeros(a.shape());
    if nv2 == 0.0 {
        return (Tensor::zeros(v.shape()), da);
    }
    let nv = nv2.sqrt();
    for p in 0..h * w {
        let gp = g.data()[p] as f64;
        if gp == 0.0 {
            continue;
        }
        let mut dot = 0.0f64;
        let mut na2 = 0.0f64;
        for (ch, &vc) in vd.iter().enumerate() {
            let ac = a.data()[ch * h * w + p] as f64;
            dot += vc as f64 * ac;
            na2 += ac * ac;
        }
        if na2 == 0.0 {
            continue;
        }
        let na = na2.sqrt();
        let s = dot / (nv * na);
        for (ch, &vc) in vd.iter().enumerate() {
            let ac = a.data()[ch * h * w + p] as f64;
            da.data_mut()[ch * h * w + p] = (gp * (vc as f64 / (nv * na) - s * ac / na2)) as f32;
            dv[ch] += gp * (ac / (nv * na) - s * vc as f64 / nv2);
        }
    }
    let dv = Tensor::from_vec(v.shape(), dv.into_iter().map(|x| x as f32).collect());
    (dv, da)
}

/// Neighbor offsets `(dy, dx)` of the 9-neighborhood, row-major.
pub(crate) const NEIGHBORS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Softmax over the neighbor axis of `[9·s², h, w]` logits, where channel
/// `n·s² + sub` is neighbor `n` of sub-pixel `sub = dy·s + dx`.
pub(crate) fn softmax9(logits: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = logits.chw();
    let ss = factor * factor;
    assert_eq!(c, 9 * ss, "upsample weight channels");
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![0.0f32; c * plane];
    for sub in 0..ss {
        for p in 0..plane {
            let idx = |n: usize| (n * ss + sub) * plane + p;
            let mx = (0..9).map(|n| src[idx(n)]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for n in 0..9 {
                let e = (src[idx(n)] - mx).exp();
                out[idx(n)] = e;
                total += e;
            }
            for n in 0..9 {
                out[idx(n)] /= total;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Coarse pixel feeding neighbor `n` of `(y, x)`, replicating the border.
#[inline]
fn neighbor_index(y: usize, x: usize, n: usize, h: usize, w: usize) -> usize {
    let (dy, dx) = NEIGHBORS[n];
    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
    yy * w + xx
}

/// Each fine pixel is the `probs`-weighted combination of the 3×3 coarse
/// neighborhood of its parent pixel.
pub(crate) fn convex_upsample(mask: &Tensor, probs: &Tensor, factor: usize) -> Tensor {
    let (_, h, w) = mask.chw();
    let ss = factor * factor;
    let plane = h * w;
    let (oh, ow) = (h * factor, w * factor);
    let m = mask.data();
    let pr = probs.data();
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for dy in 0..factor {
                for dx in 0..factor {
                    let sub = dy * factor + dx;
                    let mut acc = 0.0f32;
                    for n in 0..9 {
                        acc += pr[(n * ss + sub) * plane + p] * m[neighbor_index(y, x, n, h, w)];
                    }
                    out[(y * factor + dy) * ow + x * factor + dx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[1, oh, ow], out)
}

/// Returns `(d mask, d logits)`.
pub(crate) fn convex_upsample_backward(mask: &Tensor, probs: &[f32], factor: usize, g: &Tensor) -> (Tensor, Tensor) {
    let (_, h, w) = mask.chw();
    let ss = factor * factor;
    let plane = h * w;
    let ow = w * factor;
    let m = mask.data();
    let mut dmask = vec![0.0f32; plane];
    let mut dlogits = vec![0.0f32; 9 * ss * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for dy in 0..factor {
                for dx in 0..factor {
                    let sub = dy * factor + dx;
                    let go = g.data()[(y * factor + dy) * ow + x * factor + dx];
                    let mut out = 0.0f32;
                    for n in 0..9 {
                        out += probs[(n * ss + sub) * plane + p] * m[neighbor_index(y, x, n, h, w)];
                    }
                    for n in 0..9 {
                        let q = neighbor_index(y, x, n, h, w);
                        let pn = probs[(n * ss + sub) * plane + p];
                        dmask[q] += pn * go;
                        dlogits[(n * ss + sub) * plane + p] = pn * (m[q] - out) * go;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[1, h, w], dmask),
        Tensor::from_vec(&[9 * ss, h, w], dlogits),
    )
}
