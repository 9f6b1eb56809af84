//! Hybrid per-mask loss (BCE + SSIM + soft IoU) and the exponentially
//! weighted total over every supervised mask.
//!
//! All sums run in f64. Each loss also has an analytic gradient with
//! respect to the prediction, which the trainer feeds back into the graph.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::types::MaskMap;

/// Clamp margin for BCE and denominator guard for IoU.
pub const LOSS_EPS: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Which of the three terms make up a per-mask loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub bce: bool,
    pub ssim: bool,
    pub iou: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        bce: true,
        ssim: true,
        iou: true,
    };

    pub fn from_config(cfg: &ModelConfig) -> Self {
        let terms = LossTerms {
            bce: cfg.loss_bce_on,
            ssim: cfg.loss_ssim_on,
            iou: cfg.loss_iou_on,
        };
        if !terms.bce {
            log::warn!("BCE term disabled; training is known to diverge without it");
        }
        terms
    }
}

fn check_pair(op: &'static str, pred: &MaskMap, gt: &MaskMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            op,
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    Ok(())
}

fn bce_grad(p: &[f32], g: &[f32], grad: Option<&mut [f64]>) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (i, (&pi, &gi)) in p.iter().zip(g).enumerate() {
        let raw = pi as f64;
        let pc = raw.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        let gi = gi as f64;
        total -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
        if let Some(d) = grad.as_deref_mut() {
            d[i] = if pc == raw { (-gi / pc + (1.0 - gi) / (1.0 - pc)) / n } else { 0.0 };
        }
    }
    total / n
}

fn iou_grad(p: &[f32], g: &[f32], grad: Option<&mut [f64]>) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi as f64 * gi as f64;
        sp += pi as f64;
        sg += gi as f64;
    }
    let union = sp + sg - inter + LOSS_EPS;
    if let Some(d) = grad {
        for (di, &gi) in d.iter_mut().zip(g) {
            let gi = gi as f64;
            *di = -(gi * union - inter * (1.0 - gi)) / (union * union);
        }
    }
    1.0 - inter / union
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the windows fully inside the image.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(yo + t) * ow + xo]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(d: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            let v = d[yo * ow + xo];
            for t in 0..SSIM_WINDOW {
                rows[(yo + t) * ow + xo] += k[t] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..ow {
            let v = rows[y * ow + xo];
            for t in 0..SSIM_WINDOW {
                out[y * w + xo + t] += k[t] * v;
            }
        }
    }
    out
}

fn ssim_grad(p: &[f32], g: &[f32], h: usize, w: usize, grad: Option<&mut [f64]>) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let exx = filter_valid(&xx, h, w, &k);
    let eyy = filter_valid(&yy, h, w, &k);
    let exy = filter_valid(&xy, h, w, &k);
    let n = mx.len() as f64;
    let mut total = 0.0;
    let want = grad.is_some();
    let (mut d_mx, mut d_exx, mut d_exy) = if want {
        (vec![0.0; mx.len()], vec![0.0; mx.len()], vec![0.0; mx.len()])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want {
            // d(loss)/dS = -1/n.
            let c = -s / n;
            d_mx[i] = c * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            d_exx[i] = -c / b2;
            d_exy[i] = 2.0 * c / a2;
        }
    }
    if let Some(d) = grad {
        let a = filter_valid_adjoint(&d_mx, h, w, &k);
        let b = filter_valid_adjoint(&d_exx, h, w, &k);
        let c = filter_valid_adjoint(&d_exy, h, w, &k);
        for i in 0..d.len() {
            d[i] = a[i] + 2.0 * x[i] * b[i] + y[i] * c[i];
        }
    }
    Ok(1.0 - total / n)
}

/// Mean binary cross-entropy with the prediction clamped to
/// `[1e-6, 1 - 1e-6]`.
pub fn bce_loss(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check_pair("bce_loss", pred, gt)?;
    Ok(bce_grad(pred.values(), gt.values(), None))
}

/// `1 - mean SSIM` over every 11×11 Gaussian window that fits inside the
/// image.
pub fn ssim_loss(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check_pair("ssim_loss", pred, gt)?;
    ssim_grad(pred.values(), gt.values(), pred.height(), pred.width(), None)
}

/// Soft IoU loss `1 - Σpg / (Σp + Σg - Σpg + 1e-6)`.
pub fn iou_loss(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check_pair("iou_loss", pred, gt)?;
    Ok(iou_grad(pred.values(), gt.values(), None))
}

/// Loss value and gradient with respect to every prediction pixel.
pub fn bce_loss_with_grad(pred: &MaskMap, gt: &MaskMap) -> Result<(f64, Vec<f64>)> {
    check_pair("bce_loss", pred, gt)?;
    let mut d = vec![0.0; pred.len()];
    Ok((bce_grad(pred.values(), gt.values(), Some(&mut d)), d))
}

pub fn ssim_loss_with_grad(pred: &MaskMap, gt: &MaskMap) -> Result<(f64, Vec<f64>)> {
    check_pair("ssim_loss", pred, gt)?;
    let mut d = vec![0.0; pred.len()];
    let v = ssim_grad(pred.values(), gt.values(), pred.height(), pred.width(), Some(&mut d))?;
    Ok((v, d))
}

pub fn iou_loss_with_grad(pred: &MaskMap, gt: &MaskMap) -> Result<(f64, Vec<f64>)> {
    check_pair("iou_loss", pred, gt)?;
    let mut d = vec![0.0; pred.len()];
    Ok((iou_grad(pred.values(), gt.values(), Some(&mut d)), d))
}

/// The three terms of one mask's loss; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskLoss {
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl MaskLoss {
    pub fn sum(&self) -> f64 {
        self.bce + self.ssim + self.iou
    }
}

fn mask_loss_impl(pred: &MaskMap, gt: &MaskMap, terms: LossTerms, grad: Option<&mut [f64]>) -> Result<MaskLoss> {
    check_pair("mask_loss", pred, gt)?;
    let (p, g, h, w) = (pred.values(), gt.values(), pred.height(), pred.width());
    let mut out = MaskLoss::default();
    let Some(grad) = grad else {
        if terms.bce {
            out.bce = bce_grad(p, g, None);
        }
        if terms.ssim {
            out.ssim = ssim_grad(p, g, h, w, None)?;
        }
        if terms.iou {
            out.iou = iou_grad(p, g, None);
        }
        return Ok(out);
    };
    let mut part = vec![0.0; p.len()];
    let accumulate = |grad: &mut [f64], part: &[f64]| grad.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    if terms.bce {
        out.bce = bce_grad(p, g, Some(&mut part));
        accumulate(grad, &part);
    }
    if terms.ssim {
        out.ssim = ssim_grad(p, g, h, w, Some(&mut part))?;
        accumulate(grad, &part);
    }
    if terms.iou {
        out.iou = iou_grad(p, g, Some(&mut part));
        accumulate(grad, &part);
    }
    Ok(out)
}

/// Sum of the enabled terms for one predicted mask.
pub fn mask_loss(pred: &MaskMap, gt: &MaskMap, terms: LossTerms) -> Result<MaskLoss> {
    mask_loss_impl(pred, gt, terms, None)
}

/// Loss of one intermediate mask together with its weight `λ^(K-k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLoss {
    /// 1-based iteration index.
    pub k: usize,
    pub terms: MaskLoss,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_mask: Vec<IterationLoss>,
    pub final_mask: MaskLoss,
    pub final_mask_loss: f64,
    /// Extra supervision on the decoder mask, when enabled.
    pub decoder_loss: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn masks(&self) -> impl Iterator<Item = &MaskLoss> {
        std::iter::once(&self.final_mask).chain(self.per_mask.iter().map(|m| &m.terms))
    }

    /// Unweighted mean of each term over every supervised mask, as
    /// `(bce, ssim, iou)`.
    pub fn term_means(&self) -> (f64, f64, f64) {
        let n = (self.per_mask.len() + 1) as f64;
        let (b, s, i) = self
            .masks()
            .fold((0.0, 0.0, 0.0), |acc, m| (acc.0 + m.bce, acc.1 + m.ssim, acc.2 + m.iou));
        (b / n, s / n, i / n)
    }

    pub const LOG_HEADER: &'static str = "step\tlr\ttotal\tbce\tssim\tiou";

    /// One tab-separated training-log row. `total` is printed with full
    /// round-trip precision.
    pub fn log_row(&self, step: usize, lr: f64) -> String {
        let (b, s, i) = self.term_means();
        format!("{step}\t{lr:e}\t{:?}\t{b:.6}\t{s:.6}\t{i:.6}", self.total)
    }
}

/// Gradients of the total loss with respect to each supervised mask.
pub(crate) struct LossGrads {
    pub history: Vec<Vec<f64>>,
    pub final_mask: Vec<f64>,
    pub decoder: Option<Vec<f64>>,
}

pub(crate) fn compose(
    history: &[MaskMap],
    m_fnl: &MaskMap,
    m_dec: Option<&MaskMap>,
    gt: &MaskMap,
    lambda: f64,
    terms: LossTerms,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LossGrads>)> {
    let k_total = history.len();
    let n = gt.len();
    let new_grad = || want_grad.then(|| vec![0.0; n]);

    let mut final_grad = new_grad();
    let final_mask = mask_loss_impl(m_fnl, gt, terms, final_grad.as_deref_mut())?;
    let final_mask_loss = final_mask.sum();
    let mut total = final_mask_loss;

    let mut per_mask = Vec::with_capacity(k_total);
    let mut history_grads = Vec::with_capacity(k_total);
    for (i, m) in history.iter().enumerate() {
        let k = i + 1;
        let weight = lambda.powi((k_total - k) as i32);
        let mut g = new_grad();
        let t = mask_loss_impl(m, gt, terms, g.as_deref_mut())?;
        total += weight * t.sum();
        if let Some(mut g) = g {
            g.iter_mut().for_each(|v| *v *= weight);
            history_grads.push(g);
        }
        per_mask.push(IterationLoss { k, terms: t, weight });
    }

    let (decoder_loss, decoder_grad) = match m_dec {
        Some(d) => {
            let mut g = new_grad();
            let v = mask_loss_impl(d, gt, terms, g.as_deref_mut())?.sum();
            total += v;
            (Some(v), g)
        }
        None => (None, None),
    };
    let breakdown = LossBreakdown {
        per_mask,
        final_mask,
        final_mask_loss,
        decoder_loss,
        total,
    };
    let grads = final_grad.map(|final_mask| LossGrads {
        history: history_grads,
        final_mask,
        decoder: decoder_grad,
    });
    Ok((breakdown, grads))
}

/// `ℓ(M_fnl) + Σ_k λ^(K-k) ℓ(M̄^k)` over the upsampled recurrent history.
pub fn total_loss(history: &[MaskMap], m_fnl: &MaskMap, gt: &MaskMap, lambda: f64, terms: LossTerms) -> Result<LossBreakdown> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("loss history is empty".into()));
    }
    Ok(compose(history, m_fnl, None, gt, lambda, terms, false)?.0)
}
