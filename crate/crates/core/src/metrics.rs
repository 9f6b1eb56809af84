//! Pixel-level evaluation metrics and model complexity reporting.
//!
//! AP is the exact area under the pixel precision-recall curve of one
//! image. Pixels with equal scores form one PR step. The dataset AP is the
//! mean over images whose ground truth has at least one positive pixel;
//! a pooled variant ranks all pixels of all images together. F1 and IoU
//! threshold the prediction at 0.5; two empty masks score 1.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::types::{FeatureMap, MaskMap};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

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

/// `(tp, fp, fn)` of the thresholded prediction against a ground truth
/// binarized at 0.5.
fn confusion(pred: &MaskMap, gt: &MaskMap, threshold: f32) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// F1 of the prediction thresholded at `threshold` (inclusive).
pub fn f1_at(pred: &MaskMap, gt: &MaskMap, threshold: f32) -> Result<f64> {
    check_pair("f1_at", pred, gt)?;
    let (tp, fp, fn_) = confusion(pred, gt, threshold);
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Intersection over union of the prediction thresholded at `threshold`.
pub fn iou_at(pred: &MaskMap, gt: &MaskMap, threshold: f32) -> Result<f64> {
    check_pair("iou_at", pred, gt)?;
    let (tp, fp, fn_) = confusion(pred, gt, threshold);
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}

/// Exact AP from `(score, positive)` pairs. `None` when nothing is positive.
fn ap_of(mut scored: Vec<(f32, bool)>) -> Option<f64> {
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        let mut block_tp = 0;
        while i < scored.len() && scored[i].0 == score {
            block_tp += scored[i].1 as usize;
            seen += 1;
            i += 1;
        }
        tp += block_tp;
        ap += (block_tp as f64 / positives as f64) * (tp as f64 / seen as f64);
    }
    Some(ap)
}

/// Per-image pixel AP in `[0, 1]`; `None` when the ground truth is empty.
pub fn average_precision(pred: &MaskMap, gt: &MaskMap) -> Result<Option<f64>> {
    check_pair("average_precision", pred, gt)?;
    Ok(ap_of(pred.values().iter().zip(gt.values()).map(|(&p, &g)| (p, g >= 0.5)).collect()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApMode {
    /// Mean of per-image AP.
    #[default]
    PerImage,
    /// One AP over all pixels of all images.
    Pooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    /// Percent; `None` when the ground truth is empty.
    pub ap: Option<f64>,
    pub f1: f64,
    /// Percent.
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap_percent: f64,
    pub f1: f64,
    pub iou_percent: f64,
    pub per_image: Vec<ImageMetrics>,
    pub n_images: usize,
    /// Images left out of the AP mean because their ground truth is empty.
    pub n_ap_excluded: usize,
    pub ap_mode: ApMode,
}

impl EvalReport {
    pub const HEADER: &'static str = "AP(%)↑    F1↑      IoU(%)↑";

    /// One line per image: `id ap f1 iou`, with `nan` for undefined AP.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("id\tap\tf1\tiou\n");
        for m in &self.per_image {
            let ap = m.ap.map_or("nan".to_string(), |v| format!("{v:.4}"));
            text.push_str(&format!("{}\t{ap}\t{:.6}\t{:.4}\n", m.id, m.f1, m.iou));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn row(&self) -> String {
        format!("{:<9.2} {:<8.4} {:.2}", self.ap_percent, self.f1, self.iou_percent)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        write!(f, "{}", self.row())?;
        if self.n_ap_excluded > 0 {
            write!(f, "\n({} of {} images without positives left out of AP)", self.n_ap_excluded, self.n_images)?;
        }
        Ok(())
    }
}

/// Scores `(id, prediction, ground truth)` triples.
pub fn evaluate_pairs<'a, I>(pairs: I, mode: ApMode) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a str, &'a MaskMap, &'a MaskMap)>,
{
    let mut per_image = Vec::new();
    let mut pooled = Vec::new();
    for (id, pred, gt) in pairs {
        let ap = average_precision(pred, gt)?;
        if ap.is_none() {
            log::warn!("image {id} has no positive pixels; AP undefined");
        }
        if mode == ApMode::Pooled {
            pooled.extend(pred.values().iter().zip(gt.values()).map(|(&p, &g)| (p, g >= 0.5)));
        }
        per_image.push(ImageMetrics {
            id: id.to_string(),
            ap: ap.map(|v| 100.0 * v),
            f1: f1_at(pred, gt, DEFAULT_THRESHOLD)?,
            iou: 100.0 * iou_at(pred, gt, DEFAULT_THRESHOLD)?,
        });
    }
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n = per_image.len();
    let mean = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n as f64;
    let aps: Vec<f64> = per_image.iter().filter_map(|m| m.ap).collect();
    let ap_percent = match mode {
        ApMode::PerImage if aps.is_empty() => f64::NAN,
        ApMode::PerImage => aps.iter().sum::<f64>() / aps.len() as f64,
        ApMode::Pooled => ap_of(pooled).map_or(f64::NAN, |v| 100.0 * v),
    };
    Ok(EvalReport {
        ap_percent,
        f1: mean(&|m| m.f1),
        iou_percent: mean(&|m| m.iou),
        n_ap_excluded: n - aps.len(),
        n_images: n,
        per_image,
        ap_mode: mode,
    })
}

/// Scores predicted masks stored as `<pred_dir>/<id>.png` against the
/// ground truth of `dataset` for the given ids.
pub fn evaluate_mask_dir(pred_dir: &Path, dataset: &crate::data::Dataset, ids: &[String], mode: ApMode) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(ids.len());
    for id in ids {
        let path = pred_dir.join(format!("{id}.png"));
        if !path.exists() {
            return Err(Error::Dataset(format!("no prediction for {id} at {}", path.display())));
        }
        preds.push(crate::data::load_mask(&path)?);
    }
    let mut gts = Vec::with_capacity(ids.len());
    for id in ids {
        gts.push(&dataset.get(id).ok_or_else(|| Error::Dataset(format!("no ground truth for {id}")))?.mask);
    }
    evaluate_pairs(ids.iter().zip(&preds).zip(gts).map(|((id, p), g)| (id.as_str(), p, g)), mode)
}

/// Parameters and FLOPs of one top-level namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub parameter_count: usize,
    pub modules: Vec<ModuleCost>,
    /// Conv multiply-accumulates × 2 for one forward pass. Elementwise ops
    /// are not counted.
    pub flop_estimate: u64,
    /// Mean over timed runs after one warm-up; `None` when not timed.
    pub inference_time_ms: Option<f64>,
    pub input_size: usize,
}

pub const MODULES: [&str; 4] = ["encoder", "rsr", "decoder", "fusion"];

pub fn module_flops(model: &Model, prefix: &str) -> u64 {
    let dotted = format!("{prefix}.");
    model
        .specs
        .iter()
        .filter(|s| s.name.starts_with(&dotted))
        .map(|s| 2 * s.macs())
        .sum()
}

/// FLOPs of the two feature heads alone.
pub fn head_flops(model: &Model) -> u64 {
    model
        .specs
        .iter()
        .filter(|s| s.name.starts_with("encoder.style_head") || s.name.starts_with("encoder.content_head"))
        .map(|s| 2 * s.macs())
        .sum()
}

/// Parameter counts and FLOPs per module, plus mean forward time over
/// `timing_runs` runs on a blank image (skipped when zero).
pub fn complexity_report(model: &Model, timing_runs: usize) -> Result<ComplexityReport> {
    let modules: Vec<ModuleCost> = MODULES
        .iter()
        .map(|&m| ModuleCost {
            name: m.to_string(),
            params: model.store.count_with_prefix(m),
            flops: module_flops(model, m),
        })
        .collect();
    let inference_time_ms = if timing_runs > 0 {
        let s = model.config.input_size;
        let image = FeatureMap::new(3, s, s, vec![0.5; 3 * s * s])?;
        crate::pipeline::forward(model, &image)?;
        let start = Instant::now();
        for _ in 0..timing_runs {
            crate::pipeline::forward(model, &image)?;
        }
        Some(start.elapsed().as_secs_f64() * 1000.0 / timing_runs as f64)
    } else {
        None
    };
    Ok(ComplexityReport {
        parameter_count: model.param_count(),
        flop_estimate: model.specs.iter().map(|s| 2 * s.macs()).sum(),
        modules,
        inference_time_ms,
        input_size: model.config.input_size,
    })
}

fn millions(n: usize) -> String {
    format!("{:.4}M", n as f64 / 1e6)
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rsr = self.modules.iter().find(|m| m.name == "rsr").map_or(0, |m| m.params);
        writeln!(f, "Model size and speed ({0}x{0} input)", self.input_size)?;
        writeln!(f, "{:<12} {:>14} {:>14}", "module", "params", "GFLOPs")?;
        for m in &self.modules {
            writeln!(f, "{:<12} {:>14} {:>14.4}", m.name, millions(m.params), m.flops as f64 / 1e9)?;
        }
        writeln!(
            f,
            "{:<12} {:>14} {:>14.4}",
            "total",
            millions(self.parameter_count),
            self.flop_estimate as f64 / 1e9
        )?;
        writeln!(f, "parameter count (exact): {}", self.parameter_count)?;
        write!(
            f,
            "RSR module share: {} of {} ({:.1}%)",
            millions(rsr),
            millions(self.parameter_count),
            100.0 * rsr as f64 / self.parameter_count.max(1) as f64
        )?;
        if let Some(t) = self.inference_time_ms {
            write!(f, "\ninference time: {t:.2} ms/image")?;
        }
        Ok(())
    }
}

/// Expected head FLOPs for a config, from the layer shapes: a 3×3 conv from
/// the trunk to the hidden width and a 1×1 conv to `feature_dim`, for both
/// heads, at the coarse resolution.
pub fn head_flops_formula(cfg: &ModelConfig) -> u64 {
    let trunk = *cfg.encoder_channels.last().unwrap_or(&0) as u64;
    let hidden = cfg.head_hidden_dim as u64;
    let c = cfg.feature_dim as u64;
    let hw = (cfg.coarse_size() * cfg.coarse_size()) as u64;
    2 * 2 * hw * (9 * trunk * hidden + hidden * c)
}
