//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) and asserts the pass condition.
//!
//! The training criteria take a while: about 5 minutes for criteria 5 and
//! 8 together and about 75 minutes for criteria 6 and 7.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rsrnet::checkpoint::{file_sha256, load_checkpoint, save_checkpoint, Checkpoint};
use rsrnet::data::{make_dataset, split_ids, DataConfig, SamplePair};
use rsrnet::losses::{
    bce_loss, bce_loss_with_grad, iou_loss, iou_loss_with_grad, ssim_loss, ssim_loss_with_grad, total_loss, LossTerms,
};
use rsrnet::metrics::{average_precision, complexity_report, f1_at, iou_at, ApMode};
use rsrnet::pipeline::{ablate, evaluate_samples, forward, train_samples, AblationReport};
use rsrnet::rng::{seeded_rng, Rng};
use rsrnet::rsr::{background_style_feature, convex_upsample, gru_input_channels, gru_step, multiscale_similarity, neighborhood_sum};
use rsrnet::tensor::Tensor;
use rsrnet::{FeatureMap, MaskMap, Model, ModelConfig};

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} ({detail})");
}

fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> FeatureMap {
    FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_mask(rng: &mut Rng, h: usize, w: usize, lo: f32, hi: f32) -> MaskMap {
    MaskMap::new(h, w, (0..h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn binary_mask(rng: &mut Rng, h: usize, w: usize, p: f64) -> MaskMap {
    MaskMap::new(h, w, (0..h * w).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

// ---- brute-force oracles ----

fn oracle_background(fs: &FeatureMap, mask: &MaskMap, eps: f32) -> Vec<f64> {
    let (h, w) = (fs.height(), fs.width());
    let any = mask.values().iter().any(|&m| m < eps);
    let mut out = Vec::new();
    for c in 0..fs.channels() {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                if !any || mask.get(y, x) < eps {
                    sum += fs.get(c, y, x) as f64;
                    n += 1;
                }
            }
        }
        out.push(sum / n as f64);
    }
    out
}

fn oracle_neighborhood(fs: &FeatureMap, l: usize) -> Vec<f64> {
    let (c, h, w) = (fs.channels(), fs.height(), fs.width());
    let l = l as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for yy in y - l..=y + l {
                    for xx in x - l..=x + l {
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            acc += fs.get(ch, yy as usize, xx as usize) as f64;
                        }
                    }
                }
                out[(ch * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn oracle_similarity(fs: &FeatureMap, f_bg: &[f32], scales: &[usize]) -> Vec<f64> {
    let (c, h, w) = (fs.channels(), fs.height(), fs.width());
    let nb: f64 = f_bg.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for &l in scales {
        let agg = oracle_neighborhood(fs, l);
        for p in 0..h * w {
            let (mut dot, mut na) = (0.0f64, 0.0f64);
            for ch in 0..c {
                let a = agg[ch * h * w + p];
                dot += f_bg[ch] as f64 * a;
                na += a * a;
            }
            out.push(if nb == 0.0 || na == 0.0 { 0.0 } else { dot / (nb * na.sqrt()) });
        }
    }
    out
}

/// Weights of shape `[9·s², h, w]`, normalized over the 9 neighbors.
fn random_upsample_weights(rng: &mut Rng, s: usize, h: usize, w: usize) -> Tensor {
    let ss = s * s;
    let mut data = vec![0.0f32; 9 * ss * h * w];
    for sub in 0..ss {
        for p in 0..h * w {
            let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let total: f64 = raw.iter().sum();
            for n in 0..9 {
                data[(n * ss + sub) * h * w + p] = (raw[n] / total) as f32;
            }
        }
    }
    Tensor::from_vec(&[9 * ss, h, w], data)
}

fn oracle_upsample(mask: &MaskMap, weights: &Tensor, s: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let ss = s * s;
    let wd = weights.data();
    let mut out = vec![0.0; h * s * w * s];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..s {
                for dx in 0..s {
                    let mut acc = 0.0f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let n = ky * 3 + kx;
                            let yy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            acc += wd[(n * ss + dy * s + dx) * h * w + y * w + x] as f64 * mask.get(yy, xx) as f64;
                        }
                    }
                    out[(y * s + dy) * w * s + x * s + dx] = acc;
                }
            }
        }
    }
    out
}

fn oracle_counts(pred: &MaskMap, gt: &MaskMap, t: f32) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let p = pred.get(y, x) >= t;
            let g = gt.get(y, x) >= 0.5;
            tp += (p && g) as u64;
            fp += (p && !g) as u64;
            fn_ += (!p && g) as u64;
        }
    }
    (tp, fp, fn_)
}

/// Precision-recall sweep over every distinct score used as a threshold.
fn oracle_ap(pred: &MaskMap, gt: &MaskMap) -> Option<f64> {
    let positives = gt.values().iter().filter(|&&g| g >= 0.5).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f32> = pred.values().to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let (tp, fp, _) = oracle_counts(pred, gt, t);
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let cases = 100;
    let mut worst = [0.0f64; 4];
    let mut exact_ok = true;
    for _ in 0..cases {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let fs = random_map(&mut rng, c, h, w, -1.0, 1.0);
        let mask = random_mask(&mut rng, h, w, 0.0, 1.0);
        let eps = if rng.random_bool(0.2) { 0.001 } else { 0.5 };
        let got = background_style_feature(&fs, &mask, eps).unwrap();
        worst[0] = worst[0].max(max_abs_diff(&got, &oracle_background(&fs, &mask, eps)));

        // Integer-valued maps keep every neighborhood sum exact.
        let ints = FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-20i32..20) as f32).collect()).unwrap();
        let l = rng.random_range(0..4);
        let sum = neighborhood_sum(&ints, l);
        exact_ok &= sum.values().iter().zip(oracle_neighborhood(&ints, l)).all(|(&a, b)| a as f64 == b);
        worst[1] = worst[1].max(max_abs_diff(neighborhood_sum(&fs, l).values(), &oracle_neighborhood(&fs, l)));

        let f_bg: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sim = multiscale_similarity(&fs, &f_bg, &[0, 1, 2, 3]).unwrap();
        worst[2] = worst[2].max(max_abs_diff(sim.values().values(), &oracle_similarity(&fs, &f_bg, &[0, 1, 2, 3])));

        let s = [1, 2, 4, 8][rng.random_range(0..4)];
        let coarse = random_mask(&mut rng, h, w, 0.0, 1.0);
        let weights = random_upsample_weights(&mut rng, s, h, w);
        let up = convex_upsample(&coarse, &weights, s).unwrap();
        worst[3] = worst[3].max(max_abs_diff(up.values(), &oracle_upsample(&coarse, &weights, s)));
    }
    let mut worst_ap = 0.0f64;
    let mut ap_defined = true;
    for i in 0..cases {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let gt = binary_mask(&mut rng, h, w, 0.4);
        // Coarse score levels force ties.
        let pred = MaskMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..6) as f32 / 5.0).collect()).unwrap();
        let t = if i % 2 == 0 { 0.5 } else { rng.random_range(0.05..0.95) };
        let (tp, fp, fn_) = oracle_counts(&pred, &gt, t);
        let (f1, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / (tp + fp + fn_) as f64)
        };
        exact_ok &= f1_at(&pred, &gt, t).unwrap() == f1 && iou_at(&pred, &gt, t).unwrap() == iou;
        match (average_precision(&pred, &gt).unwrap(), oracle_ap(&pred, &gt)) {
            (Some(a), Some(b)) => worst_ap = worst_ap.max((a - b).abs()),
            (None, None) => {}
            _ => ap_defined = false,
        }
    }
    let elapsed = start.elapsed();
    let pass = exact_ok && ap_defined && worst.iter().chain([&worst_ap]).all(|&d| d <= 1e-6) && elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        &format!(
            "{cases} cases each; max |diff| background {:.1e}, neighborhood {:.1e}, similarity {:.1e}, upsample {:.1e}, AP {:.1e}; integer cases exact: {exact_ok}; {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst_ap,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

type LossWithGrad = fn(&MaskMap, &MaskMap) -> rsrnet::Result<(f64, Vec<f64>)>;
type LossValue = fn(&MaskMap, &MaskMap) -> rsrnet::Result<f64>;

/// Worst relative error between the analytic gradient and central
/// differences with step 1e-4, over `trials` random `n×n` masks.
fn gradient_check(with_grad: LossWithGrad, value: LossValue, n: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let pred = random_mask(&mut rng, n, n, 0.05, 0.95);
        let gt = binary_mask(&mut rng, n, n, 0.4);
        let (_, analytic) = with_grad(&pred, &gt).unwrap();
        let mut numeric = Vec::with_capacity(n * n);
        for i in 0..n * n {
            let shifted = |d: f32| {
                let mut v = pred.values().to_vec();
                v[i] += d;
                (v[i], MaskMap::new(n, n, v).unwrap())
            };
            let (hi_v, hi) = shifted(1e-4);
            let (lo_v, lo) = shifted(-1e-4);
            let step = hi_v as f64 - lo_v as f64;
            numeric.push((value(&hi, &gt).unwrap() - value(&lo, &gt).unwrap()) / step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        worst = worst.max(diff / scale.max(1e-12));
    }
    worst
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let bce = gradient_check(bce_loss_with_grad, bce_loss, 8, 20, 201);
    let iou = gradient_check(iou_loss_with_grad, iou_loss, 8, 20, 202);
    // The 11×11 SSIM window does not fit an 8×8 mask; that size is an
    // error, so the SSIM check runs at the smallest valid side.
    let small = MaskMap::constant(8, 8, 0.5);
    let ssim_rejects_8 = ssim_loss(&small, &small).is_err();
    let ssim = gradient_check(ssim_loss_with_grad, ssim_loss, 11, 20, 203);
    let elapsed = start.elapsed();
    let pass = bce < 1e-3 && iou < 1e-3 && ssim < 1e-3 && ssim_rejects_8 && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        &format!(
            "20 trials each; max relative error bce {bce:.1e} (8x8), iou {iou:.1e} (8x8), ssim {ssim:.1e} (11x11, 8x8 rejected: {ssim_rejects_8}); {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_ranges_and_invariances() {
    let start = Instant::now();
    let mut rng = seeded_rng(301);
    let mut failures: Vec<String> = Vec::new();

    let mut sim_range = true;
    let mut drift = 0.0f64;
    let mut upsample_range = true;
    for _ in 0..100 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..8));
        let fs = random_map(&mut rng, c, h, w, -2.0, 2.0);
        let f_bg: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sim = multiscale_similarity(&fs, &f_bg, &[0, 1, 2, 3]).unwrap();
        sim_range &= sim.values().values().iter().all(|v| (-1.0..=1.0).contains(v));
        let factor = 10f32.powf(rng.random_range(-3.0..3.0));
        let scaled = multiscale_similarity(&fs.scaled(factor), &f_bg, &[0, 1, 2, 3]).unwrap();
        drift = drift.max(
            sim.values()
                .values()
                .iter()
                .zip(scaled.values().values())
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0, f64::max),
        );
        let s = [2, 4, 8][rng.random_range(0..3)];
        let coarse = random_mask(&mut rng, h, w, 0.0, 1.0);
        let up = convex_upsample(&coarse, &random_upsample_weights(&mut rng, s, h, w), s).unwrap();
        let lo = coarse.values().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = coarse.values().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        upsample_range &= up.values().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6);
    }
    if !sim_range {
        failures.push("similarity outside [-1, 1]".into());
    }
    if drift > 1e-5 {
        failures.push(format!("scaling drift {drift:.1e}"));
    }
    if !upsample_range {
        failures.push("upsample left input range".into());
    }

    let cfg = ModelConfig::desk();
    let mut between = true;
    let mut history_range = true;
    for seed in 0..5 {
        let model = Model::new(&cfg, seed).unwrap();
        let image = random_map(&mut rng, 3, cfg.input_size, cfg.input_size, 0.0, 1.0);
        let out = forward(&model, &image).unwrap();
        history_range &= out.history.len() == cfg.num_iterations;
        history_range &= out.history.iter().flat_map(|m| m.values()).all(|v| (0.0..=1.0).contains(v));
        for ((&f, &d), &r) in out.m_fnl.values().iter().zip(out.m_dec.values()).zip(out.m_rsr_up.values()) {
            between &= f >= d.min(r) - 1e-6 && f <= d.max(r) + 1e-6;
        }
    }
    if !between {
        failures.push("m_fnl outside [min, max] of its inputs".into());
    }
    if !history_range {
        failures.push("mask history outside [0, 1]".into());
    }

    // Zero gate weights and a saturated update-gate bias pin Z to 0 or 1.
    let gated = |z_bias: f32, h_bias: f32| {
        let mut model = Model::new(&cfg, 7).unwrap();
        for part in ["z", "r", "h"] {
            model.store.by_name_mut(&format!("rsr.gru.{part}.weight")).unwrap().data_mut().fill(0.0);
        }
        model.store.by_name_mut("rsr.gru.z.bias").unwrap().data_mut().fill(z_bias);
        model.store.by_name_mut("rsr.gru.h.bias").unwrap().data_mut().fill(h_bias);
        model
    };
    let mut grng = seeded_rng(302);
    let x = random_map(&mut grng, gru_input_channels(&cfg), 8, 8, -1.0, 1.0);
    let h = random_map(&mut grng, cfg.gru_hidden_dim, 8, 8, -1.0, 1.0);
    let keeps = gru_step(&gated(-200.0, 0.3), &x, &h).unwrap() == h;
    let takes = gru_step(&gated(200.0, 0.3), &x, &h).unwrap().values().iter().all(|&v| (v - 0.3f32.tanh()).abs() < 1e-6);
    if !keeps {
        failures.push("Z=0 did not keep H".into());
    }
    if !takes {
        failures.push("Z=1 did not take the candidate".into());
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    let detail = if failures.is_empty() {
        format!("similarity range, scale drift {drift:.1e}, betweenness, upsample range, history range, GRU gates; {:.1}s", elapsed.as_secs_f64())
    } else {
        failures.join("; ")
    };
    report(3, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_4_loss_composition() {
    let mut rng = seeded_rng(401);
    let n = 16;
    let gt = binary_mask(&mut rng, n, n, 0.3);
    let history: Vec<MaskMap> = (0..12).map(|_| random_mask(&mut rng, n, n, 0.0, 1.0)).collect();
    let m_fnl = random_mask(&mut rng, n, n, 0.0, 1.0);
    let ell = |m: &MaskMap| bce_loss(m, &gt).unwrap() + ssim_loss(m, &gt).unwrap() + iou_loss(m, &gt).unwrap();
    let closed = |lambda: f64| ell(&m_fnl) + history.iter().enumerate().map(|(i, m)| lambda.powi(12 - (i as i32 + 1)) * ell(m)).sum::<f64>();
    let weighted = total_loss(&history, &m_fnl, &gt, 0.8, LossTerms::ALL).unwrap();
    let flat = total_loss(&history, &m_fnl, &gt, 1.0, LossTerms::ALL).unwrap();
    let unweighted = ell(&m_fnl) + history.iter().map(ell).sum::<f64>();
    let tol = |v: f64| 16.0 * f64::EPSILON * v.abs();
    let d_weighted = (weighted.total - closed(0.8)).abs();
    let d_flat = (flat.total - unweighted).abs();
    let weights_ok = weighted.per_mask.iter().all(|p| p.weight == 0.8f64.powi(12 - p.k as i32));
    let pass = d_weighted <= tol(weighted.total) && d_flat <= tol(flat.total) && weights_ok;
    report(
        4,
        pass,
        &format!(
            "K=12 λ=0.8 total {:.12} vs closed form, |diff| {d_weighted:.1e}; λ=1 |diff| to unweighted sum {d_flat:.1e}",
            weighted.total
        ),
    );
    assert!(pass);
}

/// Desk config used for the overfit and determinism runs. The learning rate
/// comes from the committed pilot (`examples/pilot.rs`).
fn overfit_config() -> ModelConfig {
    ModelConfig {
        lr: 1e-3,
        max_steps: 300,
        epochs: 150,
        seed: 42,
        ..ModelConfig::desk()
    }
}

struct OverfitRun {
    final_loss: f64,
    checkpoint_sha256: String,
    train_iou: f64,
    seconds: f64,
}

fn overfit_run() -> OverfitRun {
    let data = make_dataset(42, 16, &DataConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = train_samples(&overfit_config(), &data, Some(dir.path())).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let eval = evaluate_samples(&run.model, &data, ApMode::PerImage).unwrap();
    OverfitRun {
        final_loss: run.final_loss().unwrap(),
        checkpoint_sha256: file_sha256(&run.checkpoint.unwrap()).unwrap(),
        train_iou: eval.fnl.iou_percent / 100.0,
        seconds,
    }
}

fn first_overfit_run() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(overfit_run)
}

#[test]
fn criterion_5_overfit_sanity() {
    let run = first_overfit_run();
    let pass = run.train_iou >= 0.85 && run.seconds < 600.0;
    report(
        5,
        pass,
        &format!(
            "16 images, 300 steps, seed 42: train mean IoU@0.5 {:.4} (need ≥ 0.85), final loss {:.5}, {:.0}s",
            run.train_iou, run.final_loss, run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let first = first_overfit_run();
    let second = overfit_run();
    let pass = first.final_loss.to_bits() == second.final_loss.to_bits() && first.checkpoint_sha256 == second.checkpoint_sha256;
    report(
        8,
        pass,
        &format!(
            "final loss {:?} vs {:?}; checkpoint sha256 {} vs {}",
            first.final_loss,
            second.final_loss,
            &first.checkpoint_sha256[..16],
            &second.checkpoint_sha256[..16]
        ),
    );
    assert!(pass);
}

pub const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

/// Epoch budget of the desk-scale ablation; chosen to keep the three-seed,
/// two-row run inside the two-hour limit on one core.
pub const ABLATION_EPOCHS: usize = 8;

fn ablation_config() -> ModelConfig {
    ModelConfig {
        lr: 1e-3,
        epochs: ABLATION_EPOCHS,
        ..ModelConfig::desk()
    }
}

fn ablation_data() -> (Vec<SamplePair>, Vec<SamplePair>) {
    let samples = make_dataset(2024, 1000, &DataConfig::default()).unwrap();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(&ids, 0.8, 2024);
    let pick = |set: &[String]| samples.iter().filter(|s| set.contains(&s.id)).cloned().collect::<Vec<_>>();
    (pick(&split.train), pick(&split.test))
}

struct AblationOutcome {
    report: AblationReport,
    seconds: f64,
}

fn ablation_run() -> &'static AblationOutcome {
    static RUN: OnceLock<AblationOutcome> = OnceLock::new();
    RUN.get_or_init(|| {
        let (train, test) = ablation_data();
        assert_eq!((train.len(), test.len()), (800, 200));
        let start = Instant::now();
        let report = ablate(&ablation_config(), &train, &test, &[1, 9], &ABLATION_SEEDS, ApMode::PerImage, None).unwrap();
        let _ = writeln!(std::io::stderr(), "{report}");
        AblationOutcome {
            report,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_ablation_direction() {
    let run = ablation_run();
    let row = |r: usize| run.report.rows.iter().find(|x| x.row == r).unwrap();
    let per_seed = |r: usize| row(r).runs.iter().map(|x| format!("{:.2}", x.report.fnl.ap_percent)).collect::<Vec<_>>().join("/");
    let (full, _) = row(9).final_stat(|e| e.ap_percent);
    let (unet, _) = row(1).final_stat(|e| e.ap_percent);
    let pass = full >= unet && run.seconds < 7200.0;
    report(
        6,
        pass,
        &format!(
            "800/200 images, {ABLATION_EPOCHS} epochs, seeds {ABLATION_SEEDS:?}: mean test AP full {full:.2} [{}] vs decoder-only {unet:.2} [{}]; {:.0}s",
            per_seed(9),
            per_seed(1),
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_three_mask_report() {
    let run = ablation_run();
    let full = run.report.rows.iter().find(|x| x.row == 9).unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut complete = true;
    for r in &full.runs {
        let Some(rsr) = &r.report.rsr else {
            complete = false;
            continue;
        };
        let (a_rsr, a_dec, a_fnl) = (rsr.ap_percent, r.report.dec.ap_percent, r.report.fnl.ap_percent);
        complete &= [a_rsr, a_dec, a_fnl].iter().all(|v| v.is_finite());
        if a_fnl >= a_rsr.max(a_dec) {
            wins += 1;
        }
        lines.push(format!("seed {}: rsr {a_rsr:.2} dec {a_dec:.2} fnl {a_fnl:.2}", r.seed));
    }
    // The ordering is informational; only the report itself is required.
    report(
        7,
        complete,
        &format!(
            "AP(%) {}; M_fnl ≥ both others in {wins} of {} seeds (informational, paper pattern needs ≥ 2)",
            lines.join(", "),
            full.runs.len()
        ),
    );
    assert!(complete);
}

#[test]
fn criterion_9_complexity() {
    let desk = Model::new(&ModelConfig::desk(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    save_checkpoint(&Checkpoint::from_model(&desk, 0, Default::default()), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let manifest_total: usize = ck.manifest().iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let desk_report = complexity_report(&ck.into_model(None).unwrap(), 0).unwrap();

    let paper = Model::new(&ModelConfig::paper(), 9).unwrap();
    let paper_report = complexity_report(&paper, 0).unwrap();
    let rsr = paper_report.modules.iter().find(|m| m.name == "rsr").unwrap().params;
    let pass = desk_report.parameter_count == manifest_total && rsr > 0 && paper_report.parameter_count > rsr;
    report(
        9,
        pass,
        &format!(
            "desk parameter_count {} = manifest sum {manifest_total}; paper preset RSR {:.2}M of {:.2}M total (reference 5.52M of 54.28M, informational)",
            desk_report.parameter_count,
            rsr as f64 / 1e6,
            paper_report.parameter_count as f64 / 1e6
        ),
    );
    assert!(pass);
}
