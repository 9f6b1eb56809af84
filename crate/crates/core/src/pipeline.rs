//! Forward assembly, training and evaluation.
//!
//! The forward pass runs encoder → recurrent module → decoder → fusion,
//! honoring every ablation flag. Training minimizes the deep-supervised
//! loss with Adam and a step-decayed learning rate, one tape per sample;
//! batch gradients are the mean of per-sample gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ModelConfig;
use crate::data::{load_dataset, SamplePair};
use crate::decoder::{decode_graph, fuse_graph};
use crate::encoder::{check_image, encode_graph};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{compose, LossBreakdown, LossTerms};
use crate::metrics::{evaluate_pairs, ApMode, EvalReport};
use crate::model::Model;
use crate::params::Adam;
use crate::rng::{derive_seed, seeded_rng};
use crate::rsr::{collect_rsr_output, mask_of, run_rsr_graph, RsrVars, SimilarityMap};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, MaskMap};

pub(crate) struct ForwardVars {
    pub rsr: Option<RsrVars>,
    pub m_dec: Var,
    pub gate: Option<Var>,
    pub m_fnl: Var,
}

pub(crate) fn forward_graph(g: &mut Graph, model: &Model, image: Var) -> ForwardVars {
    let cfg = &model.config;
    let enc = encode_graph(g, &model.encoder, image);
    let rsr = model
        .rsr
        .as_ref()
        .map(|layers| run_rsr_graph(g, layers, cfg, enc.style, enc.conventional));
    let guidance = match &rsr {
        Some(v) => v.coarse,
        None => {
            let c = cfg.coarse_size();
            g.input(Tensor::zeros(&[1, c, c]))
        }
    };
    let (m_dec, last) = decode_graph(g, &model.decoder, enc.bottleneck, guidance, &enc.skips);
    let m_up = rsr.as_ref().map_or(m_dec, |v| v.upsampled);
    let (gate, m_fnl) = fuse_graph(g, model.fusion.as_ref(), cfg, m_dec, m_up, last);
    ForwardVars { rsr, m_dec, gate, m_fnl }
}

/// Every mask of one forward pass, at full resolution.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Upsampled recurrent mask of each iteration; empty without the
    /// recurrent module.
    pub history: Vec<MaskMap>,
    /// Coarse final recurrent mask.
    pub m_rsr: Option<MaskMap>,
    /// Upsampled final recurrent mask; zeros without the recurrent module.
    pub m_rsr_up: MaskMap,
    pub m_dec: MaskMap,
    /// Combination gate; ones when the decoder mask passes through.
    pub g: MaskMap,
    pub m_fnl: MaskMap,
    /// Similarity map used by each iteration.
    pub similarities: Vec<Option<SimilarityMap>>,
}

fn check_input(model: &Model, image: &FeatureMap) -> Result<()> {
    check_image(image, model.config.downscale_factor)?;
    let s = model.config.input_size;
    if image.height() != s || image.width() != s {
        return Err(Error::shape(
            "forward",
            format!("{s}x{s} image"),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    Ok(())
}

fn collect(g: &Graph, model: &Model, vars: &ForwardVars) -> Result<ForwardOutput> {
    let m_dec = mask_of(g, vars.m_dec)?;
    let (h, w) = (m_dec.height(), m_dec.width());
    let (history, m_rsr, m_rsr_up, similarities) = match &vars.rsr {
        Some(r) => {
            let out = collect_rsr_output(g, &model.config, r)?;
            (out.history, Some(out.m_rsr), out.m_rsr_up, out.similarities)
        }
        None => (Vec::new(), None, MaskMap::zeros(h, w), Vec::new()),
    };
    let gate = match vars.gate {
        Some(v) => mask_of(g, v)?,
        None => MaskMap::constant(h, w, 1.0),
    };
    Ok(ForwardOutput {
        history,
        m_rsr,
        m_rsr_up,
        g: gate,
        m_fnl: mask_of(g, vars.m_fnl)?,
        m_dec,
        similarities,
    })
}

/// Runs the whole network on one `3×s×s` image.
pub fn forward(model: &Model, image: &FeatureMap) -> Result<ForwardOutput> {
    check_input(model, image)?;
    let mut g = Graph::inference(&model.store);
    let x = g.input(image.as_tensor().clone());
    let vars = forward_graph(&mut g, model, x);
    collect(&g, model, &vars)
}

fn terms_of(cfg: &ModelConfig) -> LossTerms {
    LossTerms {
        bce: cfg.loss_bce_on,
        ssim: cfg.loss_ssim_on,
        iou: cfg.loss_iou_on,
    }
}

/// Loss of one forward output against its ground truth, as composed by the
/// trainer.
pub fn forward_loss(model: &Model, out: &ForwardOutput, gt: &MaskMap) -> Result<LossBreakdown> {
    let cfg = &model.config;
    let dec = cfg.decoder_loss.then_some(&out.m_dec);
    Ok(compose(&out.history, &out.m_fnl, dec, gt, cfg.loss_lambda, terms_of(cfg), false)?.0)
}

/// Learning rate during `epoch` (0-based): the base rate halved (by
/// `lr_decay`) once for every milestone `f` with `epoch >= round(f·epochs)`.
pub fn lr_at(cfg: &ModelConfig, epoch: usize) -> f64 {
    let passed = cfg
        .lr_milestones
        .iter()
        .filter(|&&f| epoch as f64 >= (f * cfg.epochs as f64).round())
        .count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Batches of sample indices for one epoch: a seeded shuffle cut into
/// `batch_size` chunks, the last one possibly shorter.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(derive_seed(seed, 0x5eed_0000 + epoch as u64));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Loss and parameter gradients of one sample, with the gradient scaled by
/// `scale`. `None` when the forward pass or the loss is not finite.
fn sample_gradients(model: &Model, sample: &SamplePair, terms: LossTerms, scale: f64) -> Result<Option<(LossBreakdown, Vec<Tensor>)>> {
    let cfg = &model.config;
    let mut g = Graph::new(&model.store);
    let x = g.input(sample.image.as_tensor().clone());
    let vars = forward_graph(&mut g, model, x);
    let history_vars: Vec<Var> = vars.rsr.as_ref().map_or(Vec::new(), |r| r.history.clone());
    let outputs = history_vars.iter().chain([&vars.m_fnl, &vars.m_dec]);
    if outputs.into_iter().any(|&v| !g.value(v).all_finite()) {
        return Ok(None);
    }
    let history = history_vars.iter().map(|&v| mask_of(&g, v)).collect::<Result<Vec<_>>>()?;
    let m_fnl = mask_of(&g, vars.m_fnl)?;
    let m_dec = cfg.decoder_loss.then(|| mask_of(&g, vars.m_dec)).transpose()?;
    let (breakdown, grads) = compose(&history, &m_fnl, m_dec.as_ref(), &sample.mask, cfg.loss_lambda, terms, true)?;
    if !breakdown.total.is_finite() {
        return Ok(None);
    }
    let grads = grads.expect("gradients requested");
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| (x * scale) as f32).collect::<Vec<f32>>();
    let mut inputs = history_vars;
    let mut loss_grads: Vec<Vec<f32>> = grads.history.into_iter().map(to_f32).collect();
    inputs.push(vars.m_fnl);
    loss_grads.push(to_f32(grads.final_mask));
    if let Some(d) = grads.decoder {
        inputs.push(vars.m_dec);
        loss_grads.push(to_f32(d));
    }
    let root = g.external_loss(breakdown.total, inputs, loss_grads);
    Ok(Some((breakdown, g.backward(root))))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the batch.
    pub total: f64,
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
    pub ids: Vec<String>,
}

impl StepRecord {
    pub fn row(&self) -> String {
        format!(
            "{}\t{:e}\t{:?}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.total, self.bce, self.ssim, self.iou
        )
    }
}

/// Computes the batch loss, applies one Adam update and returns the log
/// record. The loss is measured before the update.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&SamplePair], lr: f64, step: usize, epoch: usize) -> Result<StepRecord> {
    let terms = terms_of(&model.config);
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.store.zeros_like();
    let (mut total, mut bce, mut ssim, mut iou) = (0.0, 0.0, 0.0, 0.0);
    let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
    for sample in batch {
        let Some((b, g)) = sample_gradients(model, sample, terms, scale)? else {
            return Err(Error::NonFinite { step, ids });
        };
        let (mb, ms, mi) = b.term_means();
        total += b.total;
        bce += mb;
        ssim += ms;
        iou += mi;
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.add_assign(g);
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { step, ids });
    }
    adam.step(&mut model.store, &grads, lr);
    Ok(StepRecord {
        step,
        epoch,
        lr,
        total: total * scale,
        bce: bce * scale,
        ssim: ssim * scale,
        iou: iou * scale,
        ids,
    })
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub records: Vec<StepRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl TrainResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const NAN_DUMP: &str = "nan_dump.txt";

fn checkpoint_meta(cfg: &ModelConfig, step: usize) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("steps".into(), step.to_string());
    meta
}

/// Trains a fresh model (seeded by `cfg.seed`) on `samples`. With
/// `out_dir`, writes the step log, periodic checkpoints and the final
/// checkpoint there.
pub fn train_samples(cfg: &ModelConfig, samples: &[SamplePair], out_dir: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let samples = samples.iter().map(|s| s.resized(cfg.input_size)).collect::<Result<Vec<_>>>()?;
    LossTerms::from_config(cfg);
    let mut model = Model::new(cfg, cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", LossBreakdown::LOG_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            step += 1;
            let refs: Vec<&SamplePair> = batch.iter().map(|&i| &samples[i]).collect();
            let record = match train_step(&mut model, &mut adam, &refs, lr, step, epoch) {
                Ok(r) => r,
                Err(err @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join(NAN_DUMP);
                        let ids: Vec<&str> = refs.iter().map(|s| s.id.as_str()).collect();
                        let text = format!("step {step}\nepoch {epoch}\nlr {lr:e}\nbatch {}\n", ids.join(" "));
                        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                    }
                    log::error!("{err}");
                    return Err(err);
                }
                Err(e) => return Err(e),
            };
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", record.row()).map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("step {step} loss {:.5}", record.total);
            if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                let ck = Checkpoint::from_model(&model, step as u64, checkpoint_meta(cfg, step));
                save_checkpoint(&ck, &dir.join("checkpoints").join(format!("step_{step:06}.ckpt")))?;
            }
            records.push(record);
        }
        if let Some(last) = records.last() {
            log::info!("epoch {} done: step {step}, loss {:.5}, lr {lr:e}", epoch + 1, last.total);
        }
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&Checkpoint::from_model(&model, step as u64, checkpoint_meta(cfg, step)), &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainResult {
        model,
        records,
        checkpoint,
    })
}

/// Trains on the train split of the dataset in `dataset_dir`.
pub fn train(cfg: &ModelConfig, dataset_dir: &Path, out_dir: &Path) -> Result<TrainResult> {
    let ds = load_dataset(dataset_dir)?;
    let samples = ds.train();
    log::info!("training on {} samples from {}", samples.len(), dataset_dir.display());
    train_samples(cfg, &samples, Some(out_dir))
}

/// Scores of the recurrent, decoder and final masks.
#[derive(Clone, Debug)]
pub struct ThreeMaskReport {
    /// Absent without the recurrent module.
    pub rsr: Option<EvalReport>,
    pub dec: EvalReport,
    pub fnl: EvalReport,
}

impl fmt::Display for ThreeMaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {}", "mask", EvalReport::HEADER)?;
        match &self.rsr {
            Some(r) => writeln!(f, "{:<8} {}", "M̄_rsr", r.row())?,
            None => writeln!(f, "{:<8} -", "M̄_rsr")?,
        }
        writeln!(f, "{:<8} {}", "M_dec", self.dec.row())?;
        write!(f, "{:<8} {}", "M_fnl", self.fnl.row())
    }
}

/// Runs the model on every sample and scores the three masks.
pub fn evaluate_samples(model: &Model, samples: &[SamplePair], mode: ApMode) -> Result<ThreeMaskReport> {
    let mut outs = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let s = s.resized(model.config.input_size)?;
        outs.push(forward(model, &s.image)?);
        gts.push(s.mask);
    }
    let score = |pick: &dyn Fn(&ForwardOutput) -> &MaskMap| {
        evaluate_pairs(
            samples.iter().zip(&outs).zip(&gts).map(|((s, o), g)| (s.id.as_str(), pick(o), g)),
            mode,
        )
    };
    Ok(ThreeMaskReport {
        rsr: model.rsr.is_some().then(|| score(&|o| &o.m_rsr_up)).transpose()?,
        dec: score(&|o| &o.m_dec)?,
        fnl: score(&|o| &o.m_fnl)?,
    })
}

/// Loads a checkpoint and scores it on the test split of a dataset.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, requested: Option<&ModelConfig>, mode: ApMode) -> Result<ThreeMaskReport> {
    let model = load_checkpoint(checkpoint)?.into_model(requested)?;
    let ds = load_dataset(dataset_dir)?;
    let test = ds.test();
    if test.is_empty() {
        return Err(Error::Dataset(format!("{} has no test samples", dataset_dir.display())));
    }
    evaluate_samples(&model, &test, mode)
}

/// One trained `(row, seed)` cell of an ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub report: ThreeMaskReport,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    /// Component-ablation row, 1..=9.
    pub row: usize,
    pub runs: Vec<AblationRun>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn name(&self) -> &'static str {
        crate::config::ABLATION_ROWS[self.row - 1]
    }

    /// Mean and standard deviation across seeds of a final-mask score.
    pub fn final_stat(&self, pick: impl Fn(&EvalReport) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| pick(&r.report.fnl)).collect::<Vec<_>>())
    }
}

/// Results of [`ablate`], printed as a component table followed by the
/// per-mask breakdown of every row that keeps the recurrent module.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds = self.rows.first().map_or(0, |r| r.runs.len());
        writeln!(f, "Component ablation, final mask, mean ± std over {seeds} seed(s)")?;
        writeln!(f, "{:<4} {:<30} {:<16} {:<16} {}", "row", "model", "AP(%)↑", "F1↑", "IoU(%)↑")?;
        for r in &self.rows {
            let (ap, ap_s) = r.final_stat(|e| e.ap_percent);
            let (f1, f1_s) = r.final_stat(|e| e.f1);
            let (iou, iou_s) = r.final_stat(|e| e.iou_percent);
            writeln!(
                f,
                "{:<4} {:<30} {:<16} {:<16} {}",
                r.row,
                r.name(),
                format!("{ap:.2} ± {ap_s:.2}"),
                format!("{f1:.4} ± {f1_s:.4}"),
                format!("{iou:.2} ± {iou_s:.2}")
            )?;
        }
        writeln!(f)?;
        writeln!(f, "Per-mask breakdown (AP(%)↑ / F1↑ / IoU(%)↑, seed means)")?;
        writeln!(f, "{:<4} {:<30} {:<24} {:<24} {}", "row", "model", "M̄_rsr", "M_dec", "M_fnl")?;
        for r in self.rows.iter().filter(|r| r.runs.iter().all(|x| x.report.rsr.is_some())) {
            let cell = |pick: &dyn Fn(&ThreeMaskReport) -> &EvalReport| {
                let stat = |g: &dyn Fn(&EvalReport) -> f64| mean_std(&r.runs.iter().map(|x| g(pick(&x.report))).collect::<Vec<_>>()).0;
                format!("{:.2} / {:.4} / {:.2}", stat(&|e| e.ap_percent), stat(&|e| e.f1), stat(&|e| e.iou_percent))
            };
            writeln!(
                f,
                "{:<4} {:<30} {:<24} {:<24} {}",
                r.row,
                r.name(),
                cell(&|x| x.rsr.as_ref().expect("filtered")),
                cell(&|x| &x.dec),
                cell(&|x| &x.fnl)
            )?;
        }
        Ok(())
    }
}

/// Trains every requested ablation row once per seed on `train` and scores
/// it on `test`. With `out_dir`, each run writes its outputs to
/// `row{r}_seed{s}/`.
pub fn ablate(
    base: &ModelConfig,
    train: &[SamplePair],
    test: &[SamplePair],
    rows: &[usize],
    seeds: &[u64],
    mode: ApMode,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for &row in rows {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ModelConfig {
                seed,
                ..base.with_ablation_row(row)?
            };
            log::info!("ablation row {row} ({}), seed {seed}", crate::config::ABLATION_ROWS[row - 1]);
            let dir = out_dir.map(|d| d.join(format!("row{row}_seed{seed}")));
            let trained = train_samples(&cfg, train, dir.as_deref())?;
            let report = evaluate_samples(&trained.model, test, mode)?;
            runs.push(AblationRun {
                seed,
                final_loss: trained.final_loss(),
                report,
            });
        }
        out.push(AblationRow { row, runs });
    }
    Ok(AblationReport { rows: out })
}
