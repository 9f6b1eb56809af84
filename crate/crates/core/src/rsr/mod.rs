//! Recurrent self-reasoning module.
//!
//! Each iteration alternates a clustering-style update and assignment:
//!
//! 1. average the style features over the pixels the current mask calls
//!    background (`mask < ε`) to get the background centroid `f_bg`;
//! 2. compare `f_bg` with box-aggregated style features at every scale `l`
//!    (window side `2l+1`) by cosine similarity, giving the multi-scale
//!    similarity map;
//! 3. feed the similarity map, the current mask and the conventional
//!    features through a convolutional GRU;
//! 4. add the residual predicted from the new hidden state to the mask
//!    logits, and upsample the new mask to full resolution with learned
//!    convex weights.
//!
//! The mask is kept as logits so the residual update never leaves `[0, 1]`
//! after the sigmoid. The GRU weights are shared across iterations.

pub(crate) mod kernels;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::model::Model;
use crate::params::{Conv2d, ParamBuilder};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, MaskMap};

#[derive(Clone, Debug)]
pub struct GruLayers {
    pub z: Conv2d,
    pub r: Conv2d,
    pub h: Conv2d,
}

/// Parameters of the recurrent module. Which layers exist depends on the
/// ablation flags; the similarity-only variant has none.
#[derive(Clone, Debug, Default)]
pub struct RsrLayers {
    pub init_hidden: Option<Conv2d>,
    pub sim_branch: Option<Conv2d>,
    pub mask_branch: Option<Conv2d>,
    pub gru: Option<GruLayers>,
    /// Two plain convolutions replacing the GRU (`no_gru`).
    pub plain: Option<[Conv2d; 2]>,
    pub mask_head: Option<[Conv2d; 2]>,
    pub upsample_head: Option<[Conv2d; 2]>,
}

/// Channels of the recurrent input `X`.
pub fn gru_input_channels(cfg: &ModelConfig) -> usize {
    let sim = if cfg.no_msm { 0 } else { cfg.sim_branch_dim };
    sim + cfg.mask_branch_dim + cfg.feature_dim + 1
}

/// Registers the recurrent module under `rsr.*`.
pub fn build_rsr(cfg: &ModelConfig, b: &mut ParamBuilder) -> RsrLayers {
    if cfg.similarity_only {
        return RsrLayers::default();
    }
    let c = cfg.coarse_size();
    let hw = (c, c);
    let k = cfg.num_iterations;
    let hid = cfg.gru_hidden_dim;
    let x_dim = gru_input_channels(cfg);
    let s = cfg.downscale_factor;

    let init_hidden = (!cfg.no_gru).then(|| b.conv("rsr.init_hidden", cfg.feature_dim, hid, 3, 1, hw, 1));
    let sim_branch = (!cfg.no_msm).then(|| b.conv("rsr.sim_branch", cfg.scales.len(), cfg.sim_branch_dim, 3, 1, hw, k));
    let mask_branch = Some(b.conv("rsr.mask_branch", 1, cfg.mask_branch_dim, 3, 1, hw, k));
    let (gru, plain) = if cfg.no_gru {
        let plain = [
            b.conv("rsr.plain.0", x_dim, hid, 3, 1, hw, k),
            b.conv("rsr.plain.1", hid, hid, 3, 1, hw, k),
        ];
        (None, Some(plain))
    } else {
        let gru = GruLayers {
            z: b.conv("rsr.gru.z", hid + x_dim, hid, 3, 1, hw, k),
            r: b.conv("rsr.gru.r", hid + x_dim, hid, 3, 1, hw, k),
            h: b.conv("rsr.gru.h", hid + x_dim, hid, 3, 1, hw, k),
        };
        (Some(gru), None)
    };
    let mask_head = Some([
        b.conv("rsr.mask_head.0", hid, cfg.mask_head_dim, 3, 1, hw, k),
        b.conv("rsr.mask_head.1", cfg.mask_head_dim, 1, 1, 1, hw, k),
    ]);
    let upsample_head = (!cfg.bilinear_upsample).then(|| {
        [
            b.conv("rsr.upsample_head.0", hid, cfg.upsample_head_dim, 3, 1, hw, k),
            b.conv("rsr.upsample_head.1", cfg.upsample_head_dim, s * s * 9, 1, 1, hw, k),
        ]
    });
    RsrLayers {
        init_hidden,
        sim_branch,
        mask_branch,
        gru,
        plain,
        mask_head,
        upsample_head,
    }
}

/// Loop state as graph nodes.
pub(crate) struct GraphState {
    pub mask: Var,
    pub logits: Option<Var>,
    pub hidden: Option<Var>,
}

pub(crate) struct IterationVars {
    pub similarity: Option<Var>,
    pub upsampled: Var,
}

pub(crate) struct RsrVars {
    pub coarse: Var,
    pub upsampled: Var,
    pub history: Vec<Var>,
    pub similarities: Vec<Option<Var>>,
}

fn conv_pair(g: &mut Graph, convs: &[Conv2d; 2], x: Var) -> Var {
    let h = g.conv(&convs[0], x);
    let h = g.relu(h);
    g.conv(&convs[1], h)
}

pub(crate) struct GruVars {
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
    pub hidden: Var,
}

pub(crate) fn gru_graph(g: &mut Graph, gru: &GruLayers, x: Var, h: Var) -> GruVars {
    let hx = g.concat(&[h, x]);
    let z = g.conv(&gru.z, hx);
    let z = g.sigmoid(z);
    let r = g.conv(&gru.r, hx);
    let r = g.sigmoid(r);
    let rh = g.mul(r, h);
    let rhx = g.concat(&[rh, x]);
    let q = g.conv(&gru.h, rhx);
    let candidate = g.tanh(q);
    let keep = g.affine(z, -1.0, 1.0);
    let old = g.mul(keep, h);
    let new = g.mul(z, candidate);
    let hidden = g.add(old, new);
    GruVars { z, r, candidate, hidden }
}

pub(crate) fn initial_state(g: &mut Graph, layers: &RsrLayers, cfg: &ModelConfig, context: Var) -> GraphState {
    let (_, h, w) = g.value(context).chw();
    let logits = g.input(Tensor::full(&[1, h, w], cfg.mask_logit_init));
    let mask = g.sigmoid(logits);
    let hidden = layers.init_hidden.as_ref().map(|c| {
        let h0 = g.conv(c, context);
        g.tanh(h0)
    });
    GraphState {
        mask,
        logits: (!cfg.similarity_only).then_some(logits),
        hidden,
    }
}

/// Box sums of `F_s` for every configured scale.
pub(crate) fn scale_aggregates(g: &mut Graph, cfg: &ModelConfig, fs: Var) -> Vec<Var> {
    if cfg.similarity_only || cfg.no_msm {
        return Vec::new();
    }
    cfg.scales.iter().map(|&l| g.box_sum(fs, l)).collect()
}

pub(crate) fn iterate(
    g: &mut Graph,
    layers: &RsrLayers,
    cfg: &ModelConfig,
    fs: Var,
    context: Var,
    aggregates: &[Var],
    state: &mut GraphState,
) -> IterationVars {
    let s = cfg.downscale_factor;
    let selected: Vec<bool> = g
        .value(state.mask)
        .data()
        .iter()
        .map(|&m| m < cfg.mask_threshold)
        .collect();
    let f_bg = g.masked_mean(fs, selected);

    if cfg.similarity_only {
        let sim = g.cosine(f_bg, fs);
        // Dissimilar to the background centroid means inharmonious.
        let mask = g.affine(sim, -0.5, 0.5);
        let upsampled = g.upsample_bilinear(mask, s);
        state.mask = mask;
        return IterationVars {
            similarity: Some(sim),
            upsampled,
        };
    }

    let similarity = (!aggregates.is_empty()).then(|| {
        let sims: Vec<Var> = aggregates.iter().map(|&a| g.cosine(f_bg, a)).collect();
        g.concat(&sims)
    });
    let mut parts = Vec::with_capacity(4);
    if let (Some(branch), Some(sim)) = (&layers.sim_branch, similarity) {
        parts.push(g.conv(branch, sim));
    }
    let mask_branch = layers.mask_branch.as_ref().expect("mask branch present");
    parts.push(g.conv(mask_branch, state.mask));
    parts.push(context);
    parts.push(state.mask);
    let x = g.concat(&parts);

    let hidden = match (&layers.gru, &layers.plain) {
        (Some(gru), _) => gru_graph(g, gru, x, state.hidden.expect("GRU state initialized")).hidden,
        (None, Some(plain)) => {
            let h = conv_pair(g, plain, x);
            g.tanh(h)
        }
        (None, None) => unreachable!("recurrent layers missing"),
    };
    let delta = conv_pair(g, layers.mask_head.as_ref().expect("mask head present"), hidden);
    let logits = g.add(state.logits.expect("logit state"), delta);
    let mask = g.sigmoid(logits);
    let upsampled = match &layers.upsample_head {
        Some(head) => {
            let weights = conv_pair(g, head, hidden);
            g.convex_upsample(mask, weights, s)
        }
        None => g.upsample_bilinear(mask, s),
    };
    state.mask = mask;
    state.logits = Some(logits);
    state.hidden = Some(hidden);
    IterationVars { similarity, upsampled }
}

pub(crate) fn run_rsr_graph(g: &mut Graph, layers: &RsrLayers, cfg: &ModelConfig, fs: Var, fc: Var) -> RsrVars {
    let context = if cfg.no_fc { fs } else { fc };
    let aggregates = scale_aggregates(g, cfg, fs);
    let mut state = initial_state(g, layers, cfg, context);
    let mut history = Vec::with_capacity(cfg.num_iterations);
    let mut similarities = Vec::with_capacity(cfg.num_iterations);
    for _ in 0..cfg.num_iterations {
        let it = iterate(g, layers, cfg, fs, context, &aggregates, &mut state);
        history.push(it.upsampled);
        similarities.push(it.similarity);
    }
    RsrVars {
        coarse: state.mask,
        upsampled: *history.last().expect("at least one iteration"),
        history,
        similarities,
    }
}

/// Multi-scale similarity map: one channel per scale, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    values: FeatureMap,
    scales: Vec<usize>,
}

impl SimilarityMap {
    pub fn new(values: FeatureMap, scales: Vec<usize>) -> Result<Self> {
        if values.channels() != scales.len() {
            return Err(Error::shape("SimilarityMap::new", scales.len(), values.channels()));
        }
        if let Some(v) = values.values().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMap { values, scales })
    }

    pub fn values(&self) -> &FeatureMap {
        &self.values
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// Channel for neighborhood scale `l`, if present.
    pub fn scale(&self, l: usize) -> Option<&[f32]> {
        self.scales.iter().position(|&s| s == l).map(|i| self.values.channel(i))
    }
}

fn check_same_hw(op: &'static str, f: &FeatureMap, mask: &MaskMap) -> Result<()> {
    if f.height() != mask.height() || f.width() != mask.width() {
        return Err(Error::shape(
            op,
            format!("{}x{}", f.height(), f.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// Mean style feature over pixels with `mask < eps`; the global mean when
/// no pixel qualifies.
pub fn background_style_feature(fs: &FeatureMap, mask: &MaskMap, eps: f32) -> Result<Vec<f32>> {
    check_same_hw("background_style_feature", fs, mask)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {eps} outside (0, 1)")));
    }
    let selected: Vec<bool> = mask.values().iter().map(|&m| m < eps).collect();
    let (out, _) = kernels::masked_mean(fs.as_tensor(), &selected);
    Ok(out.into_data())
}

/// Channelwise sum over the `(2l+1)×(2l+1)` neighborhood, zero outside the
/// map.
pub fn neighborhood_sum(fs: &FeatureMap, l: usize) -> FeatureMap {
    FeatureMap::from_tensor(kernels::box_sum(fs.as_tensor(), l)).expect("box sum of finite map is finite")
}

/// Cosine similarity between `f_bg` and the neighborhood sums of `fs` at
/// each scale. A zero `f_bg` yields an all-zero map.
pub fn multiscale_similarity(fs: &FeatureMap, f_bg: &[f32], scales: &[usize]) -> Result<SimilarityMap> {
    if f_bg.len() != fs.channels() {
        return Err(Error::shape("multiscale_similarity", fs.channels(), f_bg.len()));
    }
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no similarity scales".into()));
    }
    if f_bg.iter().all(|&v| v == 0.0) {
        log::warn!("background style feature has zero norm; similarity map set to zero");
    }
    let mut data = Vec::with_capacity(scales.len() * fs.height() * fs.width());
    for &l in scales {
        let agg = kernels::box_sum(fs.as_tensor(), l);
        data.extend_from_slice(kernels::cosine_map(f_bg, &agg).data());
    }
    let values = FeatureMap::new(scales.len(), fs.height(), fs.width(), data)?;
    SimilarityMap::new(values, scales.to_vec())
}

/// Intermediate values of one GRU update.
#[derive(Clone, Debug)]
pub struct GruTrace {
    pub update_gate: FeatureMap,
    pub reset_gate: FeatureMap,
    pub candidate: FeatureMap,
    pub hidden: FeatureMap,
}

fn require_gru(model: &Model) -> Result<&GruLayers> {
    model
        .rsr
        .as_ref()
        .and_then(|r| r.gru.as_ref())
        .ok_or_else(|| Error::InvalidArgument("model has no GRU (no_rsr, no_gru or similarity_only)".into()))
}

pub fn gru_step_trace(model: &Model, x: &FeatureMap, h: &FeatureMap) -> Result<GruTrace> {
    let gru = require_gru(model)?;
    if x.height() != h.height() || x.width() != h.width() {
        return Err(Error::shape(
            "gru_step",
            format!("{}x{}", h.height(), h.width()),
            format!("{}x{}", x.height(), x.width()),
        ));
    }
    let hid = model.config.gru_hidden_dim;
    let xin = gru_input_channels(&model.config);
    if h.channels() != hid || x.channels() != xin {
        return Err(Error::shape(
            "gru_step",
            format!("X with {xin} channels, H with {hid}"),
            format!("X with {}, H with {}", x.channels(), h.channels()),
        ));
    }
    let mut g = Graph::inference(&model.store);
    let xv = g.input(x.as_tensor().clone());
    let hv = g.input(h.as_tensor().clone());
    let out = gru_graph(&mut g, gru, xv, hv);
    let fm = |v: Var| FeatureMap::from_tensor(g.value(v).clone());
    Ok(GruTrace {
        update_gate: fm(out.z)?,
        reset_gate: fm(out.r)?,
        candidate: fm(out.candidate)?,
        hidden: fm(out.hidden)?,
    })
}

/// One convolutional GRU update `H' = (1-Z)⊙H + Z⊙H̃`.
pub fn gru_step(model: &Model, x: &FeatureMap, h: &FeatureMap) -> Result<FeatureMap> {
    Ok(gru_step_trace(model, x, h)?.hidden)
}

/// Builds `X = [conv(S), conv(M), context, M]`. The caller passes `F_c`
/// as `context`, or `F_s` under `no_fc`. `similarity` is ignored under
/// `no_msm`.
pub fn build_gru_input(
    model: &Model,
    similarity: Option<&SimilarityMap>,
    context: &FeatureMap,
    mask: &MaskMap,
) -> Result<FeatureMap> {
    let layers = model
        .rsr
        .as_ref()
        .filter(|r| r.mask_branch.is_some())
        .ok_or_else(|| Error::InvalidArgument("model has no recurrent input branches".into()))?;
    check_same_hw("build_gru_input", context, mask)?;
    if context.channels() != model.config.feature_dim {
        return Err(Error::shape("build_gru_input", model.config.feature_dim, context.channels()));
    }
    let mut g = Graph::inference(&model.store);
    let mut parts = Vec::new();
    if let Some(branch) = &layers.sim_branch {
        let s = similarity.ok_or_else(|| Error::InvalidArgument("similarity map required".into()))?;
        let sv = s.values();
        if sv.height() != mask.height() || sv.width() != mask.width() || sv.channels() != model.config.scales.len() {
            return Err(Error::shape(
                "build_gru_input",
                format!("{}x{}x{}", model.config.scales.len(), mask.height(), mask.width()),
                format!("{}x{}x{}", sv.channels(), sv.height(), sv.width()),
            ));
        }
        let sv = g.input(sv.as_tensor().clone());
        parts.push(g.conv(branch, sv));
    }
    let m = g.input(mask.to_tensor());
    parts.push(g.conv(layers.mask_branch.as_ref().expect("checked"), m));
    parts.push(g.input(context.as_tensor().clone()));
    parts.push(m);
    let x = g.concat(&parts);
    FeatureMap::from_tensor(g.value(x).clone())
}

/// Convex upsampling with already-normalized weights of shape
/// `[s²·9, h, w]` (channel `n·s² + dy·s + dx`).
pub fn convex_upsample(mask: &MaskMap, weights: &Tensor, factor: usize) -> Result<MaskMap> {
    let (c, h, w) = weights.chw();
    if c != 9 * factor * factor || h != mask.height() || w != mask.width() {
        return Err(Error::shape(
            "convex_upsample",
            format!("{}x{}x{}", 9 * factor * factor, mask.height(), mask.width()),
            format!("{c}x{h}x{w}"),
        ));
    }
    let ss = factor * factor;
    let plane = h * w;
    for sub in 0..ss {
        for p in 0..plane {
            let total: f32 = (0..9).map(|n| weights.data()[(n * ss + sub) * plane + p]).sum();
            let any_negative = (0..9).any(|n| weights.data()[(n * ss + sub) * plane + p] < 0.0);
            if any_negative || (total - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "upsample weights not normalized at sub-pixel {sub}, pixel {p} (sum {total})"
                )));
            }
        }
    }
    let out = kernels::convex_upsample(&mask.to_tensor(), weights, factor);
    MaskMap::from_clamped(h * factor, w * factor, out.into_data())
}

/// State of the recurrent loop between iterations.
#[derive(Clone, Debug)]
pub struct RsrState {
    /// Unconstrained coarse logits; `mask = sigmoid(mask_logits)`.
    pub mask_logits: Vec<f32>,
    pub mask: MaskMap,
    /// Absent for the similarity-only variant.
    pub hidden: Option<FeatureMap>,
    pub iteration: usize,
    pub upsampled_history: Vec<MaskMap>,
}

fn require_rsr(model: &Model) -> Result<&RsrLayers> {
    model
        .rsr
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model was built without the recurrent module".into()))
}

fn check_features(model: &Model, fs: &FeatureMap, fc: &FeatureMap) -> Result<()> {
    let c = model.config.feature_dim;
    if fs.channels() != c || fc.channels() != c || fs.height() != fc.height() || fs.width() != fc.width() {
        return Err(Error::shape(
            "run_rsr",
            format!("two {c}-channel maps of equal size"),
            format!(
                "{}x{}x{} and {}x{}x{}",
                fs.channels(),
                fs.height(),
                fs.width(),
                fc.channels(),
                fc.height(),
                fc.width()
            ),
        ));
    }
    Ok(())
}

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

impl RsrState {
    /// `M⁰ = sigmoid(mask_logit_init)` everywhere and `H⁰ = tanh(conv(F_c))`.
    pub fn initial(model: &Model, fs: &FeatureMap, fc: &FeatureMap) -> Result<Self> {
        let layers = require_rsr(model)?;
        check_features(model, fs, fc)?;
        let cfg = &model.config;
        let context = if cfg.no_fc { fs } else { fc };
        let mut g = Graph::inference(&model.store);
        let ctx = g.input(context.as_tensor().clone());
        let st = initial_state(&mut g, layers, cfg, ctx);
        let (h, w) = (fs.height(), fs.width());
        let logits = vec![cfg.mask_logit_init; h * w];
        let mask = MaskMap::new(h, w, logits.iter().map(|&l| sigmoid(l)).collect())?;
        let hidden = st
            .hidden
            .map(|v| FeatureMap::from_tensor(g.value(v).clone()))
            .transpose()?;
        Ok(RsrState {
            mask_logits: logits,
            mask,
            hidden,
            iteration: 0,
            upsampled_history: Vec::new(),
        })
    }
}

/// Advances the loop by one iteration.
pub fn rsr_iteration(model: &Model, state: &RsrState, fs: &FeatureMap, fc: &FeatureMap) -> Result<RsrState> {
    let layers = require_rsr(model)?;
    check_features(model, fs, fc)?;
    let cfg = &model.config;
    if state.iteration >= cfg.num_iterations {
        return Err(Error::InvalidArgument(format!(
            "iteration {} already reached K = {}",
            state.iteration, cfg.num_iterations
        )));
    }
    let (h, w) = (fs.height(), fs.width());
    let mut g = Graph::inference(&model.store);
    let fs_v = g.input(fs.as_tensor().clone());
    let fc_v = g.input(fc.as_tensor().clone());
    let context = if cfg.no_fc { fs_v } else { fc_v };
    let aggregates = scale_aggregates(&mut g, cfg, fs_v);
    let logits = g.input(Tensor::from_vec(&[1, h, w], state.mask_logits.clone()));
    let mask = if cfg.similarity_only {
        g.input(state.mask.to_tensor())
    } else {
        g.sigmoid(logits)
    };
    let hidden = state.hidden.as_ref().map(|hs| g.input(hs.as_tensor().clone()));
    let mut gs = GraphState {
        mask,
        logits: (!cfg.similarity_only).then_some(logits),
        hidden,
    };
    let it = iterate(&mut g, layers, cfg, fs_v, context, &aggregates, &mut gs);
    let mask = MaskMap::from_clamped(h, w, g.value(gs.mask).data().to_vec())?;
    let mask_logits = match gs.logits {
        Some(l) => g.value(l).data().to_vec(),
        None => mask.values().iter().map(|&p| logit(p)).collect(),
    };
    let up = g.value(it.upsampled);
    let (_, uh, uw) = up.chw();
    let mut upsampled_history = state.upsampled_history.clone();
    upsampled_history.push(MaskMap::from_clamped(uh, uw, up.data().to_vec())?);
    Ok(RsrState {
        mask_logits,
        mask,
        hidden: gs.hidden.map(|v| FeatureMap::from_tensor(g.value(v).clone())).transpose()?,
        iteration: state.iteration + 1,
        upsampled_history,
    })
}

#[derive(Clone, Debug)]
pub struct RsrOutput {
    /// Final coarse mask `M_rsr`.
    pub m_rsr: MaskMap,
    /// Its full-resolution version.
    pub m_rsr_up: MaskMap,
    /// Upsampled mask of every iteration, first to last.
    pub history: Vec<MaskMap>,
    /// Similarity map used at each iteration (absent under `no_msm`).
    pub similarities: Vec<Option<SimilarityMap>>,
}

/// Runs all `K` iterations from the initial state.
pub fn run_rsr(model: &Model, fs: &FeatureMap, fc: &FeatureMap) -> Result<RsrOutput> {
    let layers = require_rsr(model)?;
    check_features(model, fs, fc)?;
    let cfg = &model.config;
    let mut g = Graph::inference(&model.store);
    let fs_v = g.input(fs.as_tensor().clone());
    let fc_v = g.input(fc.as_tensor().clone());
    let vars = run_rsr_graph(&mut g, layers, cfg, fs_v, fc_v);
    collect_rsr_output(&g, cfg, &vars)
}

pub(crate) fn mask_of(g: &Graph, v: Var) -> Result<MaskMap> {
    let t = g.value(v);
    let (_, h, w) = t.chw();
    MaskMap::from_clamped(h, w, t.data().to_vec())
}

pub(crate) fn collect_rsr_output(g: &Graph, cfg: &ModelConfig, vars: &RsrVars) -> Result<RsrOutput> {
    let history = vars.history.iter().map(|&v| mask_of(g, v)).collect::<Result<Vec<_>>>()?;
    let scales = if cfg.similarity_only { vec![0] } else { cfg.scales.clone() };
    let similarities = vars
        .similarities
        .iter()
        .map(|s| {
            s.map(|v| {
                let fm = FeatureMap::from_tensor(g.value(v).clone())?;
                SimilarityMap::new(fm, scales.clone())
            })
            .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RsrOutput {
        m_rsr: mask_of(g, vars.coarse)?,
        m_rsr_up: mask_of(g, vars.upsampled)?,
        history,
        similarities,
    })
}
