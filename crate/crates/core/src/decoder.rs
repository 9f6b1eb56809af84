//! UNet decoder guided by the recurrent mask, and the adaptive combination
//! of the decoder and recurrent masks.
//!
//! The coarse recurrent mask is concatenated to the bottleneck before the
//! first decoder block. Each block upsamples by 2 (bilinear), concatenates
//! the matching encoder skip and applies two 3×3 conv + ReLU layers. A 1×1
//! conv and sigmoid produce `M_dec`.
//!
//! The combination mask `G` comes from a 3×3 conv, ReLU, 1×1 conv and
//! sigmoid over `[M_dec, M̄_rsr, last decoder feature]`, and
//! `M_fnl = G⊙M_dec + (1-G)⊙M̄_rsr`.

use crate::config::ModelConfig;
use crate::encoder::{bottleneck_channels, skip_channels};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::{Conv2d, ParamBuilder};
use crate::rsr::mask_of;
use crate::tensor::Tensor;
use crate::types::{FeatureMap, MaskMap};

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DecoderLayers {
    /// Coarsest first.
    pub blocks: Vec<DecoderBlock>,
    pub head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct FusionLayers {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

pub fn build_decoder(cfg: &ModelConfig, b: &mut ParamBuilder) -> DecoderLayers {
    let skips = skip_channels(cfg);
    let mut c_in = bottleneck_channels(cfg) + 1;
    let mut res = cfg.coarse_size();
    let mut blocks = Vec::with_capacity(skips.len());
    for (i, &skip) in skips.iter().rev().enumerate() {
        res *= 2;
        let conv1 = b.conv(&format!("decoder.block{i}.conv1"), c_in + skip, skip, 3, 1, (res, res), 1);
        let conv2 = b.conv(&format!("decoder.block{i}.conv2"), skip, skip, 3, 1, (res, res), 1);
        blocks.push(DecoderBlock { conv1, conv2 });
        c_in = skip;
    }
    let head = b.conv("decoder.head", c_in, 1, 1, 1, (res, res), 1);
    DecoderLayers { blocks, head }
}

pub fn build_fusion(cfg: &ModelConfig, b: &mut ParamBuilder) -> FusionLayers {
    let last = skip_channels(cfg)[0];
    let s = cfg.input_size;
    FusionLayers {
        hidden: b.conv("fusion.0", 2 + last, cfg.fusion_hidden_dim, 3, 1, (s, s), 1),
        out: b.conv("fusion.1", cfg.fusion_hidden_dim, 1, 1, 1, (s, s), 1),
    }
}

/// Returns `(M_dec, last feature)`.
pub(crate) fn decode_graph(
    g: &mut Graph,
    layers: &DecoderLayers,
    bottleneck: Var,
    guidance: Var,
    skips: &[Var],
) -> (Var, Var) {
    let mut x = g.concat(&[bottleneck, guidance]);
    for (block, &skip) in layers.blocks.iter().zip(skips.iter().rev()) {
        let up = g.upsample_bilinear(x, 2);
        let cat = g.concat(&[up, skip]);
        let y = g.conv(&block.conv1, cat);
        let y = g.relu(y);
        let y = g.conv(&block.conv2, y);
        x = g.relu(y);
    }
    let logits = g.conv(&layers.head, x);
    (g.sigmoid(logits), x)
}

/// Returns `(G, M_fnl)`; `G` is `None` when the decoder mask passes
/// through unchanged.
pub(crate) fn fuse_graph(
    g: &mut Graph,
    fusion: Option<&FusionLayers>,
    cfg: &ModelConfig,
    m_dec: Var,
    m_rsr_up: Var,
    last_feat: Var,
) -> (Option<Var>, Var) {
    if cfg.no_rsr || cfg.no_fusion {
        return (None, m_dec);
    }
    let gate = if cfg.simple_average {
        let shape = g.value(m_dec).shape().to_vec();
        g.input(Tensor::full(&shape, 0.5))
    } else {
        let layers = fusion.expect("fusion head present");
        let cat = g.concat(&[m_dec, m_rsr_up, last_feat]);
        let h = g.conv(&layers.hidden, cat);
        let h = g.relu(h);
        let o = g.conv(&layers.out, h);
        g.sigmoid(o)
    };
    let keep = g.affine(gate, -1.0, 1.0);
    let from_rsr = g.mul(keep, m_rsr_up);
    let from_dec = g.mul(gate, m_dec);
    (Some(gate), g.add(from_dec, from_rsr))
}

/// Runs the decoder on encoder outputs and the coarse recurrent mask.
/// Returns `M_dec` and the final decoder feature.
pub fn decode(model: &Model, bottleneck: &FeatureMap, m_rsr: &MaskMap, skips: &[FeatureMap]) -> Result<(MaskMap, FeatureMap)> {
    let cfg = &model.config;
    if m_rsr.height() != bottleneck.height() || m_rsr.width() != bottleneck.width() {
        return Err(Error::shape(
            "decode",
            format!("guidance {}x{}", bottleneck.height(), bottleneck.width()),
            format!("{}x{}", m_rsr.height(), m_rsr.width()),
        ));
    }
    let expected = skip_channels(cfg);
    if skips.len() != expected.len() {
        return Err(Error::shape("decode", format!("{} skips", expected.len()), skips.len()));
    }
    for (i, (skip, &c)) in skips.iter().zip(&expected).enumerate() {
        let res = bottleneck.height() << (expected.len() - i);
        if skip.channels() != c || skip.height() != res {
            return Err(Error::shape(
                "decode",
                format!("skip {i} of {c}x{res}"),
                format!("{}x{}", skip.channels(), skip.height()),
            ));
        }
    }
    if bottleneck.channels() != bottleneck_channels(cfg) {
        return Err(Error::shape("decode", bottleneck_channels(cfg), bottleneck.channels()));
    }
    let mut g = Graph::inference(&model.store);
    let b = g.input(bottleneck.as_tensor().clone());
    let m = g.input(m_rsr.to_tensor());
    let s: Vec<Var> = skips.iter().map(|f| g.input(f.as_tensor().clone())).collect();
    let (m_dec, last) = decode_graph(&mut g, &model.decoder, b, m, &s);
    Ok((mask_of(&g, m_dec)?, FeatureMap::from_tensor(g.value(last).clone())?))
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub m_dec: MaskMap,
    /// Combination mask; all ones when the decoder mask passes through.
    pub g: MaskMap,
    pub m_fnl: MaskMap,
}

/// Adaptive (or averaged) combination of the decoder and recurrent masks.
pub fn fuse(model: &Model, m_dec: &MaskMap, m_rsr_up: &MaskMap, last_feat: &FeatureMap) -> Result<FusionOutput> {
    if !m_dec.same_shape(m_rsr_up) || last_feat.height() != m_dec.height() || last_feat.width() != m_dec.width() {
        return Err(Error::shape(
            "fuse",
            format!("{}x{}", m_dec.height(), m_dec.width()),
            format!(
                "{}x{} / {}x{}",
                m_rsr_up.height(),
                m_rsr_up.width(),
                last_feat.height(),
                last_feat.width()
            ),
        ));
    }
    let mut g = Graph::inference(&model.store);
    let d = g.input(m_dec.to_tensor());
    let r = g.input(m_rsr_up.to_tensor());
    let f = g.input(last_feat.as_tensor().clone());
    let (gate, fnl) = fuse_graph(&mut g, model.fusion.as_ref(), &model.config, d, r, f);
    let gate = match gate {
        Some(v) => mask_of(&g, v)?,
        None => MaskMap::constant(m_dec.height(), m_dec.width(), 1.0),
    };
    Ok(FusionOutput {
        m_dec: m_dec.clone(),
        g: gate,
        m_fnl: mask_of(&g, fnl)?,
    })
}
