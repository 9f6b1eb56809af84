//! Residual encoder with two bottleneck feature heads.
//!
//! A 3×3 stem (no pooling) feeds a stack of residual stages. The last
//! `log2(s)` stages downsample by 2, so the trunk ends at `1/s` resolution.
//! Two heads (3×3 conv, ReLU, 1×1 conv) map the trunk output to the style
//! features `F_s` and the conventional features `F_c`. The activation
//! entering each downsampling stage is kept as a decoder skip.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::{Conv2d, ParamBuilder};
use crate::types::FeatureMap;

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayers {
    pub stem: Conv2d,
    /// `stages[i]` holds the residual blocks of stage `i`.
    pub stages: Vec<Vec<ResBlock>>,
    pub style_head: [Conv2d; 2],
    pub content_head: [Conv2d; 2],
}

/// Channel widths of the skip features, finest first.
pub fn skip_channels(cfg: &ModelConfig) -> Vec<usize> {
    let first_down = cfg.encoder_channels.len() - cfg.downsampling_stages();
    (first_down..cfg.encoder_channels.len())
        .map(|i| if i == 0 { cfg.encoder_channels[0] } else { cfg.encoder_channels[i - 1] })
        .collect()
}

pub fn bottleneck_channels(cfg: &ModelConfig) -> usize {
    *cfg.encoder_channels.last().expect("validated config has stages")
}

/// Registers every encoder parameter under `encoder.*`.
pub fn build_encoder(cfg: &ModelConfig, b: &mut ParamBuilder) -> EncoderLayers {
    let size = cfg.input_size;
    let n_stages = cfg.encoder_channels.len();
    let first_down = n_stages - cfg.downsampling_stages();
    let stem = b.conv("encoder.stem", 3, cfg.encoder_channels[0], 3, 1, (size, size), 1);
    let mut res = size;
    let mut c_in = cfg.encoder_channels[0];
    let mut stages = Vec::with_capacity(n_stages);
    for (i, (&c_out, &n_blocks)) in cfg.encoder_channels.iter().zip(&cfg.encoder_blocks).enumerate() {
        let stride = if i >= first_down { 2 } else { 1 };
        res /= stride;
        let mut blocks = Vec::with_capacity(n_blocks);
        for j in 0..n_blocks {
            let (bi, bs) = if j == 0 { (c_in, stride) } else { (c_out, 1) };
            let name = format!("encoder.stage{i}.block{j}");
            let conv1 = b.conv(&format!("{name}.conv1"), bi, c_out, 3, bs, (res, res), 1);
            let conv2 = b.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, (res, res), 1);
            let shortcut = (bs != 1 || bi != c_out)
                .then(|| b.conv(&format!("{name}.shortcut"), bi, c_out, 1, bs, (res, res), 1));
            blocks.push(ResBlock { conv1, conv2, shortcut });
        }
        stages.push(blocks);
        c_in = c_out;
    }
    let coarse = (res, res);
    let head = |b: &mut ParamBuilder, name: &str| {
        [
            b.conv(&format!("encoder.{name}.0"), c_in, cfg.head_hidden_dim, 3, 1, coarse, 1),
            b.conv(&format!("encoder.{name}.1"), cfg.head_hidden_dim, cfg.feature_dim, 1, 1, coarse, 1),
        ]
    };
    let style_head = head(b, "style_head");
    let content_head = head(b, "content_head");
    EncoderLayers {
        stem,
        stages,
        style_head,
        content_head,
    }
}

/// Encoder outputs as graph nodes.
pub(crate) struct EncoderVars {
    pub bottleneck: Var,
    pub style: Var,
    pub conventional: Var,
    pub skips: Vec<Var>,
}

pub(crate) fn encode_graph(g: &mut Graph, layers: &EncoderLayers, image: Var) -> EncoderVars {
    let stem = g.conv(&layers.stem, image);
    let mut x = g.relu(stem);
    let mut skips = Vec::new();
    for stage in &layers.stages {
        if stage[0].conv1.stride == 2 {
            skips.push(x);
        }
        for block in stage {
            let y = g.conv(&block.conv1, x);
            let y = g.relu(y);
            let y = g.conv(&block.conv2, y);
            let short = match &block.shortcut {
                Some(sc) => g.conv(sc, x),
                None => x,
            };
            let sum = g.add(y, short);
            x = g.relu(sum);
        }
    }
    let head = |g: &mut Graph, convs: &[Conv2d; 2]| {
        let h = g.conv(&convs[0], x);
        let h = g.relu(h);
        g.conv(&convs[1], h)
    };
    let style = head(g, &layers.style_head);
    let conventional = head(g, &layers.content_head);
    EncoderVars {
        bottleneck: x,
        style,
        conventional,
        skips,
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub style: FeatureMap,
    pub conventional: FeatureMap,
    /// Decoder skip features, finest first.
    pub skips: Vec<FeatureMap>,
    /// Trunk output feeding the decoder.
    pub bottleneck: FeatureMap,
}

pub(crate) fn check_image(image: &FeatureMap, s: usize) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("encode", "3 channels", image.channels()));
    }
    if image.height() % s != 0 || image.width() % s != 0 {
        return Err(Error::shape(
            "encode",
            format!("height and width divisible by {s}"),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    Ok(())
}

/// Runs the encoder on a `3×h×w` image with values in `[0, 1]`.
pub fn encode(model: &Model, image: &FeatureMap) -> Result<EncoderOutput> {
    check_image(image, model.config.downscale_factor)?;
    let mut g = Graph::inference(&model.store);
    let x = g.input(image.as_tensor().clone());
    let vars = encode_graph(&mut g, &model.encoder, x);
    let fm = |v: Var| FeatureMap::from_tensor(g.value(v).clone());
    Ok(EncoderOutput {
        style: fm(vars.style)?,
        conventional: fm(vars.conventional)?,
        skips: vars.skips.iter().map(|&v| fm(v)).collect::<Result<_>>()?,
        bottleneck: fm(vars.bottleneck)?,
    })
}
