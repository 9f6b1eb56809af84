//! Model, loss and optimizer configuration.
//!
//! Configs are stored as flat TOML: one `key = value` line per field, with
//! names identical to the [`ModelConfig`] fields. Unknown keys are rejected
//! so that a misspelled ablation flag cannot silently train the full model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output channels of each encoder stage. The stem uses the first entry.
    pub encoder_channels: Vec<usize>,
    /// Residual blocks per encoder stage.
    pub encoder_blocks: Vec<usize>,
    /// Channels of the style and conventional feature maps.
    pub feature_dim: usize,
    /// Width of the 3×3 conv inside each feature head.
    pub head_hidden_dim: usize,
    pub gru_hidden_dim: usize,
    /// Output width of the 3×3 conv applied to the similarity map.
    pub sim_branch_dim: usize,
    /// Output width of the 3×3 conv applied to the current mask.
    pub mask_branch_dim: usize,
    /// Hidden width of the residual-mask head.
    pub mask_head_dim: usize,
    /// Hidden width of the upsampling-weight head.
    pub upsample_head_dim: usize,
    /// Hidden width of the combination-mask head.
    pub fusion_hidden_dim: usize,
    pub downscale_factor: usize,
    pub num_iterations: usize,
    pub scales: Vec<usize>,
    pub loss_lambda: f64,
    pub mask_threshold: f32,
    /// Initial mask logit; sigmoid(-6) ≈ 0.0025.
    pub mask_logit_init: f32,

    /// Remove the recurrent module: plain encoder/decoder.
    pub no_rsr: bool,
    /// Output the decoder mask directly instead of fusing.
    pub no_fusion: bool,
    pub no_gru: bool,
    pub no_msm: bool,
    pub similarity_only: bool,
    pub simple_average: bool,
    pub no_fc: bool,
    pub bilinear_upsample: bool,
    pub loss_bce_on: bool,
    pub loss_ssim_on: bool,
    pub loss_iou_on: bool,
    /// Add an unweighted loss term directly on the decoder mask.
    pub decoder_loss: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

/// Flags that can be toggled by name from the command line.
pub const ABLATION_FLAGS: &[&str] = &[
    "no_rsr",
    "no_fusion",
    "no_gru",
    "no_msm",
    "similarity_only",
    "simple_average",
    "no_fc",
    "bilinear_upsample",
    "loss_bce_on",
    "loss_ssim_on",
    "loss_iou_on",
    "decoder_loss",
];

/// Descriptions of the nine component-ablation rows.
pub const ABLATION_ROWS: [&str; 9] = [
    "UNet",
    "UNet + RSR",
    "UNet + similarity only",
    "UNet + RSR + simple average",
    "w/o GRU",
    "w/o MSM",
    "w/o F_c",
    "w/o weighted upsample",
    "full",
];

impl ModelConfig {
    /// CPU-scale preset.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            encoder_channels: vec![16, 32, 64],
            encoder_blocks: vec![1, 1, 1],
            feature_dim: 32,
            head_hidden_dim: 32,
            gru_hidden_dim: 48,
            sim_branch_dim: 16,
            mask_branch_dim: 16,
            mask_head_dim: 32,
            upsample_head_dim: 64,
            fusion_hidden_dim: 16,
            downscale_factor: 8,
            num_iterations: 12,
            scales: vec![0, 1, 2, 3],
            loss_lambda: 0.8,
            mask_threshold: 0.5,
            mask_logit_init: -6.0,
            no_rsr: false,
            no_fusion: false,
            no_gru: false,
            no_msm: false,
            similarity_only: false,
            simple_average: false,
            no_fc: false,
            bilinear_upsample: false,
            loss_bce_on: true,
            loss_ssim_on: true,
            loss_iou_on: true,
            decoder_loss: false,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 60,
            lr_milestones: vec![0.5, 0.67, 0.83, 0.92],
            lr_decay: 0.5,
            max_steps: 0,
            checkpoint_every: 0,
            seed: 42,
        }
    }

    /// Full-size shapes: ResNet34 stage layout at 256×256, 512-channel
    /// bottleneck, 256-channel feature heads. Instantiable but untrained.
    pub fn paper() -> Self {
        ModelConfig {
            input_size: 256,
            encoder_channels: vec![64, 128, 256, 512],
            encoder_blocks: vec![3, 4, 6, 3],
            feature_dim: 256,
            head_hidden_dim: 256,
            gru_hidden_dim: 256,
            sim_branch_dim: 64,
            mask_branch_dim: 64,
            mask_head_dim: 256,
            upsample_head_dim: 256,
            fusion_hidden_dim: 64,
            batch_size: 32,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper" => Ok(ModelConfig::paper()),
            other => Err(Error::Config {
                field: "preset".into(),
                reason: format!("unknown preset `{other}` (expected desk or paper)"),
            }),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `self` with every key present in `text` replaced by the file's value.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let parse = |e: toml::de::Error| Error::ConfigParse(e.to_string());
        let file: toml::Table = text.parse().map_err(parse)?;
        let mut merged: toml::Table = self.to_toml_string().parse().map_err(parse)?;
        merged.extend(file);
        let cfg: ModelConfig = merged.try_into().map_err(parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelConfig::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Number of stride-2 stages, `log2(downscale_factor)`.
    pub fn downsampling_stages(&self) -> usize {
        self.downscale_factor.trailing_zeros() as usize
    }

    pub fn coarse_size(&self) -> usize {
        self.input_size / self.downscale_factor
    }

    /// Whether the recurrent module is part of the model.
    pub fn uses_rsr(&self) -> bool {
        !self.no_rsr
    }

    /// Whether the learned combination head is part of the model.
    pub fn uses_fusion_head(&self) -> bool {
        !self.no_rsr && !self.no_fusion && !self.simple_average
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, reason: impl Into<String>) -> Error {
            Error::Config {
                field: field.into(),
                reason: reason.into(),
            }
        }
        if self.num_iterations < 1 {
            return Err(bad("num_iterations", "must be at least 1"));
        }
        if self.downscale_factor < 2 || !self.downscale_factor.is_power_of_two() {
            return Err(bad("downscale_factor", "must be a power of two and at least 2"));
        }
        if self.input_size == 0 || self.input_size % self.downscale_factor != 0 {
            return Err(bad(
                "input_size",
                format!(
                    "{} is not divisible by downscale_factor {}",
                    self.input_size, self.downscale_factor
                ),
            ));
        }
        if !(self.loss_lambda > 0.0) {
            return Err(bad("loss_lambda", "must be positive"));
        }
        if self.scales.is_empty() {
            return Err(bad("scales", "must not be empty"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(bad("mask_threshold", "must lie in (0, 1)"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_blocks.len() {
            return Err(bad(
                "encoder_blocks",
                "must have one entry per encoder_channels entry",
            ));
        }
        if self.encoder_channels.len() < self.downsampling_stages() {
            return Err(bad(
                "encoder_channels",
                format!("need at least {} stages to reach 1/{}", self.downsampling_stages(), self.downscale_factor),
            ));
        }
        let dims = [
            ("encoder_channels", self.encoder_channels.iter().min().copied().unwrap_or(0)),
            ("encoder_blocks", self.encoder_blocks.iter().min().copied().unwrap_or(0)),
            ("feature_dim", self.feature_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("gru_hidden_dim", self.gru_hidden_dim),
            ("sim_branch_dim", self.sim_branch_dim),
            ("mask_branch_dim", self.mask_branch_dim),
            ("mask_head_dim", self.mask_head_dim),
            ("upsample_head_dim", self.upsample_head_dim),
            ("fusion_hidden_dim", self.fusion_hidden_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(bad(name, "must be positive"));
            }
        }
        if !self.loss_bce_on && !self.loss_ssim_on && !self.loss_iou_on {
            return Err(bad("loss_bce_on", "at least one loss term must be enabled"));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(bad("lr_milestones", "fractions must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn set_flag(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "no_rsr" => &mut self.no_rsr,
            "no_fusion" => &mut self.no_fusion,
            "no_gru" => &mut self.no_gru,
            "no_msm" => &mut self.no_msm,
            "similarity_only" => &mut self.similarity_only,
            "simple_average" => &mut self.simple_average,
            "no_fc" => &mut self.no_fc,
            "bilinear_upsample" => &mut self.bilinear_upsample,
            "loss_bce_on" => &mut self.loss_bce_on,
            "loss_ssim_on" => &mut self.loss_ssim_on,
            "loss_iou_on" => &mut self.loss_iou_on,
            "decoder_loss" => &mut self.decoder_loss,
            other => {
                return Err(Error::Config {
                    field: other.into(),
                    reason: format!("unknown ablation flag (expected one of {})", ABLATION_FLAGS.join(", ")),
                })
            }
        };
        *slot = value;
        Ok(())
    }

    /// Apply the flag combination of component-ablation row `row` (1..=9)
    /// on top of `self`, clearing any previously set component flags.
    pub fn with_ablation_row(&self, row: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.no_rsr = false;
        cfg.no_fusion = false;
        cfg.no_gru = false;
        cfg.no_msm = false;
        cfg.similarity_only = false;
        cfg.simple_average = false;
        cfg.no_fc = false;
        cfg.bilinear_upsample = false;
        match row {
            1 => cfg.no_rsr = true,
            2 => cfg.no_fusion = true,
            3 => {
                cfg.similarity_only = true;
                cfg.no_fusion = true;
            }
            4 => cfg.simple_average = true,
            5 => cfg.no_gru = true,
            6 => cfg.no_msm = true,
            7 => cfg.no_fc = true,
            8 => cfg.bilinear_upsample = true,
            9 => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "ablation row {row} out of range 1..=9"
                )))
            }
        }
        Ok(cfg)
    }

    /// Fields that determine the parameter set and forward computation, as
    /// `(name, value)` pairs. Two configs with equal fingerprints can share
    /// a checkpoint.
    pub fn architecture_fingerprint(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_size", self.input_size.to_string()),
            ("encoder_channels", format!("{:?}", self.encoder_channels)),
            ("encoder_blocks", format!("{:?}", self.encoder_blocks)),
            ("feature_dim", self.feature_dim.to_string()),
            ("head_hidden_dim", self.head_hidden_dim.to_string()),
            ("gru_hidden_dim", self.gru_hidden_dim.to_string()),
            ("sim_branch_dim", self.sim_branch_dim.to_string()),
            ("mask_branch_dim", self.mask_branch_dim.to_string()),
            ("mask_head_dim", self.mask_head_dim.to_string()),
            ("upsample_head_dim", self.upsample_head_dim.to_string()),
            ("fusion_hidden_dim", self.fusion_hidden_dim.to_string()),
            ("downscale_factor", self.downscale_factor.to_string()),
            ("num_iterations", self.num_iterations.to_string()),
            ("scales", format!("{:?}", self.scales)),
            ("mask_threshold", self.mask_threshold.to_string()),
            ("mask_logit_init", self.mask_logit_init.to_string()),
            ("no_rsr", self.no_rsr.to_string()),
            ("no_fusion", self.no_fusion.to_string()),
            ("no_gru", self.no_gru.to_string()),
            ("no_msm", self.no_msm.to_string()),
            ("similarity_only", self.similarity_only.to_string()),
            ("simple_average", self.simple_average.to_string()),
            ("no_fc", self.no_fc.to_string()),
            ("bilinear_upsample", self.bilinear_upsample.to_string()),
        ]
    }

    /// Error naming the first architecture field where `self` (the
    /// checkpoint's config) and `requested` differ.
    pub fn check_compatible(&self, requested: &ModelConfig) -> Result<()> {
        let ours = self.architecture_fingerprint();
        let theirs = requested.architecture_fingerprint();
        for ((name, a), (_, b)) in ours.into_iter().zip(theirs) {
            if a != b {
                return Err(Error::ConfigMismatch {
                    field: name.into(),
                    checkpoint: a,
                    requested: b,
                });
            }
        }
        Ok(())
    }
}
