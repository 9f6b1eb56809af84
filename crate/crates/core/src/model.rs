//! The full network: parameters plus the layer handles of each part.

use crate::config::ModelConfig;
use crate::decoder::{build_decoder, build_fusion, DecoderLayers, FusionLayers};
use crate::encoder::{build_encoder, EncoderLayers};
use crate::error::{Error, Result};
use crate::params::{ConvSpec, ParamBuilder, ParamStore};
use crate::rng::seeded_rng;
use crate::rsr::{build_rsr, RsrLayers};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Every convolution with its output size, for FLOP estimates.
    pub specs: Vec<ConvSpec>,
    pub encoder: EncoderLayers,
    pub rsr: Option<RsrLayers>,
    pub decoder: DecoderLayers,
    pub fusion: Option<FusionLayers>,
}

impl Model {
    /// Builds a freshly initialized model. The same config and seed always
    /// give the same parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let encoder = build_encoder(config, &mut b);
        let rsr = config.uses_rsr().then(|| build_rsr(config, &mut b));
        let decoder = build_decoder(config, &mut b);
        let fusion = config.uses_fusion_head().then(|| build_fusion(config, &mut b));
        let (store, specs) = b.finish();
        Ok(Model {
            config: config.clone(),
            store,
            specs,
            encoder,
            rsr,
            decoder,
            fusion,
        })
    }

    /// Builds the layout for `config` and fills it from `store` by name.
    /// Missing, extra or misshapen parameters are errors.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if store.len() != model.store.len() {
            let extra = store.iter().find(|(n, _)| model.store.by_name(n).is_none());
            if let Some((name, _)) = extra {
                return Err(Error::Checkpoint {
                    field: name.to_string(),
                    reason: "parameter not used by this configuration".into(),
                });
            }
        }
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let src = store.by_name(&name).ok_or_else(|| Error::Checkpoint {
                field: name.clone(),
                reason: "parameter missing".into(),
            })?;
            let dst = model.store.by_name_mut(&name).expect("own layout");
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint {
                    field: name,
                    reason: format!("shape {:?}, expected {:?}", src.shape(), dst.shape()),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_drop_the_right_parts() {
        let base = ModelConfig::desk();
        let full = Model::new(&base, 1).unwrap();
        assert!(full.rsr.is_some() && full.fusion.is_some());
        let no_rsr = Model::new(&base.with_ablation_row(1).unwrap(), 1).unwrap();
        assert!(no_rsr.rsr.is_none() && no_rsr.fusion.is_none());
        assert_eq!(no_rsr.store.count_with_prefix("rsr"), 0);
        let sim_only = Model::new(&base.with_ablation_row(3).unwrap(), 1).unwrap();
        assert_eq!(sim_only.store.count_with_prefix("rsr"), 0);
        let bilinear = Model::new(&base.with_ablation_row(8).unwrap(), 1).unwrap();
        assert!(bilinear.store.by_name("rsr.upsample_head.0.weight").is_none());
        let no_gru = Model::new(&base.with_ablation_row(5).unwrap(), 1).unwrap();
        assert!(no_gru.store.by_name("rsr.gru.z.weight").is_none());
        assert!(no_gru.store.by_name("rsr.plain.0.weight").is_some());
    }

    #[test]
    fn from_store_round_trips_and_checks_names() {
        let cfg = ModelConfig::desk();
        let a = Model::new(&cfg, 3).unwrap();
        let b = Model::from_store(&cfg, a.store.clone()).unwrap();
        assert!(a.store.iter().zip(b.store.iter()).all(|(p, q)| p == q));

        let other = Model::new(&cfg.with_ablation_row(5).unwrap(), 3).unwrap();
        let err = Model::from_store(&cfg, other.store).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
