//! Inharmonious region localization with a recurrent self-reasoning module.
//!
//! The network encodes an image into style features and conventional
//! features, refines a coarse mask for `K` iterations by comparing style
//! features with the current background centroid, decodes a full-resolution
//! mask guided by the refined one, and blends the two with a learned
//! per-pixel gate.
//!
//! Start with [`config::ModelConfig`], [`model::Model`] and
//! [`pipeline::forward`].

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod rsr;
pub mod tensor;
pub mod types;
pub mod losses;
pub mod metrics;
pub mod data;
pub mod checkpoint;
pub mod pipeline;
pub mod viz;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use types::{FeatureMap, MaskMap};
