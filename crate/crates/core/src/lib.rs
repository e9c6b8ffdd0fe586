//! Hybrid temporal relation modeling for repetitive action counting.
//!
//! Per-frame video features are turned into bi-modal temporal
//! self-similarity stacks at three temporal scales, enriched with a local
//! temporal context channel, fused, and decoded into a per-frame density
//! whose sum is the repetition count. Everything runs on a small
//! reverse-mode tape ([`autodiff`]) in `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod optim;
pub mod regressor;
pub mod tensor;
pub mod train;
pub mod tssm;
pub mod viz;

pub use error::{HtrmError, Result};
pub use features::{FeatureSequence, ScaleSet, SyntheticSpec};
pub use metrics::{CountPair, CycleAnnotation, DensityMap};
pub use regressor::{Model, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use tssm::{ProjectionHeads, RmdPolicy, SimilarityStack};
