//! Summarization model whose feed-forward layers pair an always-active main
//! expert with dataset-routed deputy experts, together with the tape-based
//! autodiff, objectives, training regimes, decoding and metrics around it.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod run_config;
pub mod tensor;
pub mod training;

pub use config::{Activation, GateSite, GatingMode, ModelConfig, Positional};
pub use error::{Error, Result};
pub use model::{ExpertMode, ForwardOptions, RoutingOverride, TransformerParams};
pub use tensor::Tensor;
