//! Shared fixtures for the benchmarks.

use moesumm_core::corpus::{generate_synthetic, Example, SyntheticSpec};
use moesumm_core::{ModelConfig, TransformerParams};

/// Desk-config parameters and a small three-domain corpus.
pub fn desk_fixture(per_domain: usize) -> (TransformerParams, Vec<(usize, Vec<Example>)>) {
    let params = TransformerParams::init(&ModelConfig::desk(), 0).expect("desk config is valid");
    let spec = SyntheticSpec {
        examples_per_domain: per_domain,
        ..Default::default()
    };
    (params, generate_synthetic(&spec).expect("default spec is valid"))
}
