use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How deputy experts are selected inside each MoE feed-forward slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// One selector matrix per dataset.
    #[default]
    DatasetAware,
    /// A single selector shared across datasets.
    Classic,
    /// Deputies are never consulted.
    MainOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Where the selected gate value scales the deputy branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSite {
    /// `σ(g · (a W1 + b1))`
    #[default]
    PreActivation,
    /// `g · σ(a W1 + b1)`
    PostActivation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Learned,
    Sinusoidal,
}

fn default_init_std() -> f64 {
    0.02
}

/// Model dimensions and architecture switches.
///
/// Layer indices in `moe_layers` are global: encoder layers come first
/// (`0..n_layers`), then decoder layers (`n_layers..2 * n_layers`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Blocks per stack (encoder and decoder each).
    pub n_layers: usize,
    pub d_hidden_main: usize,
    pub d_hidden_deputy: usize,
    pub n_deputies: usize,
    pub n_datasets: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    #[serde(default)]
    pub gating_mode: GatingMode,
    /// Weight of the max-margin term in the training objective.
    pub margin_weight: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub gate_site: GateSite,
    #[serde(default)]
    pub positional: Positional,
    /// MoE-bearing layers; `None` means every layer of both stacks.
    #[serde(default)]
    pub moe_layers: Option<Vec<usize>>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Small profile that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_hidden_main: 256,
            d_hidden_deputy: 128,
            n_deputies: 3,
            n_datasets: 3,
            max_src_len: 32,
            max_tgt_len: 16,
            gating_mode: GatingMode::DatasetAware,
            margin_weight: 1.0,
            seed: 0,
            activation: Activation::Gelu,
            gate_site: GateSite::PreActivation,
            positional: Positional::Learned,
            moe_layers: None,
            init_std: 0.1,
        }
    }

    /// Dimensions of a BART-large-sized model with the reference expert setup.
    pub fn paper_scale() -> Self {
        Self {
            vocab_size: 50_625,
            d_model: 1024,
            n_heads: 16,
            n_layers: 12,
            d_hidden_main: 4096,
            d_hidden_deputy: 512,
            n_deputies: 3,
            n_datasets: 6,
            max_src_len: 1024,
            max_tgt_len: 256,
            init_std: 0.02,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_hidden_main", self.d_hidden_main),
            ("n_datasets", self.n_datasets),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.gating_mode != GatingMode::MainOnly && (self.n_deputies == 0 || self.d_hidden_deputy == 0) {
            return Err(Error::Config(
                "n_deputies and d_hidden_deputy must be positive unless gating_mode is main_only".into(),
            ));
        }
        if self.vocab_size <= 4 {
            return Err(Error::Config("vocab_size must exceed the 4 reserved tokens".into()));
        }
        if !(self.margin_weight >= 0.0) {
            return Err(Error::Config("margin_weight must be non-negative".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if let Some(layers) = &self.moe_layers {
            if let Some(&bad) = layers.iter().find(|&&l| l >= 2 * self.n_layers) {
                return Err(Error::Config(format!(
                    "moe layer index {bad} exceeds {} total layers",
                    2 * self.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether global layer `layer` carries deputy experts.
    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.n_deputies > 0
            && self.d_hidden_deputy > 0
            && self.moe_layers.as_ref().is_none_or(|l| l.contains(&layer))
    }

    pub fn moe_layer_count(&self) -> usize {
        (0..2 * self.n_layers).filter(|&l| self.is_moe_layer(l)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        assert_eq!(ModelConfig::paper_scale().d_hidden_deputy, 512);
        assert_eq!(ModelConfig::paper_scale().n_deputies, 3);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deputies_required_unless_main_only() {
        let cfg = ModelConfig {
            n_deputies: 0,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            gating_mode: GatingMode::MainOnly,
            ..cfg
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.moe_layer_count(), 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ModelConfig::desk()).unwrap();
        v["d_modle"] = 3.into();
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err().to_string();
        assert!(err.contains("d_modle"), "{err}");
    }

    #[test]
    fn layer_subset() {
        let cfg = ModelConfig {
            moe_layers: Some(vec![1, 3]),
            ..ModelConfig::desk()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.moe_layer_count(), 2);
        assert!(!cfg.is_moe_layer(0));
        assert!(cfg.is_moe_layer(3));
    }
}
