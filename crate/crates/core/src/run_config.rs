//! Run configuration files: a named profile overlaid with a JSON document.
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::AdamConfig;
use crate::config::ModelConfig;
use crate::corpus::SyntheticSpec;
use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::model::ExpertMode;
use crate::training::{TrainConfig, UtilizationSide};

/// A JSONL corpus file and the dataset id its lines are tagged with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRef {
    pub path: String,
    pub dataset_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generate the training corpora instead of reading files.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub train: Vec<CorpusRef>,
    #[serde(default)]
    pub eval: Vec<CorpusRef>,
    #[serde(default)]
    pub finetune: Option<CorpusRef>,
    /// Saved vocabulary (JSON token list); otherwise built from the training
    /// corpora.
    #[serde(default)]
    pub vocab_path: Option<String>,
    /// Held-out synthetic examples per domain, drawn from `seed + eval_seed_offset`.
    pub eval_examples_per_domain: usize,
    pub eval_seed_offset: u64,
    /// Synthetic domain used for fine-tuning; defaults to the first domain
    /// the model has no selector for.
    #[serde(default)]
    pub finetune_domain: Option<usize>,
    pub finetune_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            train: Vec::new(),
            eval: Vec::new(),
            finetune: None,
            vocab_path: None,
            eval_examples_per_domain: 100,
            eval_seed_offset: 1000,
            finetune_domain: None,
            finetune_examples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    /// Seeds model initialization, data generation and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub margin_enabled: bool,
    pub detach_main: bool,
    pub add_fresh_deputy: bool,
    pub utilization_side: UtilizationSide,
    pub beam_size: usize,
    pub length_alpha: f64,
    pub data: DataConfig,
    #[serde(default)]
    pub out_dir: Option<String>,
}

pub const PROFILES: [&str; 2] = ["desk", "paper-scale"];

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self {
                profile: name.into(),
                seed: 0,
                model: ModelConfig::desk(),
                epochs: 30,
                finetune_epochs: 30,
                batch_size: 16,
                grad_accum_steps: 1,
                lr: 1e-3,
                warmup_steps: 0,
                margin_enabled: true,
                detach_main: false,
                add_fresh_deputy: false,
                utilization_side: UtilizationSide::Decoder,
                beam_size: 1,
                length_alpha: 1.0,
                data: DataConfig {
                    synthetic: Some(SyntheticSpec::default()),
                    ..Default::default()
                },
                out_dir: None,
            }),
            "paper-scale" => Ok(Self {
                profile: name.into(),
                model: ModelConfig::paper_scale(),
                epochs: 10,
                finetune_epochs: 10,
                batch_size: 8,
                grad_accum_steps: 4,
                lr: 3e-5,
                warmup_steps: 500,
                beam_size: 4,
                data: DataConfig::default(),
                ..Self::profile("desk")?
            }),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected one of {}",
                PROFILES.join(", ")
            ))),
        }
    }

    /// Overlays `text` on the profile it names (default `desk`).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = &overlay else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let name = match map.get("profile") {
            None => "desk",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::Config("profile must be a string".into())),
        };
        let mut base = serde_json::to_value(Self::profile(name)?)?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        if let Some(s) = self.data.synthetic.as_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            warmup_steps: self.warmup_steps,
            margin_enabled: self.margin_enabled,
            detach_main: self.detach_main,
            seed: self.seed,
            add_fresh_deputy: self.add_fresh_deputy,
            utilization_side: self.utilization_side,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            ..self.train_config()
        }
    }

    pub fn decode_options(&self, mode: ExpertMode) -> DecodeOptions {
        DecodeOptions {
            mode,
            beam_size: self.beam_size,
            length_alpha: self.length_alpha,
        }
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_carry_defaults() {
        let p = RunConfig::profile("paper-scale").unwrap();
        assert_eq!(p.model.d_hidden_deputy, 512);
        assert_eq!(p.model.n_deputies, 3);
        assert_eq!(p.lr, 3e-5);
        assert_eq!(p.beam_size, 4);
        assert_eq!(p.grad_accum_steps, 4);
        assert_eq!(p.warmup_steps, 500);
        let d = RunConfig::profile("desk").unwrap();
        assert_eq!(d.model, ModelConfig::desk());
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn overlay_merges_nested() {
        let c = RunConfig::from_json_str(r#"{"epochs": 3, "model": {"d_model": 32}, "data": {"eval_examples_per_domain": 5}}"#)
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.n_heads, 4);
        assert_eq!(c.data.eval_examples_per_domain, 5);
        assert!(c.data.synthetic.is_some());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_json_str(r#"{"epohcs": 3}"#).unwrap_err().to_string();
        assert!(e.contains("epohcs"), "{e}");
        let e = RunConfig::from_json_str(r#"{"model": {"d_modle": 3}}"#).unwrap_err().to_string();
        assert!(e.contains("d_modle"), "{e}");
        assert!(RunConfig::from_json_str("[1]").is_err());
        assert!(RunConfig::from_json_str(r#"{"beam_size": 0}"#).is_err());
    }

    #[test]
    fn roundtrip() {
        let c = RunConfig::profile("desk").unwrap().with_seed(7);
        let back = RunConfig::from_json_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train_config().seed, 7);
    }
}
