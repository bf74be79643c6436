//! Parameter storage.
//!
//! All tensors live in one flat list; the nested [`Layout`] records where
//! each logical weight sits. The same layout type is instantiated with
//! `usize` (store indices), [`Tensor`] (standalone weights) or
//! [`Var`](crate::autodiff::Var) (weights bound onto a tape).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, Positional};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    TokenEmbedding,
    Positional,
    Attention,
    LayerNorm,
    MainExpert,
    Deputy,
    Selector,
    ClassicGate,
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MainExpert<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Deputy FFN. There is no output bias; the fused output reuses the main
/// expert's `b2`.
#[derive(Clone, Debug)]
pub struct DeputyExpert<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
}

/// One MoE feed-forward slot: the always-on main expert, the deputies, one
/// selector `W_e` (`d_model × n_deputies`) per dataset, and the shared
/// classic gate.
#[derive(Clone, Debug)]
pub struct MoeFfnParams<T> {
    pub main: MainExpert<T>,
    pub deputies: Vec<DeputyExpert<T>>,
    pub selectors: Vec<T>,
    pub classic_gate: Option<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub attn_norm: Norm<T>,
    pub attn: AttentionParams<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: MoeFfnParams<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<T> {
    pub self_norm: Norm<T>,
    pub self_attn: AttentionParams<T>,
    pub cross_norm: Norm<T>,
    pub cross_attn: AttentionParams<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: MoeFfnParams<T>,
}

#[derive(Clone, Debug)]
pub struct Layout<T> {
    /// Also the (tied) output projection.
    pub token_embedding: T,
    pub encoder_positions: Option<T>,
    pub decoder_positions: Option<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder_norm: Norm<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> AttentionParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }
}

impl<T> MoeFfnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MoeFfnParams<U> {
        MoeFfnParams {
            main: MainExpert {
                w1: f(&self.main.w1),
                b1: f(&self.main.b1),
                w2: f(&self.main.w2),
                b2: f(&self.main.b2),
            },
            deputies: self
                .deputies
                .iter()
                .map(|d| DeputyExpert {
                    w1: f(&d.w1),
                    b1: f(&d.b1),
                    w2: f(&d.w2),
                })
                .collect(),
            selectors: self.selectors.iter().map(&mut *f).collect(),
            classic_gate: self.classic_gate.as_ref().map(f),
        }
    }
}

impl MoeFfnParams<Tensor> {
    /// Binds every tensor onto `graph` as a tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> MoeFfnParams<Var> {
        self.map(&mut |t| graph.param(t))
    }
}

impl<T> Layout<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Layout<U> {
        Layout {
            token_embedding: f(&self.token_embedding),
            encoder_positions: self.encoder_positions.as_ref().map(&mut *f),
            decoder_positions: self.decoder_positions.as_ref().map(&mut *f),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    attn_norm: l.attn_norm.map(f),
                    attn: l.attn.map(f),
                    ffn_norm: l.ffn_norm.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_norm: l.self_norm.map(f),
                    self_attn: l.self_attn.map(f),
                    cross_norm: l.cross_norm.map(f),
                    cross_attn: l.cross_attn.map(f),
                    ffn_norm: l.ffn_norm.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            encoder_norm: self.encoder_norm.map(f),
            decoder_norm: self.decoder_norm.map(f),
        }
    }
}

/// Metadata for one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// Every weight of the encoder-decoder model.
#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    pub info: Vec<ParamInfo>,
    pub layout: Layout<usize>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a> {
    tensors: Vec<Tensor>,
    info: Vec<ParamInfo>,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| self.normal.sample(self.rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.tensors.push(Tensor::from_parts(shape.to_vec(), data));
        self.info.push(ParamInfo {
            name,
            kind,
            shape: shape.to_vec(),
        });
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear<usize> {
        Linear {
            weight: self.push(format!("{prefix}.weight"), ParamKind::Attention, &[d_in, d_out], Init::Normal),
            bias: self.push(format!("{prefix}.bias"), ParamKind::Attention, &[d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm<usize> {
        Norm {
            gain: self.push(format!("{prefix}.gain"), ParamKind::LayerNorm, &[d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), ParamKind::LayerNorm, &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionParams<usize> {
        AttentionParams {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, cfg: &ModelConfig, moe: bool) -> MoeFfnParams<usize> {
        let d = cfg.d_model;
        let main = MainExpert {
            w1: self.push(format!("{prefix}.main.w1"), ParamKind::MainExpert, &[d, cfg.d_hidden_main], Init::Normal),
            b1: self.push(format!("{prefix}.main.b1"), ParamKind::MainExpert, &[cfg.d_hidden_main], Init::Zeros),
            w2: self.push(format!("{prefix}.main.w2"), ParamKind::MainExpert, &[cfg.d_hidden_main, d], Init::Normal),
            b2: self.push(format!("{prefix}.main.b2"), ParamKind::MainExpert, &[d], Init::Zeros),
        };
        if !moe {
            return MoeFfnParams {
                main,
                deputies: Vec::new(),
                selectors: Vec::new(),
                classic_gate: None,
            };
        }
        let dh = cfg.d_hidden_deputy;
        let deputies = (0..cfg.n_deputies)
            .map(|j| DeputyExpert {
                w1: self.push(format!("{prefix}.deputy.{j}.w1"), ParamKind::Deputy, &[d, dh], Init::Normal),
                b1: self.push(format!("{prefix}.deputy.{j}.b1"), ParamKind::Deputy, &[dh], Init::Zeros),
                w2: self.push(format!("{prefix}.deputy.{j}.w2"), ParamKind::Deputy, &[dh, d], Init::Normal),
            })
            .collect();
        let selectors = (0..cfg.n_datasets)
            .map(|e| self.push(format!("{prefix}.selector.{e}"), ParamKind::Selector, &[d, cfg.n_deputies], Init::Normal))
            .collect();
        let classic_gate = Some(self.push(
            format!("{prefix}.classic_gate"),
            ParamKind::ClassicGate,
            &[d, cfg.n_deputies],
            Init::Normal,
        ));
        MoeFfnParams {
            main,
            deputies,
            selectors,
            classic_gate,
        }
    }
}

impl TransformerParams {
    /// Fresh weights: normal(0, `init_std`) matrices, zero biases and offsets,
    /// unit layer-norm gains. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut b = Builder {
            tensors: Vec::new(),
            info: Vec::new(),
            rng: &mut rng,
            normal,
        };
        let d = config.d_model;
        let token_embedding = b.push(
            "embed.tokens".into(),
            ParamKind::TokenEmbedding,
            &[config.vocab_size, d],
            Init::Normal,
        );
        let (encoder_positions, decoder_positions) = match config.positional {
            Positional::Learned => (
                Some(b.push("encoder.positions".into(), ParamKind::Positional, &[config.max_src_len, d], Init::Normal)),
                Some(b.push("decoder.positions".into(), ParamKind::Positional, &[config.max_tgt_len, d], Init::Normal)),
            ),
            Positional::Sinusoidal => (None, None),
        };
        let encoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    attn_norm: b.norm(&format!("{p}.attn_norm"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), config, config.is_moe_layer(i)),
                }
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_norm: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), config, config.is_moe_layer(config.n_layers + i)),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.final_norm", d);
        let decoder_norm = b.norm("decoder.final_norm", d);
        let layout = Layout {
            token_embedding,
            encoder_positions,
            decoder_positions,
            encoder,
            decoder,
            encoder_norm,
            decoder_norm,
        };
        Ok(Self {
            config: config.clone(),
            tensors: b.tensors,
            info: b.info,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Binds every tensor onto `graph`; `trainable[i]` decides whether tensor
    /// `i` is tracked.
    pub fn bind(&self, graph: &mut Graph, trainable: Option<&[bool]>) -> (Layout<Var>, Vec<Var>) {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| graph.leaf(t, trainable.is_none_or(|m| m[i])))
            .collect();
        (self.layout.map(&mut |&i| vars[i]), vars)
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Layout<Var> {
        self.bind(graph, Some(&vec![false; self.tensors.len()])).0
    }

    /// Replaces tensors with those of matching name from `named`. Every
    /// stored tensor must be present with an identical shape.
    pub fn load_named(&mut self, mut named: HashMap<String, Tensor>) -> Result<()> {
        for (i, info) in self.info.iter().enumerate() {
            let t = named
                .remove(&info.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", info.name)))?;
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
            self.tensors[i] = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Copy with one more dataset: each MoE slot gains a freshly initialized
    /// selector matrix, everything else is carried over bit for bit.
    pub fn with_extra_dataset(&self, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            n_datasets: self.config.n_datasets + 1,
            ..self.config.clone()
        };
        let mut grown = Self::init(&config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let new_id = self.config.n_datasets;
        for (i, info) in grown.info.iter().enumerate() {
            match self.get(&info.name) {
                Some(t) => grown.tensors[i] = t.clone(),
                None => {
                    debug_assert!(info.name.ends_with(&format!("selector.{new_id}")));
                    let n = grown.tensors[i].len();
                    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    grown.tensors[i] = Tensor::from_parts(info.shape.clone(), data);
                }
            }
        }
        Ok(grown)
    }

    /// Copy with `extra` fresh deputies in every MoE slot; selectors grow a
    /// column per new deputy.
    pub fn with_extra_deputies(&self, extra: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            n_deputies: self.config.n_deputies + extra,
            ..self.config.clone()
        };
        let mut grown = Self::init(&config, seed)?;
        let old_np = self.config.n_deputies;
        for (i, info) in grown.info.iter().enumerate() {
            let Some(old) = self.get(&info.name) else { continue };
            if old.shape() == info.shape.as_slice() {
                grown.tensors[i] = old.clone();
            } else if matches!(info.kind, ParamKind::Selector | ParamKind::ClassicGate) {
                // keep the old columns, the new ones stay freshly initialized
                let new_np = config.n_deputies;
                let dst = grown.tensors[i].data_mut();
                for r in 0..config.d_model {
                    dst[r * new_np..r * new_np + old_np].copy_from_slice(&old.data()[r * old_np..(r + 1) * old_np]);
                }
            }
        }
        Ok(grown)
    }

    /// SHA-256 over the names, shapes and raw bits of the selected tensors.
    pub fn digest(&self, mut select: impl FnMut(&ParamInfo) -> bool) -> String {
        let mut h = Sha256::new();
        for (t, info) in self.tensors.iter().zip(&self.info) {
            if !select(info) {
                continue;
            }
            h.update(info.name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_hidden_main: 12,
            d_hidden_deputy: 6,
            n_deputies: 2,
            n_datasets: 2,
            max_src_len: 6,
            max_tgt_len: 5,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerParams::init(&tiny(), 7).unwrap();
        let b = TransformerParams::init(&tiny(), 7).unwrap();
        assert!(a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.bitwise_eq(y)));
        let c = TransformerParams::init(&tiny(), 8).unwrap();
        assert!(a.tensors.iter().zip(&c.tensors).any(|(x, y)| !x.bitwise_eq(y)));
    }

    #[test]
    fn biases_zero_gains_one() {
        let p = TransformerParams::init(&tiny(), 1).unwrap();
        for (t, info) in p.tensors.iter().zip(&p.info) {
            let n = &info.name;
            if n.ends_with(".bias") || n.ends_with(".b1") || n.ends_with(".b2") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
            if n.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{n}");
            }
        }
    }

    #[test]
    fn deputies_have_no_output_bias() {
        let p = TransformerParams::init(&tiny(), 1).unwrap();
        assert!(p.info.iter().all(|i| !(i.kind == ParamKind::Deputy && i.name.ends_with("b2"))));
        let slot = &p.layout.encoder[0].ffn;
        assert_eq!(slot.selectors.len(), 2);
        assert_eq!(slot.deputies.len(), 2);
    }

    #[test]
    fn extra_dataset_adds_one_selector_per_slot() {
        let p = TransformerParams::init(&tiny(), 3).unwrap();
        let q = p.with_extra_dataset(11).unwrap();
        assert_eq!(q.config.n_datasets, 3);
        assert_eq!(q.len(), p.len() + p.config.moe_layer_count());
        for (t, info) in p.tensors.iter().zip(&p.info) {
            assert!(q.get(&info.name).unwrap().bitwise_eq(t));
        }
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut p = TransformerParams::init(&tiny(), 3).unwrap();
        let mut named: HashMap<String, Tensor> =
            p.info.iter().zip(&p.tensors).map(|(i, t)| (i.name.clone(), t.clone())).collect();
        named.insert("embed.tokens".into(), Tensor::zeros(&[3, 3]));
        assert!(p.load_named(named).is_err());
    }
}
