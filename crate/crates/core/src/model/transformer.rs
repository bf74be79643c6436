//! Pre-norm encoder-decoder transformer whose feed-forward slots are MoE
//! slots.
//!
//! Sequences of a batch are packed row-wise without padding; attention spans
//! keep sequences apart.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::moe::{activate, moe_forward, FfnMode, LayerId, MoeOptions, RouteRecord, RoutingOverride, RoutingTrace, TokenRoute};
use super::params::{AttentionParams, Layout, Norm, TransformerParams};
use crate::autodiff::{AttentionSpan, Graph, Var};
use crate::config::{GatingMode, ModelConfig, Positional};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    /// Main expert plus routed deputies, gated per the model's gating mode.
    #[default]
    Full,
    /// Main expert only; deputies and selectors are never read.
    MainOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: ExpertMode,
    pub routing: RoutingOverride,
}

impl ForwardOptions {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn main_only() -> Self {
        Self {
            mode: ExpertMode::MainOnly,
            routing: RoutingOverride::None,
        }
    }

    fn ffn_mode(&self, cfg: &ModelConfig) -> FfnMode {
        match (self.mode, cfg.gating_mode) {
            (ExpertMode::MainOnly, _) | (_, GatingMode::MainOnly) => FfnMode::MainOnly,
            (ExpertMode::Full, GatingMode::DatasetAware) => FfnMode::DatasetAware,
            (ExpertMode::Full, GatingMode::Classic) => FfnMode::Classic,
        }
    }
}

/// Row range of one sequence inside a packed matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Source and teacher-forced target sequences packed into matrices.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub dataset_id: usize,
    pub src_ids: Vec<usize>,
    pub src_segments: Vec<Segment>,
    /// Decoder inputs: each target without its final token.
    pub dec_ids: Vec<usize>,
    pub dec_segments: Vec<Segment>,
    /// Next-token labels aligned with `dec_ids`.
    pub gold: Vec<usize>,
}

fn pack(seqs: impl Iterator<Item = Vec<usize>>) -> (Vec<usize>, Vec<Segment>) {
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    for s in seqs {
        segments.push(Segment {
            start: ids.len(),
            len: s.len(),
        });
        ids.extend(s);
    }
    (ids, segments)
}

impl PackedBatch {
    /// `pairs` holds `(source, target)` with targets framed as `BOS … EOS`.
    pub fn new(dataset_id: usize, pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for (src, tgt) in pairs {
            if src.is_empty() {
                return Err(Error::Input("empty source sequence".into()));
            }
            if tgt.len() < 2 {
                return Err(Error::Input("target must hold at least BOS and one token".into()));
            }
        }
        let (src_ids, src_segments) = pack(pairs.iter().map(|(s, _)| s.to_vec()));
        let (dec_ids, dec_segments) = pack(pairs.iter().map(|(_, t)| t[..t.len() - 1].to_vec()));
        let gold = pairs.iter().flat_map(|(_, t)| t[1..].iter().copied()).collect();
        Ok(Self {
            dataset_id,
            src_ids,
            src_segments,
            dec_ids,
            dec_segments,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.src_segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_segments.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.gold.len()
    }
}

/// Routing decisions of every MoE layer for one packed pass.
#[derive(Clone, Debug, Default)]
pub struct PassRouting {
    pub layers: Vec<(LayerId, Vec<TokenRoute>)>,
}

impl PassRouting {
    /// Splits the packed routes into one trace per sequence.
    pub fn traces(&self, batch: &PackedBatch) -> Vec<RoutingTrace> {
        let mut out = vec![RoutingTrace::default(); batch.len()];
        for (layer, routes) in &self.layers {
            let segs = if layer.is_decoder() {
                &batch.dec_segments
            } else {
                &batch.src_segments
            };
            for (seq, seg) in segs.iter().enumerate() {
                for pos in 0..seg.len {
                    let r = &routes[seg.start + pos];
                    out[seq].records.push(RouteRecord {
                        layer: *layer,
                        position: pos,
                        dataset_id: batch.dataset_id,
                        deputy_index: r.deputy,
                        gate_value: r.gate,
                        gate_distribution: r.distribution.clone(),
                    });
                }
            }
        }
        out
    }
}

fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Forward-pass context over parameters bound onto a graph.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    pub config: &'a ModelConfig,
    pub params: &'a Layout<Var>,
}

impl<'a> Forward<'a> {
    pub fn new(graph: &'a mut Graph, config: &'a ModelConfig, params: &'a Layout<Var>) -> Self {
        Self { graph, config, params }
    }

    fn embed(&mut self, ids: &[usize], segments: &[Segment], table: Option<Var>, max_len: usize) -> Result<Var> {
        let vocab = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "token embedding",
                index: bad,
                size: vocab,
            });
        }
        let longest = segments.iter().map(|s| s.len).max().unwrap_or(0);
        if longest > max_len {
            return Err(Error::Input(format!("sequence length {longest} exceeds the cap of {max_len}")));
        }
        let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let tok = self.graph.embedding(self.params.token_embedding, ids)?;
        let pos = match (self.config.positional, table) {
            (Positional::Learned, Some(t)) => self.graph.embedding(t, &positions)?,
            _ => {
                let table = sinusoidal(max_len, self.config.d_model);
                let t = self.graph.constant(&table);
                self.graph.gather_rows(t, &positions)?
            }
        };
        self.graph.add(tok, pos)
    }

    fn norm(&mut self, x: Var, n: &Norm<Var>) -> Result<Var> {
        self.graph.layer_norm(x, n.gain, n.bias)
    }

    fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn attention(&mut self, query_in: Var, key_in: Var, p: &AttentionParams<Var>, spans: Arc<[AttentionSpan]>) -> Result<Var> {
        let q = self.linear(query_in, p.q.weight, p.q.bias)?;
        let k = self.linear(key_in, p.k.weight, p.k.bias)?;
        let v = self.linear(key_in, p.v.weight, p.v.bias)?;
        let a = self.graph.attention(q, k, v, self.config.n_heads, spans)?;
        self.linear(a, p.o.weight, p.o.bias)
    }

    fn ffn(
        &mut self,
        x: Var,
        slot: &super::params::MoeFfnParams<Var>,
        layer: LayerId,
        dataset_id: usize,
        opts: &ForwardOptions,
        routing: &mut PassRouting,
    ) -> Result<Var> {
        let mode = if slot.deputies.is_empty() {
            FfnMode::MainOnly
        } else {
            opts.ffn_mode(self.config)
        };
        if mode == FfnMode::MainOnly {
            // same arithmetic as the main branch of `moe_forward`
            let m = &slot.main;
            let h = self.linear(x, m.w1, m.b1)?;
            let h = activate(self.graph, h, self.config.activation);
            return self.linear(h, m.w2, m.b2);
        }
        let moe_opts = MoeOptions {
            activation: self.config.activation,
            gate_site: self.config.gate_site,
            routing: opts.routing,
        };
        let out = moe_forward(self.graph, x, dataset_id, slot, mode, &moe_opts)?;
        routing.layers.push((layer, out.routes));
        Ok(out.output)
    }

    /// Encoder output (`src rows × d_model`), final layer norm applied.
    pub fn encode(
        &mut self,
        ids: &[usize],
        segments: &[Segment],
        dataset_id: usize,
        opts: &ForwardOptions,
        routing: &mut PassRouting,
    ) -> Result<Var> {
        let spans: Arc<[AttentionSpan]> = segments
            .iter()
            .map(|s| AttentionSpan {
                q_start: s.start,
                q_len: s.len,
                k_start: s.start,
                k_len: s.len,
                causal: false,
            })
            .collect();
        let p = self.params;
        let mut x = self.embed(ids, segments, p.encoder_positions, self.config.max_src_len)?;
        for (i, layer) in p.encoder.iter().enumerate() {
            let h = self.norm(x, &layer.attn_norm)?;
            let a = self.attention(h, h, &layer.attn, spans.clone())?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, &layer.ffn_norm)?;
            let f = self.ffn(h, &layer.ffn, LayerId::Encoder(i), dataset_id, opts, routing)?;
            x = self.graph.add(x, f)?;
        }
        self.norm(x, &p.encoder_norm)
    }

    /// Decoder hidden states (`dec rows × d_model`), final layer norm applied.
    /// Decoder segment `i` cross-attends to encoder segment `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &mut self,
        enc: Var,
        enc_segments: &[Segment],
        ids: &[usize],
        segments: &[Segment],
        dataset_id: usize,
        opts: &ForwardOptions,
        routing: &mut PassRouting,
    ) -> Result<Var> {
        if segments.len() != enc_segments.len() {
            return Err(Error::Input("decoder and encoder segment counts differ".into()));
        }
        if segments.iter().any(|s| s.len == 0) {
            return Err(Error::Input("empty decoder prefix".into()));
        }
        let self_spans: Arc<[AttentionSpan]> = segments
            .iter()
            .map(|s| AttentionSpan {
                q_start: s.start,
                q_len: s.len,
                k_start: s.start,
                k_len: s.len,
                causal: true,
            })
            .collect();
        let cross_spans: Arc<[AttentionSpan]> = segments
            .iter()
            .zip(enc_segments)
            .map(|(s, e)| AttentionSpan {
                q_start: s.start,
                q_len: s.len,
                k_start: e.start,
                k_len: e.len,
                causal: false,
            })
            .collect();
        let p = self.params;
        let mut x = self.embed(ids, segments, p.decoder_positions, self.config.max_tgt_len)?;
        for (i, layer) in p.decoder.iter().enumerate() {
            let h = self.norm(x, &layer.self_norm)?;
            let a = self.attention(h, h, &layer.self_attn, self_spans.clone())?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, &layer.cross_norm)?;
            let a = self.attention(h, enc, &layer.cross_attn, cross_spans.clone())?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, &layer.ffn_norm)?;
            let f = self.ffn(h, &layer.ffn, LayerId::Decoder(i), dataset_id, opts, routing)?;
            x = self.graph.add(x, f)?;
        }
        self.norm(x, &p.decoder_norm)
    }

    /// Vocabulary logits through the tied embedding.
    pub fn logits(&mut self, hidden: Var) -> Result<Var> {
        self.graph.matmul_nt(hidden, self.params.token_embedding)
    }

    /// Teacher-forced `log P(gold | prefix, source)` for every target token,
    /// as a `target_tokens × 1` column.
    pub fn gold_log_probs(&mut self, batch: &PackedBatch, opts: &ForwardOptions) -> Result<(Var, PassRouting)> {
        let mut routing = PassRouting::default();
        let enc = self.encode(&batch.src_ids, &batch.src_segments, batch.dataset_id, opts, &mut routing)?;
        let hidden = self.decode(
            enc,
            &batch.src_segments,
            &batch.dec_ids,
            &batch.dec_segments,
            batch.dataset_id,
            opts,
            &mut routing,
        )?;
        let logits = self.logits(hidden)?;
        let logp = self.graph.log_softmax(logits);
        let picked = self.graph.pick(logp, &batch.gold)?;
        Ok((picked, routing))
    }
}

/// Encoder output of one source sequence.
pub fn encode(
    params: &TransformerParams,
    src: &[usize],
    dataset_id: usize,
    opts: &ForwardOptions,
) -> Result<(Tensor, RoutingTrace)> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let mut f = Forward::new(&mut g, &params.config, &bound);
    let seg = [Segment {
        start: 0,
        len: src.len(),
    }];
    let mut routing = PassRouting::default();
    let enc = f.encode(src, &seg, dataset_id, opts, &mut routing)?;
    let trace = routing_to_trace(&routing, dataset_id);
    Ok((g.value(enc).clone(), trace))
}

pub(crate) fn routing_to_trace(routing: &PassRouting, dataset_id: usize) -> RoutingTrace {
    let mut trace = RoutingTrace::default();
    for (layer, routes) in &routing.layers {
        for (pos, r) in routes.iter().enumerate() {
            trace.records.push(RouteRecord {
                layer: *layer,
                position: pos,
                dataset_id,
                deputy_index: r.deputy,
                gate_value: r.gate,
                gate_distribution: r.distribution.clone(),
            });
        }
    }
    trace
}

/// Next-token logits for several decoder prefixes sharing one encoded
/// source. Returns one `vocab_size` row per prefix (the last position).
pub fn decode_step_batch(
    params: &TransformerParams,
    enc_out: &Tensor,
    prefixes: &[&[usize]],
    dataset_id: usize,
    opts: &ForwardOptions,
) -> Result<Vec<Vec<f64>>> {
    if prefixes.iter().any(|p| p.is_empty()) {
        return Err(Error::Input("decoder prefix must not be empty".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let enc = g.constant(enc_out);
    let src_len = enc_out.rows();
    let enc_segments = vec![Segment { start: 0, len: src_len }; prefixes.len()];
    let (ids, segments) = pack(prefixes.iter().map(|p| p.to_vec()));
    let mut f = Forward::new(&mut g, &params.config, &bound);
    let mut routing = PassRouting::default();
    let hidden = f.decode(enc, &enc_segments, &ids, &segments, dataset_id, opts, &mut routing)?;
    let last: Vec<usize> = segments.iter().map(|s| s.start + s.len - 1).collect();
    let hidden = f.graph.gather_rows(hidden, &last)?;
    let logits = f.logits(hidden)?;
    let lv = g.value(logits);
    Ok((0..prefixes.len()).map(|r| lv.row(r).to_vec()).collect())
}

/// Next-token logits after `prefix` (which starts with BOS).
pub fn decode_step(
    params: &TransformerParams,
    prefix: &[usize],
    enc_out: &Tensor,
    dataset_id: usize,
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    Ok(decode_step_batch(params, enc_out, &[prefix], dataset_id, opts)?.remove(0))
}

/// Teacher-forced logits at every decoder position for a single pair.
pub fn teacher_forced_logits(
    params: &TransformerParams,
    src: &[usize],
    dec_input: &[usize],
    dataset_id: usize,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let mut f = Forward::new(&mut g, &params.config, &bound);
    let mut routing = PassRouting::default();
    let src_seg = [Segment { start: 0, len: src.len() }];
    let dec_seg = [Segment {
        start: 0,
        len: dec_input.len(),
    }];
    let enc = f.encode(src, &src_seg, dataset_id, opts, &mut routing)?;
    let hidden = f.decode(enc, &src_seg, dec_input, &dec_seg, dataset_id, opts, &mut routing)?;
    let logits = f.logits(hidden)?;
    Ok(g.value(logits).clone())
}

/// Per-token `log P(y_t | y_<t, source)` for one target (`BOS … EOS`).
pub fn forward_log_probs(
    params: &TransformerParams,
    src: &[usize],
    target: &[usize],
    dataset_id: usize,
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    if target.len() > params.config.max_tgt_len + 1 {
        return Err(Error::Input(format!(
            "target length {} exceeds the cap of {}",
            target.len() - 1,
            params.config.max_tgt_len
        )));
    }
    let batch = PackedBatch::new(dataset_id, &[(src, target)])?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let mut f = Forward::new(&mut g, &params.config, &bound);
    let (lp, _) = f.gold_log_probs(&batch, opts)?;
    Ok(g.value(lp).data().to_vec())
}
