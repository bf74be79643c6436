//! Greedy and length-normalized beam-search decoding.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::transformer::routing_to_trace;
use crate::model::{decode_step_batch, encode, ExpertMode, Forward, ForwardOptions, PassRouting, RoutingTrace, Segment, TransformerParams, BOS, EOS};
use crate::tensor::Tensor;

/// Supplies next-token log-probabilities for a batch of prefixes.
pub trait StepScorer {
    fn log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Scores prefixes with the model over one encoded source.
pub struct ModelScorer<'a> {
    params: &'a TransformerParams,
    enc: Tensor,
    dataset_id: usize,
    opts: ForwardOptions,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a TransformerParams, src: &[usize], dataset_id: usize, opts: ForwardOptions) -> Result<Self> {
        check_source(params, src)?;
        let (enc, _) = encode(params, src, dataset_id, &opts)?;
        Ok(Self {
            params,
            enc,
            dataset_id,
            opts,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let rows = decode_step_batch(self.params, &self.enc, prefixes, self.dataset_id, &self.opts)?;
        Ok(rows.iter().map(|r| log_softmax(r)).collect())
    }
}

fn check_source(params: &TransformerParams, src: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if src.is_empty() {
        return Err(Error::Input("empty source".into()));
    }
    if src.len() > cfg.max_src_len {
        return Err(Error::Input(format!(
            "source of {} tokens exceeds the cap of {}",
            src.len(),
            cfg.max_src_len
        )));
    }
    if let Some(&t) = src.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {t} outside the vocabulary")));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A finished or truncated hypothesis. `tokens` excludes BOS and includes
/// the final EOS when one was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Argmax token per step until EOS or `max_steps` tokens.
pub fn greedy_search(scorer: &mut impl StepScorer, max_steps: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_steps {
        let lp = scorer.log_probs(&[&prefix])?.remove(0);
        let t = argmax(&lp);
        log_prob += lp[t];
        prefix.push(t);
        if t == EOS {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Hypothesis {
        score: log_prob,
        tokens,
        log_prob,
    })
}

/// Beam search scored by `log_prob / length^alpha`. Returns every finished
/// hypothesis best first; hypotheses still open after `max_steps` count as
/// finished.
pub fn beam_search(scorer: &mut impl StepScorer, beam_size: usize, alpha: f64, max_steps: usize) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Input("beam size must be at least 1".into()));
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = alive.iter().map(|(p, _)| p.as_slice()).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, row) in rows.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                cands.push((h, t, alive[h].1 + lp));
            }
        }
        // stable: ties keep hypothesis order, then token order
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::with_capacity(beam_size);
        for (h, t, lp) in cands.into_iter().take(beam_size) {
            let mut seq = alive[h].0.clone();
            seq.push(t);
            if t == EOS {
                let tokens = seq[1..].to_vec();
                finished.push(Hypothesis {
                    score: normalized(lp, tokens.len(), alpha),
                    tokens,
                    log_prob: lp,
                });
            } else {
                next.push((seq, lp));
            }
        }
        alive = next;
    }
    for (seq, lp) in alive {
        let tokens = seq[1..].to_vec();
        finished.push(Hypothesis {
            score: normalized(lp, tokens.len(), alpha),
            tokens,
            log_prob: lp,
        });
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub mode: ExpertMode,
    /// 1 selects greedy decoding.
    pub beam_size: usize,
    pub length_alpha: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: ExpertMode::Full,
            beam_size: 1,
            length_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Summary ids without BOS or EOS.
    pub tokens: Vec<usize>,
    pub text: String,
    /// Routing of every MoE layer for the source and each generated step;
    /// empty in main-only mode.
    pub trace: RoutingTrace,
    pub length: usize,
    pub mode: ExpertMode,
    pub log_prob: f64,
}

impl DecodeOutput {
    pub fn with_text(mut self, vocab: &Vocabulary) -> Self {
        self.text = vocab.decode(&self.tokens);
        self
    }
}

/// Routing of a teacher-forced pass over the generated prefix; positions of
/// decoder records are generation steps.
fn replay_trace(params: &TransformerParams, src: &[usize], dec_input: &[usize], dataset_id: usize, opts: &ForwardOptions) -> Result<RoutingTrace> {
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
    f.decode(enc, &src_seg, dec_input, &dec_seg, dataset_id, opts, &mut routing)?;
    Ok(routing_to_trace(&routing, dataset_id))
}

fn finish(params: &TransformerParams, src: &[usize], dataset_id: usize, fwd: &ForwardOptions, h: Hypothesis) -> Result<DecodeOutput> {
    let mut dec_input = vec![BOS];
    dec_input.extend(h.tokens.iter().copied().filter(|&t| t != EOS));
    let generated = h.tokens.len();
    dec_input.truncate(generated.max(1));
    let trace = replay_trace(params, src, &dec_input, dataset_id, fwd)?;
    let tokens: Vec<usize> = h.tokens.into_iter().filter(|&t| t != EOS).collect();
    Ok(DecodeOutput {
        length: tokens.len(),
        tokens,
        text: String::new(),
        trace,
        mode: fwd.mode,
        log_prob: h.log_prob,
    })
}

pub fn greedy_decode(params: &TransformerParams, src: &[usize], dataset_id: usize, fwd: &ForwardOptions) -> Result<DecodeOutput> {
    let mut scorer = ModelScorer::new(params, src, dataset_id, *fwd)?;
    let h = greedy_search(&mut scorer, params.config.max_tgt_len)?;
    finish(params, src, dataset_id, fwd, h)
}

pub fn beam_decode(
    params: &TransformerParams,
    src: &[usize],
    dataset_id: usize,
    fwd: &ForwardOptions,
    beam_size: usize,
    alpha: f64,
) -> Result<DecodeOutput> {
    if beam_size == 0 {
        return Err(Error::Input("beam size must be at least 1".into()));
    }
    let mut scorer = ModelScorer::new(params, src, dataset_id, *fwd)?;
    let best = beam_search(&mut scorer, beam_size, alpha, params.config.max_tgt_len)?.remove(0);
    finish(params, src, dataset_id, fwd, best)
}

/// Greedy for a beam of 1, beam search otherwise.
pub fn decode(params: &TransformerParams, src: &[usize], dataset_id: usize, fwd: &ForwardOptions, opts: &DecodeOptions) -> Result<DecodeOutput> {
    if opts.beam_size <= 1 {
        if opts.beam_size == 0 {
            return Err(Error::Input("beam size must be at least 1".into()));
        }
        greedy_decode(params, src, dataset_id, fwd)
    } else {
        beam_decode(params, src, dataset_id, fwd, opts.beam_size, opts.length_alpha)
    }
}
