//! Resolves the corpora a run config points at.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use moesumm_core::corpus::{generate_synthetic, load_jsonl, read_records, Caps, Example, SyntheticSpec, Vocabulary};
use moesumm_core::run_config::{CorpusRef, RunConfig};
use moesumm_core::ModelConfig;

pub type Corpus = (usize, Vec<Example>);

pub fn caps(model: &ModelConfig) -> Caps {
    Caps {
        max_src_len: model.max_src_len,
        max_tgt_len: model.max_tgt_len,
    }
}

fn synthetic(spec: &SyntheticSpec, n_domains: usize, per_domain: usize, seed: u64) -> Result<Vec<Corpus>> {
    let spec = SyntheticSpec {
        n_domains,
        examples_per_domain: per_domain,
        seed,
        ..spec.clone()
    };
    Ok(generate_synthetic(&spec)?)
}

fn load_refs(refs: &[CorpusRef], vocab: &Vocabulary, caps: Caps) -> Result<Vec<Corpus>> {
    let mut out: Vec<Corpus> = Vec::new();
    for r in refs {
        let (examples, report) = load_jsonl(Path::new(&r.path), r.dataset_id, vocab, caps)?;
        if !report.truncated_sources.is_empty() {
            warn!("{}: {} sources truncated", r.path, report.truncated_sources.len());
        }
        if !report.rejected_targets.is_empty() {
            warn!("{}: {} summaries too long, skipped", r.path, report.rejected_targets.len());
        }
        info!("{}: loaded {} of {} lines", r.path, report.loaded, report.lines);
        for e in examples {
            match out.iter_mut().find(|(id, _)| *id == e.dataset_id) {
                Some((_, v)) => v.push(e),
                None => out.push((e.dataset_id, vec![e])),
            }
        }
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

fn load_vocab(path: &str) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading vocabulary {path}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing vocabulary {path}"))
}

/// Vocabulary and training corpora of a run.
pub fn training_data(cfg: &RunConfig) -> Result<(Vocabulary, Vec<Corpus>)> {
    let model = &cfg.model;
    let (vocab, corpora) = if let Some(spec) = &cfg.data.synthetic {
        ensure!(
            cfg.data.train.is_empty(),
            "set either data.synthetic or data.train, not both"
        );
        let vocab = spec.vocabulary();
        let corpora = synthetic(spec, model.n_datasets, spec.examples_per_domain, cfg.seed)?;
        (vocab, corpora)
    } else {
        ensure!(!cfg.data.train.is_empty(), "no training data: set data.synthetic or data.train");
        let vocab = match &cfg.data.vocab_path {
            Some(p) => load_vocab(p)?,
            None => {
                let mut texts = Vec::new();
                for r in &cfg.data.train {
                    for rec in read_records(Path::new(&r.path))? {
                        texts.push(rec.source);
                        texts.push(rec.summary);
                    }
                }
                Vocabulary::build(&texts, model.vocab_size)
            }
        };
        let corpora = load_refs(&cfg.data.train, &vocab, caps(model))?;
        (vocab, corpora)
    };
    if vocab.len() > model.vocab_size {
        bail!(
            "vocabulary has {} tokens but the model only {}",
            vocab.len(),
            model.vocab_size
        );
    }
    Ok((vocab, corpora))
}

/// Held-out sets for every dataset the model knows, plus configured JSONL
/// eval files.
pub fn eval_data(cfg: &RunConfig, model: &ModelConfig, vocab: &Vocabulary) -> Result<Vec<Corpus>> {
    let mut sets = Vec::new();
    if let Some(spec) = &cfg.data.synthetic {
        let n = model.n_datasets.min(spec.rules().len());
        sets = synthetic(
            spec,
            n,
            cfg.data.eval_examples_per_domain,
            cfg.seed + cfg.data.eval_seed_offset,
        )?;
    }
    for (id, examples) in load_refs(&cfg.data.eval, vocab, caps(model))? {
        sets.retain(|(s, _)| *s != id);
        sets.push((id, examples));
    }
    sets.retain(|(id, _)| *id < model.n_datasets);
    sets.sort_by_key(|(id, _)| *id);
    ensure!(!sets.is_empty(), "no evaluation data");
    Ok(sets)
}

/// The fine-tuning corpus and its held-out counterpart. `model` is the
/// checkpoint being adapted.
pub fn finetune_data(cfg: &RunConfig, model: &ModelConfig, vocab: &Vocabulary) -> Result<(Corpus, Option<Corpus>)> {
    if let Some(r) = &cfg.data.finetune {
        let mut sets = load_refs(std::slice::from_ref(r), vocab, caps(model))?;
        ensure!(sets.len() <= 1, "{}: fine-tuning corpus mixes dataset ids", r.path);
        let corpus = sets.pop().unwrap_or((r.dataset_id, Vec::new()));
        return Ok((corpus, None));
    }
    let Some(spec) = &cfg.data.synthetic else {
        bail!("no fine-tuning data: set data.finetune or data.synthetic");
    };
    let domain = cfg.data.finetune_domain.unwrap_or(model.n_datasets);
    let train = synthetic(spec, domain + 1, cfg.data.finetune_examples, cfg.seed + 2 * cfg.data.eval_seed_offset)?
        .pop()
        .unwrap_or((domain, Vec::new()));
    let held = synthetic(
        spec,
        domain + 1,
        cfg.data.eval_examples_per_domain,
        cfg.seed + cfg.data.eval_seed_offset,
    )?
    .pop();
    Ok((train, held))
}
