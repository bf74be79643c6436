//! The subcommands, as plain functions over a resolved run config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use moesumm_core::analysis::{expertise_report, ExpertiseReport, ReportOptions};
use moesumm_core::checkpoint::{self, corpus_digest, Provenance};
use moesumm_core::corpus::{read_inputs, write_jsonl, Vocabulary};
use moesumm_core::decoding::decode;
use moesumm_core::model::UNK;
use moesumm_core::run_config::RunConfig;
use moesumm_core::training::{finetune_deputy, param_report, param_walk, train_mixed, ParamReport, TrainReport};
use moesumm_core::{ExpertMode, ForwardOptions, GatingMode, TransformerParams};

use crate::data::{eval_data, finetune_data, training_data};

pub const CHECKPOINT_FILE: &str = "model.moes";

/// Decoding path selected on the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    MainOnly,
    /// Full model routed through the shared classic gate.
    Classic,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))
}

fn write_train_artifacts(out: &Path, report: &TrainReport, name: &str) -> Result<()> {
    write_json(&out.join(format!("{name}_report.json")), report)?;
    write_with(&out.join(format!("{name}_loss.csv")), |w| report.write_loss_csv(w))?;
    write_with(&out.join(format!("{name}_utilization.csv")), |w| report.write_utilization_csv(w))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub params: TransformerParams,
    pub report: TrainReport,
}

/// Mixed training from scratch. Writes the checkpoint, the report JSON and
/// the loss and utilization CSVs under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let (vocab, corpora) = training_data(cfg)?;
    info!(
        "training on {} datasets, {} examples",
        corpora.len(),
        corpora.iter().map(|(_, v)| v.len()).sum::<usize>()
    );
    let init = TransformerParams::init(&cfg.model, cfg.seed)?;
    let (params, mut report) = train_mixed(&init, &corpora, &cfg.train_config())?;
    let path = out.join(CHECKPOINT_FILE);
    let provenance = Provenance {
        seed: cfg.seed,
        regime: "mixed".into(),
        corpus_hashes: corpora.iter().map(|(_, v)| corpus_digest(v)).collect(),
        parent: None,
    };
    checkpoint::save(&path, &params, provenance, Some(&vocab))?;
    report.checkpoint = Some(path.display().to_string());
    write_train_artifacts(out, &report, "train")?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(TrainOutcome {
        checkpoint: path,
        params,
        report,
    })
}

fn load_checkpoint(path: &Path) -> Result<(TransformerParams, checkpoint::Sidecar, Vocabulary)> {
    let (params, side) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let Some(vocab) = side.vocab.clone() else {
        bail!("checkpoint {} has no vocabulary", path.display());
    };
    Ok((params, side, vocab))
}

/// Deputy fine-tuning of a checkpoint on the configured corpus.
pub fn finetune(checkpoint_path: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let (params, side, vocab) = load_checkpoint(checkpoint_path)?;
    create_dir(out)?;
    let ((dataset_id, examples), _) = finetune_data(cfg, &params.config, &vocab)?;
    ensure!(!examples.is_empty(), "fine-tuning corpus is empty");
    info!("fine-tuning dataset {dataset_id} on {} examples", examples.len());
    let (tuned, mut report) = finetune_deputy(&params, dataset_id, &examples, &cfg.finetune_config())?;
    let path = out.join(CHECKPOINT_FILE);
    let provenance = Provenance {
        seed: cfg.seed,
        regime: "finetune".into(),
        corpus_hashes: vec![corpus_digest(&examples)],
        parent: Some(side.params_digest),
    };
    checkpoint::save(&path, &tuned, provenance, Some(&vocab))?;
    report.checkpoint = Some(path.display().to_string());
    write_train_artifacts(out, &report, "finetune")?;
    Ok(TrainOutcome {
        checkpoint: path,
        params: tuned,
        report,
    })
}

fn forward_for(params: &TransformerParams, mode: Mode) -> (std::borrow::Cow<'_, TransformerParams>, ForwardOptions) {
    match mode {
        Mode::Full => (std::borrow::Cow::Borrowed(params), ForwardOptions::full()),
        Mode::MainOnly => (std::borrow::Cow::Borrowed(params), ForwardOptions::main_only()),
        Mode::Classic => {
            let mut p = params.clone();
            p.config.gating_mode = GatingMode::Classic;
            (std::borrow::Cow::Owned(p), ForwardOptions::full())
        }
    }
}

pub struct GenerateOptions {
    pub mode: Mode,
    pub beam: usize,
    pub length_alpha: f64,
    /// Used for input lines without a numeric `dataset` field.
    pub dataset_id: usize,
}

/// Summarizes every line of `input` into `output` (JSONL, one object per
/// input line). Returns the number of lines written.
pub fn generate(checkpoint_path: &Path, input: &Path, output: &Path, opts: &GenerateOptions) -> Result<usize> {
    let (params, _, vocab) = load_checkpoint(checkpoint_path)?;
    let (params, fwd) = forward_for(&params, opts.mode);
    let decode_opts = moesumm_core::decoding::DecodeOptions {
        mode: fwd.mode,
        beam_size: opts.beam,
        length_alpha: opts.length_alpha,
    };
    let records = read_inputs(input)?;
    let cfg = &params.config;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut unknown_total = 0;
    write_with_result(output, |w| {
        for r in &records {
            let dataset_id = r.dataset.unwrap_or(opts.dataset_id);
            ensure!(
                dataset_id < cfg.n_datasets,
                "{}:{}: dataset {dataset_id} unknown to a model with {} datasets",
                input.display(),
                r.line,
                cfg.n_datasets
            );
            let mut src = vocab.encode(&r.source);
            let unknown = src.iter().filter(|&&t| t == UNK).count();
            unknown_total += unknown;
            src.truncate(cfg.max_src_len - 1);
            src.push(moesumm_core::model::EOS);
            let out = decode(&params, &src, dataset_id, &fwd, &decode_opts)
                .with_context(|| format!("{}:{}", input.display(), r.line))?
                .with_text(&vocab);
            let trace: Vec<_> = out
                .trace
                .records
                .iter()
                .filter(|t| t.layer.is_decoder())
                .map(|t| {
                    json!({
                        "layer": t.layer.to_string(),
                        "step": t.position,
                        "deputy": t.deputy_index,
                        "gate": t.gate_value,
                    })
                })
                .collect();
            let line = json!({
                "summary": out.text,
                "tokens": out.tokens,
                "trace": trace,
                "dataset": dataset_id,
                "unknown_tokens": unknown,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    if unknown_total > 0 {
        warn!("{unknown_total} input tokens were outside the checkpoint vocabulary and mapped to <unk>");
    }
    Ok(records.len())
}

fn write_with_result(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub checkpoint: String,
    pub report: ExpertiseReport,
    pub param_report: ParamReport,
    /// The same counts from walking the stored tensors.
    pub param_walk: ParamReport,
}

/// Expertise report over held-out data, with the metrics JSON and the
/// ROUGE, utilization, per-layer utilization and stats CSVs written under
/// `out`.
pub fn eval(checkpoint_path: &Path, cfg: &RunConfig, out: &Path) -> Result<Metrics> {
    let (params, _, vocab) = load_checkpoint(checkpoint_path)?;
    create_dir(out)?;
    let sets = eval_data(cfg, &params.config, &vocab)?;
    let opts = ReportOptions {
        decode: cfg.decode_options(ExpertMode::Full),
        utilization_side: cfg.utilization_side,
        pinned: true,
    };
    let report = expertise_report(&params, &sets, &opts)?;
    let metrics = Metrics {
        checkpoint: checkpoint_path.display().to_string(),
        param_report: param_report(&params.config)?,
        param_walk: param_walk(&params),
        report,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    write_with(&out.join("rouge.csv"), |w| metrics.report.write_rouge_csv(w))?;
    write_with(&out.join("utilization.csv"), |w| metrics.report.write_utilization_csv(w))?;
    write_with(&out.join("layer_utilization.csv"), |w| metrics.report.write_layer_utilization_csv(w))?;
    write_with(&out.join("stats.csv"), |w| metrics.report.write_stats_csv(w))?;
    Ok(metrics)
}

/// Writes the configured corpora as JSONL plus the vocabulary, for use with
/// file-based configs or outside tools.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let (vocab, corpora) = training_data(cfg)?;
    let mut written = Vec::new();
    for (id, examples) in &corpora {
        let p = out.join(format!("train_{id}.jsonl"));
        write_jsonl(&p, examples)?;
        written.push(p);
    }
    for (id, examples) in eval_data(cfg, &cfg.model, &vocab)? {
        let p = out.join(format!("eval_{id}.jsonl"));
        write_jsonl(&p, &examples)?;
        written.push(p);
    }
    let p = out.join("vocab.json");
    write_json(&p, &vocab)?;
    written.push(p);
    Ok(written)
}
