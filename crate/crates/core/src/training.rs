//! Training regimes: mixed multi-dataset training of every weight, and
//! deputy fine-tuning with the main expert and backbone frozen. Also the
//! expert/selector parameter accounting.

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::config::{GatingMode, ModelConfig};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::{PackedBatch, ParamInfo, ParamKind, RoutingOverride, TransformerParams};
use crate::objectives::{batch_loss, ObjectiveOptions};

/// Which token population routing utilization is counted over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilizationSide {
    #[default]
    Decoder,
    Encoder,
    Both,
}

impl UtilizationSide {
    pub fn includes(&self, decoder: bool) -> bool {
        match self {
            UtilizationSide::Decoder => decoder,
            UtilizationSide::Encoder => !decoder,
            UtilizationSide::Both => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches whose gradients are summed before one optimizer step.
    pub grad_accum_steps: usize,
    pub adam: AdamConfig,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// When false the main-only pass and the margin term are skipped.
    pub margin_enabled: bool,
    pub detach_main: bool,
    pub seed: u64,
    /// Fine-tuning trains one freshly allocated deputy per MoE slot instead
    /// of updating the existing deputies.
    pub add_fresh_deputy: bool,
    pub utilization_side: UtilizationSide,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            grad_accum_steps: 1,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup_steps: 0,
            margin_enabled: true,
            detach_main: false,
            seed: 0,
            add_fresh_deputy: false,
            utilization_side: UtilizationSide::Decoder,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used for large pretrained backbones.
    pub fn paper_scale() -> Self {
        Self {
            batch_size: 8,
            grad_accum_steps: 4,
            adam: AdamConfig::default(),
            warmup_steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be positive".into()));
        }
        self.adam.validate()
    }

    fn objective(&self, model: &ModelConfig) -> ObjectiveOptions {
        ObjectiveOptions {
            margin_weight: model.margin_weight,
            margin_enabled: self.margin_enabled,
            detach_main: self.detach_main,
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.adam.lr;
        }
        self.adam.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Per-tensor trainable flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

fn deputy_index(name: &str) -> Option<usize> {
    let rest = name.split(".deputy.").nth(1)?;
    rest.split('.').next()?.parse().ok()
}

impl FreezeMask {
    pub fn all(params: &TransformerParams) -> Self {
        Self {
            trainable: vec![true; params.len()],
        }
    }

    /// Selectors and deputies train; the main expert, attention, layer norms
    /// and embeddings (and so the tied output projection) stay fixed. Under
    /// classic gating the shared gate plays the selector's role.
    pub fn deputy_finetune(params: &TransformerParams) -> Self {
        Self::deputies_from(params, 0)
    }

    /// As [`FreezeMask::deputy_finetune`] but only deputies with index
    /// `>= first` train.
    pub fn deputies_from(params: &TransformerParams, first: usize) -> Self {
        let classic = params.config.gating_mode == GatingMode::Classic;
        let trainable = params
            .info
            .iter()
            .map(|i| match i.kind {
                ParamKind::Selector => true,
                ParamKind::ClassicGate => classic,
                ParamKind::Deputy => deputy_index(&i.name).is_some_and(|j| j >= first),
                _ => false,
            })
            .collect();
        Self { trainable }
    }

    pub fn count_trainable(&self, params: &TransformerParams) -> usize {
        params
            .tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.len())
            .sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub gen_loss: f64,
    pub margin_loss: f64,
    pub total: f64,
    pub mean_margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub dataset_id: usize,
    pub gen_loss: f64,
    pub margin_loss: f64,
    pub total: f64,
    pub mean_margin: f64,
}

/// Share of routed tokens each deputy received for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetUtilization {
    pub dataset_id: usize,
    pub tokens: usize,
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub frozen_tensors: usize,
    pub digest_before: String,
    pub digest_after: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: String,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepStats>,
    /// Counted over the final epoch.
    pub utilization: Vec<DatasetUtilization>,
    pub optimizer_steps: u64,
    pub trainable_params: usize,
    pub wall_clock_secs: f64,
    /// Set by the fine-tuning regime.
    pub frozen_params_unchanged: Option<bool>,
    pub freeze_check: Option<FreezeCheck>,
    /// Path of the checkpoint written from this run, when there is one.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// `step,dataset_id,gen_loss,margin_loss,total,mean_margin`
    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,dataset_id,gen_loss,margin_loss,total,mean_margin")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.step, s.dataset_id, s.gen_loss, s.margin_loss, s.total, s.mean_margin
            )?;
        }
        Ok(())
    }

    /// `dataset_id,deputy_index,fraction`
    pub fn write_utilization_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dataset_id,deputy_index,fraction")?;
        for u in &self.utilization {
            for (k, f) in u.fractions.iter().enumerate() {
                writeln!(w, "{},{},{}", u.dataset_id, k, f)?;
            }
        }
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }
}

fn check_corpora(params: &TransformerParams, corpora: &[(usize, Vec<Example>)]) -> Result<()> {
    if corpora.is_empty() {
        return Err(Error::Input("no training corpus given".into()));
    }
    let cfg = &params.config;
    for (id, examples) in corpora {
        if examples.is_empty() {
            return Err(Error::Input(format!("corpus for dataset {id} is empty")));
        }
        if *id >= cfg.n_datasets {
            return Err(Error::Input(format!(
                "dataset id {id} out of range for a model with {} datasets",
                cfg.n_datasets
            )));
        }
        for e in examples {
            if e.dataset_id != *id {
                return Err(Error::Input(format!(
                    "example tagged with dataset {} inside corpus {id}",
                    e.dataset_id
                )));
            }
            if e.source_ids.len() > cfg.max_src_len || e.n_y() > cfg.max_tgt_len {
                return Err(Error::Input(format!(
                    "example of lengths {}/{} exceeds caps {}/{}",
                    e.source_ids.len(),
                    e.n_y(),
                    cfg.max_src_len,
                    cfg.max_tgt_len
                )));
            }
            if let Some(&bad) = e.source_ids.iter().chain(&e.target_ids).find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Input(format!("token id {bad} outside the vocabulary")));
            }
        }
    }
    Ok(())
}

/// Dataset-homogeneous batches of every corpus, shuffled within each corpus
/// and then across corpora.
fn epoch_batches<'a>(
    corpora: &'a [(usize, Vec<Example>)],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<&'a Example>)> {
    let mut batches = Vec::new();
    for (id, examples) in corpora {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batches.push((*id, chunk.iter().map(|&i| &examples[i]).collect()));
        }
    }
    batches.shuffle(rng);
    batches
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    mask: &'a FreezeMask,
    objective: ObjectiveOptions,
    adam: Adam,
    grads: Vec<Option<Vec<f64>>>,
    pending: usize,
}

impl Trainer<'_> {
    fn flush(&mut self, params: &mut TransformerParams) {
        if self.pending == 0 {
            return;
        }
        let scale = 1.0 / self.pending as f64;
        let lr = self.cfg.lr_at(self.adam.steps_taken() + 1);
        let mut slots = Vec::new();
        for (i, (t, g)) in params.tensors.iter_mut().zip(self.grads.iter_mut()).enumerate() {
            if let Some(g) = g.as_mut() {
                if scale != 1.0 {
                    g.iter_mut().for_each(|x| *x *= scale);
                }
                slots.push((i, t.data_mut(), g.as_slice()));
            }
        }
        self.adam.update(lr, slots);
        self.grads.iter_mut().for_each(|g| *g = None);
        self.pending = 0;
    }
}

fn run(
    params: &mut TransformerParams,
    corpora: &[(usize, Vec<Example>)],
    cfg: &TrainConfig,
    mask: &FreezeMask,
    regime: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_corpora(params, corpora)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7472_6169_6e);
    let mut trainer = Trainer {
        cfg,
        mask,
        objective: cfg.objective(&params.config),
        adam: Adam::new(cfg.adam, params.tensors.iter().map(|t| t.len()))?,
        grads: vec![None; params.len()],
        pending: 0,
    };
    let np = params.config.n_deputies;
    let mut report = TrainReport {
        regime: regime.into(),
        seed: cfg.seed,
        trainable_params: mask.count_trainable(params),
        ..Default::default()
    };
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(corpora, cfg.batch_size, &mut rng);
        counts = vec![vec![0; np]; params.config.n_datasets];
        let mut sums = EpochStats {
            epoch,
            ..Default::default()
        };
        let mut seqs = 0usize;
        let mut margin_tokens = 0usize;
        for (dataset_id, batch) in batches {
            let pairs: Vec<(&[usize], &[usize])> = batch
                .iter()
                .map(|e| (e.source_ids.as_slice(), e.target_ids.as_slice()))
                .collect();
            let packed = PackedBatch::new(dataset_id, &pairs)?;
            let mut g = Graph::new();
            let (bound, vars) = params.bind(&mut g, Some(&trainer.mask.trainable));
            let loss = batch_loss(&mut g, params, &bound, &packed, &trainer.objective, RoutingOverride::None)?;
            let grads = g.backward(loss.root)?;
            for (i, v) in vars.iter().enumerate() {
                if !trainer.mask.trainable[i] {
                    continue;
                }
                if let Some(src) = grads.get(*v) {
                    match trainer.grads[i].as_mut() {
                        Some(acc) => acc.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                        None => trainer.grads[i] = Some(src.to_vec()),
                    }
                }
            }
            trainer.pending += 1;
            if trainer.pending == cfg.grad_accum_steps {
                trainer.flush(params);
            }

            for (layer, routes) in &loss.routing.layers {
                if cfg.utilization_side.includes(layer.is_decoder()) {
                    for r in routes {
                        counts[dataset_id][r.deputy] += 1;
                    }
                }
            }
            let b = &loss.breakdown;
            let n = packed.len();
            seqs += n;
            sums.gen_loss += b.gen_loss * n as f64;
            sums.margin_loss += b.margin_loss * n as f64;
            sums.total += b.total * n as f64;
            sums.mean_margin += b.per_token_margins.iter().sum::<f64>();
            margin_tokens += b.per_token_margins.len();
            report.steps.push(StepStats {
                step: report.steps.len(),
                dataset_id,
                gen_loss: b.gen_loss,
                margin_loss: b.margin_loss,
                total: b.total,
                mean_margin: b.mean_margin(),
            });
        }
        trainer.flush(params);
        let n = seqs.max(1) as f64;
        sums.gen_loss /= n;
        sums.margin_loss /= n;
        sums.total /= n;
        sums.mean_margin /= margin_tokens.max(1) as f64;
        info!(
            "{regime} epoch {epoch}: total {:.5} gen {:.5} margin {:.5} m̄ {:.4}",
            sums.total, sums.gen_loss, sums.margin_loss, sums.mean_margin
        );
        report.epochs.push(sums);
    }
    if !params.all_finite() {
        return Err(Error::Backward("training produced non-finite parameters".into()));
    }
    report.utilization = counts
        .iter()
        .enumerate()
        .filter_map(|(id, c)| {
            let tokens: usize = c.iter().sum();
            (tokens > 0).then(|| DatasetUtilization {
                dataset_id: id,
                tokens,
                fractions: c.iter().map(|&x| x as f64 / tokens as f64).collect(),
            })
        })
        .collect();
    report.optimizer_steps = trainer.adam.steps_taken();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    debug!("{regime}: {} optimizer steps in {:.1}s", report.optimizer_steps, report.wall_clock_secs);
    Ok(report)
}

/// Trains every weight on the union of `corpora`, one dataset per batch.
pub fn train_mixed(
    params: &TransformerParams,
    corpora: &[(usize, Vec<Example>)],
    cfg: &TrainConfig,
) -> Result<(TransformerParams, TrainReport)> {
    let mut out = params.clone();
    let mask = FreezeMask::all(&out);
    let report = run(&mut out, corpora, cfg, &mask, "mixed")?;
    Ok((out, report))
}

/// Frozen tensors of `after` must equal their counterparts in `before`. A
/// frozen tensor that grew columns (a classic gate after deputies were
/// added) is compared on the columns it already had.
fn frozen_unchanged(before: &TransformerParams, after: &TransformerParams, mask: &FreezeMask) -> bool {
    after.info.iter().zip(&after.tensors).zip(&mask.trainable).all(|((info, t), &trainable)| {
        if trainable {
            return true;
        }
        let Some(old) = before.get(&info.name) else { return false };
        if old.shape() == t.shape() {
            return old.bitwise_eq(t);
        }
        let (rows, old_cols, new_cols) = (old.rows(), old.cols(), t.cols());
        old.rows() == t.rows()
            && (0..rows).all(|r| {
                old.data()[r * old_cols..(r + 1) * old_cols]
                    .iter()
                    .zip(&t.data()[r * new_cols..r * new_cols + old_cols])
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    })
}

fn frozen_digest(params: &TransformerParams, reference: &TransformerParams, mask: &FreezeMask) -> String {
    let frozen: Vec<&str> = params
        .info
        .iter()
        .zip(&mask.trainable)
        .filter(|(info, &t)| !t && reference.get(&info.name).is_some_and(|r| r.shape() == info.shape.as_slice()))
        .map(|(info, _)| info.name.as_str())
        .collect();
    params.digest(|i: &ParamInfo| frozen.contains(&i.name.as_str()))
}

/// Fine-tunes selectors and deputies on one corpus with everything else
/// frozen. A corpus tagged `n_datasets` first allocates a fresh selector per
/// MoE slot; larger ids are rejected.
pub fn finetune_deputy(
    params: &TransformerParams,
    dataset_id: usize,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(TransformerParams, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::Input("fine-tuning needs at least one example".into()));
    }
    let n = params.config.n_datasets;
    if dataset_id > n {
        return Err(Error::Input(format!(
            "dataset id {dataset_id} skips ahead; the next new dataset must be {n}"
        )));
    }
    let mut out = if dataset_id == n {
        params.with_extra_dataset(cfg.seed)?
    } else {
        params.clone()
    };
    let mask = if cfg.add_fresh_deputy {
        let first = out.config.n_deputies;
        out = out.with_extra_deputies(1, cfg.seed)?;
        FreezeMask::deputies_from(&out, first)
    } else {
        FreezeMask::deputy_finetune(&out)
    };
    let frozen_tensors = mask.trainable.iter().filter(|&&t| !t).count();
    let digest_before = frozen_digest(&out, params, &mask);
    let corpora = vec![(dataset_id, examples.to_vec())];
    let mut report = run(&mut out, &corpora, cfg, &mask, "finetune")?;
    let unchanged = frozen_unchanged(params, &out, &mask);
    report.frozen_params_unchanged = Some(unchanged);
    report.freeze_check = Some(FreezeCheck {
        frozen_tensors,
        digest_before,
        digest_after: frozen_digest(&out, params, &mask),
    });
    if !unchanged {
        return Err(Error::Backward("a frozen tensor changed during fine-tuning".into()));
    }
    Ok((out, report))
}

/// Closed-form parameter counts of a configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// MoE-bearing layers over both stacks.
    pub moe_layers: usize,
    /// Weights of one deputy: `d·dh + dh + dh·d`.
    pub per_deputy: usize,
    pub deputy_params: usize,
    /// `moe_layers · n_datasets · d_model · n_deputies`.
    pub selector_params: usize,
    pub classic_gate_params: usize,
    pub main_expert_params: usize,
    /// Everything outside the MoE routing and deputies, main experts
    /// included.
    pub backbone_params: usize,
    pub total: usize,
}

pub fn param_report(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let (d, l) = (cfg.d_model, cfg.n_layers);
    let moe_layers = cfg.moe_layer_count();
    let per_deputy = d * cfg.d_hidden_deputy + cfg.d_hidden_deputy + cfg.d_hidden_deputy * d;
    let deputy_params = moe_layers * cfg.n_deputies * per_deputy;
    let selector_params = moe_layers * cfg.n_datasets * d * cfg.n_deputies;
    let classic_gate_params = moe_layers * d * cfg.n_deputies;
    let main_per_layer = d * cfg.d_hidden_main + cfg.d_hidden_main + cfg.d_hidden_main * d + d;
    let main_expert_params = 2 * l * main_per_layer;
    let attention = 4 * (d * d + d);
    let norm = 2 * d;
    let positions = match cfg.positional {
        crate::config::Positional::Learned => (cfg.max_src_len + cfg.max_tgt_len) * d,
        crate::config::Positional::Sinusoidal => 0,
    };
    let encoder = l * (attention + 2 * norm);
    let decoder = l * (2 * attention + 3 * norm);
    let backbone_params = cfg.vocab_size * d + positions + encoder + decoder + 2 * norm + main_expert_params;
    Ok(ParamReport {
        moe_layers,
        per_deputy,
        deputy_params,
        selector_params,
        classic_gate_params,
        main_expert_params,
        backbone_params,
        total: backbone_params + deputy_params + selector_params + classic_gate_params,
    })
}

/// The same counts obtained by walking the allocated tensors.
pub fn param_walk(params: &TransformerParams) -> ParamReport {
    let by_kind = |k: ParamKind| -> usize {
        params
            .info
            .iter()
            .filter(|i| i.kind == k)
            .map(|i| i.shape.iter().product::<usize>())
            .sum()
    };
    let deputy_params = by_kind(ParamKind::Deputy);
    let selector_params = by_kind(ParamKind::Selector);
    let classic_gate_params = by_kind(ParamKind::ClassicGate);
    let main_expert_params = by_kind(ParamKind::MainExpert);
    let total = params.total_scalars();
    let moe_layers = params.info.iter().filter(|i| i.kind == ParamKind::ClassicGate).count();
    let one = params
        .info
        .iter()
        .filter(|i| i.kind == ParamKind::Deputy && i.name.starts_with(&deputy_prefix(params)))
        .map(|i| i.shape.iter().product::<usize>())
        .sum();
    ParamReport {
        moe_layers,
        per_deputy: one,
        deputy_params,
        selector_params,
        classic_gate_params,
        main_expert_params,
        backbone_params: total - deputy_params - selector_params - classic_gate_params,
        total,
    }
}

fn deputy_prefix(params: &TransformerParams) -> String {
    params
        .info
        .iter()
        .find(|i| i.kind == ParamKind::Deputy)
        .and_then(|i| i.name.split(".deputy.").next().map(|p| format!("{p}.deputy.0.")))
        .unwrap_or_default()
}
