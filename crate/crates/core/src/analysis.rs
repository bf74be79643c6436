//! Per-dataset expertise analytics: deputy utilization over decoded tokens,
//! generated lengths, teacher-forced margins, and ROUGE under full,
//! main-only and deputy-pinned decoding.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::decoding::{decode, DecodeOptions, DecodeOutput};
use crate::error::Result;
use crate::metrics::{mean_scores, rouge, RougeScore};
use crate::model::{forward_log_probs, ExpertMode, LayerId, ForwardOptions, RoutingOverride, TransformerParams};
use crate::training::UtilizationSide;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub decode: DecodeOptions,
    pub utilization_side: UtilizationSide,
    /// Also decode with routing pinned to each deputy in turn.
    pub pinned: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            decode: DecodeOptions::default(),
            utilization_side: UtilizationSide::Decoder,
            pinned: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub median: f64,
}

impl LengthStats {
    pub fn of(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self::default();
        }
        let mut v = lengths.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        Self {
            mean: v.iter().sum::<usize>() as f64 / n as f64,
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    /// `full`, `main_only` or `pinned_{k}`.
    pub mode: String,
    pub rouge: RougeScore,
    pub length: LengthStats,
    /// Deputy shares over decoded tokens, pooled over layers by deputy
    /// index; absent when no routing happened.
    pub utilization: Option<Vec<f64>>,
    /// The same shares for each MoE layer on its own. Deputy `k` of one layer
    /// and deputy `k` of another are unrelated experts.
    #[serde(default)]
    pub layer_utilization: Vec<LayerUtilization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub layer: LayerId,
    pub fractions: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean_margin: f64,
    pub mean_p_full: f64,
    pub mean_p_main: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset_id: usize,
    pub examples: usize,
    pub gold_length: LengthStats,
    pub margin: MarginStats,
    pub modes: Vec<ModeResult>,
}

impl DatasetReport {
    pub fn mode(&self, name: &str) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseReport {
    pub datasets: Vec<DatasetReport>,
}

fn utilization(outputs: &[DecodeOutput], n_deputies: usize, side: UtilizationSide) -> Option<Vec<f64>> {
    let mut counts = vec![0usize; n_deputies];
    for o in outputs {
        for r in &o.trace.records {
            if side.includes(r.layer.is_decoder()) {
                counts[r.deputy_index] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn layer_utilization(outputs: &[DecodeOutput], n_deputies: usize, side: UtilizationSide) -> Vec<LayerUtilization> {
    let mut counts: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
    for o in outputs {
        for r in &o.trace.records {
            if side.includes(r.layer.is_decoder()) {
                counts.entry(r.layer).or_insert_with(|| vec![0; n_deputies])[r.deputy_index] += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(layer, c)| {
            let total: usize = c.iter().sum();
            LayerUtilization {
                layer,
                fractions: c.iter().map(|&x| x as f64 / total as f64).collect(),
            }
        })
        .collect()
}

fn run_mode(
    params: &TransformerParams,
    name: String,
    examples: &[Example],
    dataset_id: usize,
    fwd: ForwardOptions,
    opts: &ReportOptions,
) -> Result<ModeResult> {
    let outputs = examples
        .iter()
        .map(|e| decode(params, &e.source_ids, dataset_id, &fwd, &opts.decode))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<RougeScore> = outputs
        .iter()
        .zip(examples)
        .map(|(o, e)| rouge(&o.tokens, e.summary_ids()))
        .collect();
    let lengths: Vec<usize> = outputs.iter().map(|o| o.length).collect();
    Ok(ModeResult {
        mode: name,
        rouge: mean_scores(&scores),
        length: LengthStats::of(&lengths),
        utilization: utilization(&outputs, params.config.n_deputies, opts.utilization_side),
        layer_utilization: layer_utilization(&outputs, params.config.n_deputies, opts.utilization_side),
    })
}

/// Teacher-forced per-token margin statistics on gold summaries.
pub fn margin_stats(params: &TransformerParams, examples: &[Example], dataset_id: usize) -> Result<MarginStats> {
    let mut s = MarginStats::default();
    for e in examples {
        let full = forward_log_probs(params, &e.source_ids, &e.target_ids, dataset_id, &ForwardOptions::full())?;
        let main = forward_log_probs(params, &e.source_ids, &e.target_ids, dataset_id, &ForwardOptions::main_only())?;
        for (f, m) in full.iter().zip(&main) {
            let (pf, pm) = (f.exp(), m.exp());
            s.mean_margin += pf - pm;
            s.mean_p_full += pf;
            s.mean_p_main += pm;
            s.tokens += 1;
        }
    }
    let n = s.tokens.max(1) as f64;
    s.mean_margin /= n;
    s.mean_p_full /= n;
    s.mean_p_main /= n;
    Ok(s)
}

pub fn expertise_report(
    params: &TransformerParams,
    eval_sets: &[(usize, Vec<Example>)],
    opts: &ReportOptions,
) -> Result<ExpertiseReport> {
    let mut datasets = Vec::with_capacity(eval_sets.len());
    for (id, examples) in eval_sets {
        let mut modes = vec![
            run_mode(params, "full".into(), examples, *id, ForwardOptions::full(), opts)?,
            run_mode(params, "main_only".into(), examples, *id, ForwardOptions::main_only(), opts)?,
        ];
        if opts.pinned {
            for k in 0..params.config.n_deputies {
                let fwd = ForwardOptions {
                    mode: ExpertMode::Full,
                    routing: RoutingOverride::Pin(k),
                };
                modes.push(run_mode(params, format!("pinned_{k}"), examples, *id, fwd, opts)?);
            }
        }
        let gold: Vec<usize> = examples.iter().map(|e| e.summary_ids().len()).collect();
        datasets.push(DatasetReport {
            dataset_id: *id,
            examples: examples.len(),
            gold_length: LengthStats::of(&gold),
            margin: margin_stats(params, examples, *id)?,
            modes,
        });
    }
    datasets.sort_by_key(|d| d.dataset_id);
    Ok(ExpertiseReport { datasets })
}

impl ExpertiseReport {
    /// `dataset_id,mode,r1_f1,r2_f1,rl_f1,mean_length,median_length`
    pub fn write_rouge_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dataset_id,mode,r1_f1,r2_f1,rl_f1,mean_length,median_length")?;
        for d in &self.datasets {
            for m in &d.modes {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    d.dataset_id, m.mode, m.rouge.r1.f1, m.rouge.r2.f1, m.rouge.rl.f1, m.length.mean, m.length.median
                )?;
            }
        }
        Ok(())
    }

    /// Full-mode decoded-token utilization: `dataset_id,deputy_index,fraction`.
    pub fn write_utilization_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dataset_id,deputy_index,fraction")?;
        for d in &self.datasets {
            if let Some(u) = d.mode("full").and_then(|m| m.utilization.as_ref()) {
                for (k, f) in u.iter().enumerate() {
                    writeln!(w, "{},{},{}", d.dataset_id, k, f)?;
                }
            }
        }
        Ok(())
    }

    /// Full-mode shares per MoE layer: `dataset_id,layer,deputy_index,fraction`.
    pub fn write_layer_utilization_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dataset_id,layer,deputy_index,fraction")?;
        for d in &self.datasets {
            let Some(m) = d.mode("full") else { continue };
            for l in &m.layer_utilization {
                for (k, f) in l.fractions.iter().enumerate() {
                    writeln!(w, "{},{},{},{}", d.dataset_id, l.layer, k, f)?;
                }
            }
        }
        Ok(())
    }

    /// `dataset_id,gold_mean,gold_median,mean_margin,mean_p_full,mean_p_main`
    pub fn write_stats_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dataset_id,gold_mean,gold_median,mean_margin,mean_p_full,mean_p_main")?;
        for d in &self.datasets {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                d.dataset_id,
                d.gold_length.mean,
                d.gold_length.median,
                d.margin.mean_margin,
                d.margin.mean_p_full,
                d.margin.mean_p_main
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    #[test]
    fn median_and_mean() {
        assert_eq!(LengthStats::of(&[3, 1, 2]), LengthStats { mean: 2.0, median: 2.0 });
        assert_eq!(LengthStats::of(&[1, 2, 3, 10]).median, 2.5);
        assert_eq!(LengthStats::of(&[]), LengthStats::default());
    }

    #[test]
    fn report_shape_and_pinning() {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_hidden_main: 8,
            d_hidden_deputy: 4,
            n_deputies: 2,
            n_datasets: 2,
            max_src_len: 12,
            max_tgt_len: 8,
            ..ModelConfig::desk()
        };
        let p = TransformerParams::init(&cfg, 0).unwrap();
        let sets = generate_synthetic(&SyntheticSpec {
            n_domains: 2,
            vocab_size: 40,
            src_len_min: 6,
            src_len_max: 8,
            examples_per_domain: 3,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let r = expertise_report(&p, &sets, &ReportOptions::default()).unwrap();
        assert_eq!(r.datasets.len(), 2);
        for d in &r.datasets {
            assert_eq!(d.modes.len(), 4);
            assert!(d.mode("main_only").unwrap().utilization.is_none());
            assert!(d.mode("main_only").unwrap().layer_utilization.is_empty());
            let full = d.mode("full").unwrap();
            // one decoder layer, so the pooled and per-layer shares agree
            assert_eq!(full.layer_utilization.len(), 1);
            assert_eq!(full.layer_utilization[0].layer, LayerId::Decoder(0));
            assert_eq!(Some(&full.layer_utilization[0].fractions), full.utilization.as_ref());
            for m in &d.modes {
                if let Some(u) = &m.utilization {
                    assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            for k in 0..2 {
                let u = d.mode(&format!("pinned_{k}")).unwrap().utilization.as_ref().unwrap();
                assert_eq!(u[k], 1.0);
            }
        }
        let mut csv = Vec::new();
        r.write_rouge_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);
    }
}
