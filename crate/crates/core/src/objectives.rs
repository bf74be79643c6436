//! Training objectives: teacher-forced cross-entropy, the per-token margin
//! between the full model and the main expert alone, and the quintic
//! max-margin penalty
//!
//! ```text
//! L_m = Σ_t (1 − P_full_t) · (1 − m_t⁵) / 2,   m_t = P_full_t − P_main_t
//! ```
//!
//! Both probabilities are taken at the gold token. `L_m` is summed over a
//! sequence's tokens and averaged over the sequences of a batch; the
//! generation loss is a mean over all target tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Forward, Layout, PackedBatch, PassRouting, RoutingOverride, TransformerParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen_loss: f64,
    pub margin_loss: f64,
    pub total: f64,
    pub per_token_margins: Vec<f64>,
}

impl LossBreakdown {
    pub fn mean_margin(&self) -> f64 {
        if self.per_token_margins.is_empty() {
            return 0.0;
        }
        self.per_token_margins.iter().sum::<f64>() / self.per_token_margins.len() as f64
    }
}

/// Mean negative log-likelihood of the gold tokens.
pub fn generation_loss(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Input("generation loss of an empty target".into()));
    }
    Ok(-log_probs.iter().sum::<f64>() / log_probs.len() as f64)
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// `P_full − P_main` at one gold token.
pub fn margin(p_full: f64, p_main: f64) -> Result<f64> {
    check_prob("P_full", p_full)?;
    check_prob("P_main", p_main)?;
    Ok(p_full - p_main)
}

fn margin_term(p_full: f64, m: f64) -> f64 {
    (1.0 - p_full) * (1.0 - m.powi(5)) / 2.0
}

/// Quintic max-margin loss summed over one sequence.
pub fn max_margin_loss(p_full: &[f64], p_main: &[f64]) -> Result<f64> {
    if p_full.len() != p_main.len() {
        return Err(Error::Shape {
            op: "max_margin_loss",
            lhs: vec![p_full.len()],
            rhs: vec![p_main.len()],
        });
    }
    let mut total = 0.0;
    for (&pf, &pm) in p_full.iter().zip(p_main) {
        total += margin_term(pf, margin(pf, pm)?);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    /// λ in `gen + λ · L_m`.
    pub margin_weight: f64,
    /// When false the main-only pass is skipped entirely (the ablated loss).
    pub margin_enabled: bool,
    /// Stop gradients flowing through the main-only pass.
    pub detach_main: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            margin_weight: 1.0,
            margin_enabled: true,
            detach_main: false,
        }
    }
}

pub struct BatchLoss {
    pub root: Var,
    pub breakdown: LossBreakdown,
    /// Routing of the full-model pass.
    pub routing: PassRouting,
}

/// Records the combined objective for one dataset-homogeneous batch.
pub fn batch_loss(
    graph: &mut Graph,
    params: &TransformerParams,
    bound: &Layout<Var>,
    batch: &PackedBatch,
    opts: &ObjectiveOptions,
    routing: RoutingOverride,
) -> Result<BatchLoss> {
    if !(opts.margin_weight >= 0.0) {
        return Err(Error::Config("margin weight must be non-negative".into()));
    }
    let full_opts = ForwardOptions {
        routing,
        ..ForwardOptions::full()
    };
    let mut fwd = Forward::new(graph, &params.config, bound);
    let (lp_full, routing) = fwd.gold_log_probs(batch, &full_opts)?;
    let mean_lp = graph.mean(lp_full);
    let gen = graph.scale(mean_lp, -1.0);
    let gen_loss = graph.value(gen).item();
    if !opts.margin_enabled {
        return Ok(BatchLoss {
            root: gen,
            breakdown: LossBreakdown {
                gen_loss,
                margin_loss: 0.0,
                total: gen_loss,
                per_token_margins: Vec::new(),
            },
            routing,
        });
    }

    let mut fwd = Forward::new(graph, &params.config, bound);
    let (lp_main, _) = fwd.gold_log_probs(batch, &ForwardOptions::main_only())?;
    let lp_main = if opts.detach_main { graph.detach(lp_main) } else { lp_main };
    let p_full = graph.exp(lp_full);
    let p_main = graph.exp(lp_main);
    let m = graph.sub(p_full, p_main)?;
    let per_token_margins = graph.value(m).data().to_vec();
    let m5 = graph.powi(m, 5);
    let coef = graph.affine(p_full, -1.0, 1.0);
    let decay = graph.affine(m5, -0.5, 0.5);
    let terms = graph.mul(coef, decay)?;
    let summed = graph.sum(terms);
    let margin_loss = graph.scale(summed, 1.0 / batch.len() as f64);
    let weighted = graph.scale(margin_loss, opts.margin_weight);
    let total = graph.add(gen, weighted)?;
    Ok(BatchLoss {
        root: total,
        breakdown: LossBreakdown {
            gen_loss,
            margin_loss: graph.value(margin_loss).item(),
            total: graph.value(total).item(),
            per_token_margins,
        },
        routing,
    })
}

/// Loss breakdown of a single `(source, target)` pair without gradients.
pub fn total_loss(
    params: &TransformerParams,
    src: &[usize],
    target: &[usize],
    dataset_id: usize,
    opts: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    let batch = PackedBatch::new(dataset_id, &[(src, target)])?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    Ok(batch_loss(&mut g, params, &bound, &batch, opts, RoutingOverride::None)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_loss_examples() {
        assert_eq!(generation_loss(&[0.0, 0.0]).unwrap(), 0.0);
        let v = 37.0f64;
        let uniform = vec![-(v.ln()); 5];
        assert!((generation_loss(&uniform).unwrap() - v.ln()).abs() < 1e-15);
        let l = generation_loss(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((l - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 1.0397).abs() < 1e-4);
        assert!(generation_loss(&[]).is_err());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(0.9, 0.9).unwrap(), 0.0);
        assert_eq!(margin(1.0, 0.0).unwrap(), 1.0);
        assert!((margin(0.8, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!(margin(1.2, 0.5).is_err());
        assert!(margin(0.5, -0.1).is_err());
    }

    #[test]
    fn max_margin_examples() {
        assert_eq!(max_margin_loss(&[1.0, 1.0], &[0.2, 0.9]).unwrap(), 0.0);
        assert_eq!(max_margin_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
        let l = max_margin_loss(&[0.8], &[0.5]).unwrap();
        assert!((l - 0.2 * (1.0 - 0.00243) / 2.0).abs() < 1e-12);
        assert!((l - 0.099757).abs() < 1e-12);
        assert!(max_margin_loss(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn term_is_monotone_and_bounded() {
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for &pf in &grid {
            for &pm in &grid {
                let t = margin_term(pf, pf - pm);
                assert!((0.0..=1.0).contains(&t));
            }
        }
        // decreasing in m for fixed P_full < 1
        for &pf in &grid[..20] {
            let ms: Vec<f64> = (-10..=10).map(|i| i as f64 / 10.0).collect();
            for w in ms.windows(2) {
                assert!(margin_term(pf, w[1]) < margin_term(pf, w[0]));
            }
        }
        // decreasing in P_full for fixed m < 1
        for m in [-1.0, -0.3, 0.0, 0.5, 0.99] {
            for w in grid.windows(2) {
                assert!(margin_term(w[1], m) < margin_term(w[0], m));
            }
        }
    }
}
