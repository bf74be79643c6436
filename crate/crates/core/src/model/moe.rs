//! Main/deputy mixture-of-experts feed-forward slot.
//!
//! Per token `a`:
//!
//! ```text
//! dist = softmax(a · W_e)            (W_e: the selector of the token's dataset)
//! p    = argmax dist, g = dist[p]    (ties go to the lowest index)
//! x    = σ(a W1_m + b1_m) W2_m + σ(g · (a W1_p + b1_p)) W2_p + b2_m
//! ```
//!
//! The top-1 index is piecewise constant; gradients reach the selector
//! through `g` only.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::params::MoeFfnParams;
use crate::autodiff::{Graph, Var};
use crate::config::{Activation, GateSite};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMode {
    DatasetAware,
    Classic,
    MainOnly,
}

/// Test and analysis hooks that replace the selector's decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoutingOverride {
    #[default]
    None,
    /// Keep the selector's choice but force its gate value to zero.
    ZeroGate,
    /// Route every token to this deputy; the gate value is that deputy's
    /// softmax probability.
    Pin(usize),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MoeOptions {
    pub activation: Activation,
    pub gate_site: GateSite,
    pub routing: RoutingOverride,
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRoute {
    pub deputy: usize,
    pub gate: f64,
    pub distribution: Vec<f64>,
}

/// Index and value of the largest entry; the lowest index wins ties.
pub fn top1(dist: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate().skip(1) {
        if v > dist[best] {
            best = i;
        }
    }
    (best, dist[best])
}

fn route_with(a: &[f64], w: &Tensor) -> Result<TokenRoute> {
    let (d, np) = (w.rows(), w.cols());
    if a.len() != d {
        return Err(Error::Shape {
            op: "route",
            lhs: vec![a.len()],
            rhs: w.shape().to_vec(),
        });
    }
    let logits: Vec<f64> = (0..np)
        .map(|j| (0..d).map(|i| a[i] * w.data()[i * np + j]).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&c| (c - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let distribution: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let (deputy, gate) = top1(&distribution);
    Ok(TokenRoute {
        deputy,
        gate,
        distribution,
    })
}

/// Dataset-aware routing of a single token representation. Only the
/// selector of `dataset_id` is read.
pub fn route_dataset_aware(a: &[f64], dataset_id: usize, params: &MoeFfnParams<Tensor>) -> Result<TokenRoute> {
    let w = params.selectors.get(dataset_id).ok_or(Error::Index {
        op: "route_dataset_aware",
        index: dataset_id,
        size: params.selectors.len(),
    })?;
    route_with(a, w)
}

/// Classic routing through the shared gate; blind to the dataset.
pub fn route_classic(a: &[f64], params: &MoeFfnParams<Tensor>) -> Result<TokenRoute> {
    let w = params
        .classic_gate
        .as_ref()
        .ok_or_else(|| Error::Config("classic gating requested but the slot has no classic gate".into()))?;
    route_with(a, w)
}

pub(crate) fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Relu => g.relu(x),
    }
}

pub struct MoeOutput {
    pub output: Var,
    /// One entry per input row; empty in main-only mode.
    pub routes: Vec<TokenRoute>,
}

/// Applies the MoE slot to every row of `a` (`n × d_model`).
pub fn moe_forward(
    g: &mut Graph,
    a: Var,
    dataset_id: usize,
    params: &MoeFfnParams<Var>,
    mode: FfnMode,
    opts: &MoeOptions,
) -> Result<MoeOutput> {
    let main = &params.main;
    let h = g.matmul(a, main.w1)?;
    let h = g.add_row(h, main.b1)?;
    let h = activate(g, h, opts.activation);
    let x = g.matmul(h, main.w2)?;
    let mut x = g.add_row(x, main.b2)?;

    let gate_w = match mode {
        FfnMode::MainOnly => return Ok(MoeOutput { output: x, routes: Vec::new() }),
        FfnMode::DatasetAware => *params.selectors.get(dataset_id).ok_or(Error::Index {
            op: "moe_forward selector",
            index: dataset_id,
            size: params.selectors.len(),
        })?,
        FfnMode::Classic => params
            .classic_gate
            .ok_or_else(|| Error::Config("classic gating requested but the slot has no classic gate".into()))?,
    };
    let np = params.deputies.len();
    if np == 0 {
        return Err(Error::Config("full expert mode needs at least one deputy".into()));
    }

    let logits = g.matmul(a, gate_w)?;
    let probs = g.softmax(logits);
    let n = g.value(a).rows();
    let mut routes = Vec::with_capacity(n);
    let mut choice = Vec::with_capacity(n);
    {
        let pv = g.value(probs);
        for r in 0..n {
            let dist = pv.row(r);
            let (p, gate) = match opts.routing {
                RoutingOverride::Pin(k) => {
                    if k >= np {
                        return Err(Error::Index {
                            op: "pinned deputy",
                            index: k,
                            size: np,
                        });
                    }
                    (k, dist[k])
                }
                RoutingOverride::ZeroGate => (top1(dist).0, 0.0),
                RoutingOverride::None => top1(dist),
            };
            choice.push(p);
            routes.push(TokenRoute {
                deputy: p,
                gate,
                distribution: dist.to_vec(),
            });
        }
    }
    let gates = match opts.routing {
        RoutingOverride::ZeroGate => g.constant(&Tensor::zeros(&[n, 1])),
        _ => g.pick(probs, &choice)?,
    };

    for (j, dep) in params.deputies.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&r| choice[r] == j).collect();
        if rows.is_empty() {
            continue;
        }
        let whole = rows.len() == n;
        let (aj, gj) = if whole {
            (a, gates)
        } else {
            (g.gather_rows(a, &rows)?, g.gather_rows(gates, &rows)?)
        };
        let z = g.matmul(aj, dep.w1)?;
        let z = g.add_row(z, dep.b1)?;
        let hj = match opts.gate_site {
            GateSite::PreActivation => {
                let z = g.mul_col(z, gj)?;
                activate(g, z, opts.activation)
            }
            GateSite::PostActivation => {
                let h = activate(g, z, opts.activation);
                g.mul_col(h, gj)?
            }
        };
        let out = g.matmul(hj, dep.w2)?;
        let out = if whole { out } else { g.scatter_rows(out, &rows, n)? };
        x = g.add(x, out)?;
    }
    Ok(MoeOutput { output: x, routes })
}

/// Which layer a routing record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stack", content = "index")]
pub enum LayerId {
    Encoder(usize),
    Decoder(usize),
}

impl LayerId {
    pub fn is_decoder(&self) -> bool {
        matches!(self, LayerId::Decoder(_))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "encoder.{i}"),
            LayerId::Decoder(i) => write!(f, "decoder.{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub layer: LayerId,
    pub position: usize,
    pub dataset_id: usize,
    pub deputy_index: usize,
    pub gate_value: f64,
    pub gate_distribution: Vec<f64>,
}

/// Per-token routing decisions collected during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub records: Vec<RouteRecord>,
}

impl RoutingTrace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn extend(&mut self, other: RoutingTrace) {
        self.records.extend(other.records);
    }

    /// CSV with columns `layer,position,dataset_id,deputy_index,gate_value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,position,dataset_id,deputy_index,gate_value")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.layer, r.position, r.dataset_id, r.deputy_index, r.gate_value
            )?;
        }
        Ok(())
    }

    /// Fraction of records routed to each deputy.
    pub fn utilization(&self, n_deputies: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_deputies];
        for r in &self.records {
            counts[r.deputy_index] += 1;
        }
        let total = self.records.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }
}
