//! Reverse-mode tape over matrix-level primitives.
//!
//! Every tensor is viewed as a matrix whose column count is its last axis.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm::{gemm, View};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// One attention block: query rows `q_start..q_start+q_len` attend to key rows
/// `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpan {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `j <= i + k_len - q_len`.
    pub causal: bool,
}

impl AttentionSpan {
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1 + self.k_len).saturating_sub(self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    MulCol { a: usize, col: usize },
    Affine { a: usize, scale: f64 },
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// `tanh` of the inner polynomial, kept for the backward pass.
    Gelu { a: usize, tanh: Vec<f64> },
    Relu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { a: usize, idx: Vec<usize> },
    Pick { a: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Log(usize),
    Exp(usize),
    PowI { a: usize, exp: i32 },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        spans: Arc<[AttentionSpan]>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording tape. Single-threaded by construction (`&mut self` on every
/// recorded operation).
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Tanh-approximated GELU, exposed for reference computations.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut Vec<f64> {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], index: usize, delta: &[f64]) {
    let g = accumulate(grads, index, delta.len());
    for (x, d) in g.iter_mut().zip(delta) {
        *x += d;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Backward("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        &self.nodes[v.index]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.clone(), Op::Leaf, requires_grad)
    }

    /// Stops gradient flow: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(&t)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if bk != k {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let bview = if trans_b {
            View::transposed(bv.data(), 0, k)
        } else {
            View::rows(bv.data(), 0, n)
        };
        gemm(m, k, n, 1.0, View::rows(av.data(), 0, k), bview, 0.0, &mut out, 0, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: a.index,
                b: b.index,
                trans_b,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let src = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a.index), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a.index, b.index), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a.index, b.index), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a.index, b.index), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c {
            return Err(self.shape_err("add_row", a, bias));
        }
        let b = bv.data();
        let out = av.data().iter().enumerate().map(|(i, &x)| x + b[i % c]).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a: a.index, bias: bias.index }, rg))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let c = av.cols();
        if cv.len() != av.rows() {
            return Err(self.shape_err("mul_col", a, col));
        }
        let s = cv.data();
        let out = av.data().iter().enumerate().map(|(i, &x)| x * s[i / c]).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a, col]);
        Ok(self.push(t, Op::MulCol { a: a.index, col: col.index }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine { a: a.index, scale }, rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat", first, p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        let ids = parts.iter().map(|p| p.index).collect();
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::Concat(ids), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                size: cols,
            });
        }
        let src = av.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::Slice { a: a.index, start },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a.index), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a.index), rg)
    }

    /// Per-row layer normalization with learnable gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.index,
                gain: gain.index,
                bias: bias.index,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(&[a]);
        let av = self.value(a);
        let tanh: Vec<f64> = av.data().iter().map(|&x| gelu_tanh(x)).collect();
        let out = av.data().iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(t, Op::Gelu { a: a.index, tanh }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.index))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.index))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.index))
    }

    pub fn powi(&mut self, a: Var, exp: i32) -> Var {
        self.unary(a, |x| x.powi(exp), Op::PowI { a: a.index, exp })
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: table.index,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of `a` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if idx.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(av.row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                a: a.index,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::gather_rows`]: row `r` of `a` is added into row
    /// `idx[r]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if idx.len() != av.rows() {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; rows * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    size: rows,
                });
            }
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows {
                a: a.index,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Element `idx[r]` of each row `r`, as an `n×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "pick",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    op: "pick",
                    index: j,
                    size: c,
                });
            }
            out.push(av.data()[r * c + j]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, 1], out),
            Op::Pick {
                a: a.index,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a.index), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a.index), rg)
    }

    /// Fused multi-head scaled dot-product attention over packed rows.
    ///
    /// `q`, `k` and `v` share the model width; each head sees a contiguous
    /// block of `width / heads` columns. Rows outside every span produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Arc<[AttentionSpan]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(self.shape_err("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; qv.len()];
        let mut probs = Vec::new();
        for s in spans.iter() {
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() || s.k_len == 0 {
                return Err(Error::Index {
                    op: "attention",
                    index: (s.q_start + s.q_len).max(s.k_start + s.k_len),
                    size: qv.rows().min(kv.rows()),
                });
            }
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + s.q_len * s.k_len, 0.0);
                let p = &mut probs[base..];
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    View::rows(qv.data(), s.q_start * d + h * dh, d),
                    View::transposed(kv.data(), s.k_start * d + h * dh, d),
                    0.0,
                    p,
                    0,
                    s.k_len,
                );
                for i in 0..s.q_len {
                    let row = &mut p[i * s.k_len..(i + 1) * s.k_len];
                    let vis = s.visible(i);
                    let scores: Vec<f64> = row[..vis].to_vec();
                    softmax_row(&scores, &mut row[..vis]);
                    row[vis..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    1.0,
                    View::rows(p, 0, s.k_len),
                    View::rows(vv.data(), s.k_start * d + h * dh, d),
                    0.0,
                    &mut out,
                    s.q_start * d + h * dh,
                    d,
                );
            }
        }
        let t = Tensor::from_parts(vec![qv.rows(), d], out);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q: q.index,
                k: k.index,
                v: v.index,
                heads,
                spans,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of every node that requires
    /// them are returned; leaf gradients are retained, interior ones dropped
    /// once propagated.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[r].requires_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if self.wants(a) {
                    let ga = accumulate(grads, a, m * k);
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let bview = if trans_b {
                        View::rows(bv.data(), 0, k)
                    } else {
                        View::transposed(bv.data(), 0, n)
                    };
                    gemm(m, n, k, 1.0, View::rows(g, 0, n), bview, 1.0, ga, 0, k);
                }
                if self.wants(b) {
                    let gb = accumulate(grads, b, k * n);
                    if trans_b {
                        // dB = Gᵀ · A, shape n×k
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            View::transposed(g, 0, n),
                            View::rows(av.data(), 0, k),
                            1.0,
                            gb,
                            0,
                            k,
                        );
                    } else {
                        // dB = Aᵀ · G, shape k×n
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            View::transposed(av.data(), 0, k),
                            View::rows(g, 0, n),
                            1.0,
                            gb,
                            0,
                            n,
                        );
                    }
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let (m, n) = (self.val(a).rows(), self.val(a).cols());
                    let ga = accumulate(grads, a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    add_into(grads, a, g);
                }
                if self.wants(b) {
                    add_into(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(grads, a, g);
                }
                if self.wants(b) {
                    let gb = accumulate(grads, b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if self.wants(a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    add_into(grads, a, &d);
                }
                if self.wants(b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(grads, b, &d);
                }
            }
            &Op::AddRow { a, bias } => {
                if self.wants(a) {
                    add_into(grads, a, g);
                }
                if self.wants(bias) {
                    let c = out.cols();
                    let gb = accumulate(grads, bias, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                }
            }
            &Op::MulCol { a, col } => {
                let c = out.cols();
                if self.wants(a) {
                    let s = self.val(col).data();
                    let d: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * s[i / c]).collect();
                    add_into(grads, a, &d);
                }
                if self.wants(col) {
                    let av = self.val(a).data();
                    let rows = out.rows();
                    let gc = accumulate(grads, col, rows);
                    for r in 0..rows {
                        gc[r] += (0..c).map(|j| g[r * c + j] * av[r * c + j]).sum::<f64>();
                    }
                }
            }
            &Op::Affine { a, scale } => {
                if self.wants(a) {
                    let ga = accumulate(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += scale * d);
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.wants(p) {
                        let gp = accumulate(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice { a, start } => {
                if self.wants(a) {
                    let (rows, cols) = (self.val(a).rows(), self.val(a).cols());
                    let w = out.cols();
                    let ga = accumulate(grads, a, rows * cols);
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a) {
                    let c = out.cols();
                    let y = out.data();
                    let ga = accumulate(grads, a, y.len());
                    for r in 0..out.rows() {
                        let span = r * c..(r + 1) * c;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(p, q)| p * q).sum();
                        for j in span {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if self.wants(a) {
                    let c = out.cols();
                    let y = out.data();
                    let ga = accumulate(grads, a, y.len());
                    for r in 0..out.rows() {
                        let span = r * c..(r + 1) * c;
                        let total: f64 = g[span.clone()].iter().sum();
                        for j in span {
                            ga[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.val(*gain).data();
                if self.wants(*gain) {
                    let gg = accumulate(grads, *gain, c);
                    for (i, d) in g.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, *bias, c);
                    for (i, d) in g.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    let n = c as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> = (0..c).map(|j| g[r * c + j] * gv[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for (j, idx) in span.enumerate() {
                            gx[idx] += inv / n * (n * dxhat[j] - s1 - xhat[idx] * s2);
                        }
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let a = *a;
                if self.wants(a) {
                    let av = self.val(a).data();
                    let ga = accumulate(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i], tanh[i]);
                    }
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let av = self.val(a).data();
                    let ga = accumulate(grads, a, g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            &Op::Log(a) => {
                if self.wants(a) {
                    let av = self.val(a).data();
                    let ga = accumulate(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                }
            }
            &Op::Exp(a) => {
                if self.wants(a) {
                    let y = out.data();
                    let ga = accumulate(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            &Op::PowI { a, exp } => {
                if self.wants(a) {
                    let av = self.val(a).data();
                    let ga = accumulate(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * exp as f64 * av[i].powi(exp - 1);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.val(*table);
                    let d = tv.cols();
                    let gt = accumulate(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.wants(*a) {
                    let av = self.val(*a);
                    let c = av.cols();
                    let ga = accumulate(grads, *a, av.len());
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                if self.wants(*a) {
                    let c = out.cols();
                    let ga = accumulate(grads, *a, idx.len() * c);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if self.wants(*a) {
                    let av = self.val(*a);
                    let c = av.cols();
                    let ga = accumulate(grads, *a, av.len());
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    let n = self.val(a).len();
                    let ga = accumulate(grads, a, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.val(a).len();
                    let ga = accumulate(grads, a, n);
                    let d = g[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), *heads, spans, probs, grads),
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (usize, usize, usize),
        heads: usize,
        spans: &[AttentionSpan],
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut base = 0;
        for s in spans {
            for h in 0..heads {
                let n = s.q_len * s.k_len;
                let p = &probs[base..base + n];
                base += n;
                let go = View::rows(g, s.q_start * d + h * dh, d);
                // dV += Pᵀ · dO
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    1.0,
                    View::transposed(p, 0, s.k_len),
                    go,
                    1.0,
                    &mut dv,
                    s.k_start * d + h * dh,
                    d,
                );
                // dP = dO · Vᵀ
                let mut ds = vec![0.0; n];
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    1.0,
                    go,
                    View::transposed(vv.data(), s.k_start * d + h * dh, d),
                    0.0,
                    &mut ds,
                    0,
                    s.k_len,
                );
                for i in 0..s.q_len {
                    let row = i * s.k_len..(i + 1) * s.k_len;
                    let dot: f64 = ds[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ds[j] = p[j] * (ds[j] - dot);
                    }
                }
                // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    scale,
                    View::rows(&ds, 0, s.k_len),
                    View::rows(kv.data(), s.k_start * d + h * dh, d),
                    1.0,
                    &mut dq,
                    s.q_start * d + h * dh,
                    d,
                );
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    scale,
                    View::transposed(&ds, 0, s.k_len),
                    View::rows(qv.data(), s.q_start * d + h * dh, d),
                    1.0,
                    &mut dk,
                    s.k_start * d + h * dh,
                    d,
                );
            }
        }
        if self.wants(q) {
            add_into(grads, q, &dq);
        }
        if self.wants(k) {
            add_into(grads, k, &dk);
        }
        if self.wants(v) {
            add_into(grads, v, &dv);
        }
    }
}
