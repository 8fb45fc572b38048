//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A define-by-run tape records every primitive applied during a forward
//! pass; replaying the records in reverse propagates gradients. The op set
//! is exactly what the transformer, the reward towers, and the policy
//! objective need: matmul, elementwise ops, row reductions, sequence-axis
//! concat, and embedding gather. Row-major storage, no broadcasting beyond
//! row-wise bias addition.
//!
//! Everything is 64-bit: the value of this crate is verification, and
//! double precision keeps central finite differences tight.

use crate::error::{Error, Result};

/// Epsilon inside layer-norm's square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor for logs and norms.
pub const LOG_EPS: f64 = 1e-12;

/// A dense row-major tensor. Rank 0 (shape `[]`) is a scalar with one
/// element; rank 1 is a vector; rank 2 a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Tensor::new(shape, data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Box–Muller; two uniform draws per normal keeps the stream layout simple.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    ScaleByScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    ConcatRows(NodeId, NodeId),
    SliceRows { x: NodeId, start: usize, len: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SelectPerRow { x: NodeId, idx: Vec<usize> },
    RowSum(NodeId),
    MeanRows(NodeId),
    NormalizeRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations. Rebuilt per forward pass;
/// confined to one thread together with its tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

// ── raw kernels (shared by forward and backward) ─────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// A[m×k] · B[n×k]ᵀ → C[m×n]
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// A[k×m]ᵀ · B[k×n] → C[m×n]
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (&v, o) in row.iter().zip(out.iter_mut()) {
        *o = v - max;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf from an external tensor (data copied in).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf, t.requires_grad)
    }

    /// Non-trainable leaf from raw parts (masks, positional encodings, ...).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(Tensor::new(shape, data), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value.data
    }

    /// Gradient accumulated on a node by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        self.nodes.len() - 1
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<NodeId> {
        let t = Tensor::new(shape, data);
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("forward produced NaN/Inf in {:?}", op_name(&op))));
        }
        Ok(self.push(t, op, rg))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── primitive ops ────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.result(shape, data, Op::Add(a, b), rg)
    }

    /// `[m×n] + [n]` row-broadcast (bias add).
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        if ta.shape.len() != 2 || tb.shape != vec![ta.shape[1]] {
            return Err(Error::Shape(format!("add_row: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = ta.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.result(vec![m, n], data, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.result(shape, data, Op::Scale(a, c), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.result(shape, data, Op::Mul(a, b), rg)
    }

    /// Multiply every element of `a` by scalar node `s` (e.g. a learnable
    /// contrastive temperature).
    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ts = &self.nodes[s].value;
        if !ts.is_scalar() {
            return Err(Error::Shape(format!("scale_by_scalar: scalar expected, got {:?}", ts.shape)));
        }
        let sv = ts.data[0];
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x * sv).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(s);
        self.result(shape, data, Op::ScaleByScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|x| x.exp()).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.result(shape, data, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|&x| gelu_val(x)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.result(shape, data, Op::Gelu(a), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape(format!("matmul: {:?} · {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.result(vec![m, n], data, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`; attention scores and tied output
    /// projections use this to avoid materializing transposes.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::Shape(format!("matmul_nt: {:?} · {:?}ᵀ", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let data = matmul_nt_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.result(vec![m, n], data, Op::MatMulNT(a, b), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        if ta.shape.len() != 2 {
            return Err(Error::Shape(format!("softmax_rows: {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            log_softmax_row(row, out);
            for o in out.iter_mut() {
                *o = o.exp();
            }
        }
        let rg = self.rg(a);
        self.result(vec![m, n], data, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-softmax with max subtraction; `Σ_j exp(out[r][j]) = 1`.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        if ta.shape.len() != 2 {
            return Err(Error::Shape(format!("log_softmax_rows: {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(&ta.data[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.result(vec![m, n], data, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer norm: zero mean, unit variance, then `· gain + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        if tx.shape.len() != 2 {
            return Err(Error::Shape(format!("layer_norm: {:?}", tx.shape)));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        if tg.shape != vec![n] || tb.shape != vec![n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs width {}",
                tg.shape, tb.shape, n
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.result(vec![m, n], data, Op::LayerNorm { x, gain, bias }, rg)
    }

    /// Concatenate along the sequence (row) axis.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::Shape(format!("concat_rows: {:?} ++ {:?}", ta.shape, tb.shape)));
        }
        let n = ta.shape[1];
        let m = ta.shape[0] + tb.shape[0];
        let mut data = Vec::with_capacity(m * n);
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let rg = self.rg(a) || self.rg(b);
        self.result(vec![m, n], data, Op::ConcatRows(a, b), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape.len() != 2 || start + len > tx.shape[0] {
            return Err(Error::Shape(format!(
                "slice_rows: rows {}..{} of {:?}",
                start,
                start + len,
                tx.shape
            )));
        }
        let n = tx.shape[1];
        let data = tx.data[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        self.result(vec![len, n], data, Op::SliceRows { x, start, len }, rg)
    }

    /// Embedding lookup: `out[i, :] = table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table].value;
        if tt.shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows: table {:?}", tt.shape)));
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("gather_rows: id {} out of vocab {}", bad, v)));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.result(vec![ids.len(), d], data, Op::GatherRows { table, ids: ids.to_vec() }, rg)
    }

    /// `out[i] = x[i, idx[i]]` (chosen-token log-prob extraction).
    pub fn select_per_row(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape.len() != 2 || idx.len() != tx.shape[0] {
            return Err(Error::Shape(format!(
                "select_per_row: {:?} with {} indices",
                tx.shape,
                idx.len()
            )));
        }
        let n = tx.shape[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Input(format!("select_per_row: column {} out of {}", bad, n)));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| tx.data[i * n + j]).collect();
        let rg = self.rg(x);
        self.result(vec![idx.len()], data, Op::SelectPerRow { x, idx: idx.to_vec() }, rg)
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape.len() != 2 {
            return Err(Error::Shape(format!("row_sum: {:?}", tx.shape)));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let data = (0..m).map(|i| tx.data[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(x);
        self.result(vec![m], data, Op::RowSum(x), rg)
    }

    /// Column means: `[m×n] → [1×n]` (mean pooling over the sequence axis).
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape.len() != 2 || tx.shape[0] == 0 {
            return Err(Error::Shape(format!("mean_rows: {:?}", tx.shape)));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += tx.data[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let rg = self.rg(x);
        self.result(vec![1, n], data, Op::MeanRows(x), rg)
    }

    /// Scale every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if tx.shape.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows: {:?}", tx.shape)));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(LOG_EPS);
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.rg(x);
        self.result(vec![m, n], data, Op::NormalizeRows(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x].value.data.iter().sum();
        let rg = self.rg(x);
        self.result(vec![], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.numel() == 0 {
            return Err(Error::Shape("mean_all of empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.result(vec![], vec![s], Op::MeanAll(x), rg)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss to every `requires_grad`
    /// node. Visits records exactly once, in reverse order; gradients
    /// accumulate additively where a node feeds several consumers.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward called twice on one tape".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::Contract("loss node not on this tape".into()));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape
            )));
        }
        self.spent = true;

        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[id].requires_grad {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of node {} is NaN/Inf", id)));
                    }
                    self.nodes[id].grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, tape: &Tape, f: &mut dyn FnMut(&mut [f64])| {
            if !tape.nodes[target].requires_grad {
                return;
            }
            let numel = tape.nodes[target].value.numel();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; numel]);
            f(buf);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    acc(grads, t, self, &mut |buf| {
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                let n = self.nodes[*bias].value.numel();
                acc(grads, *a, self, &mut |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(grads, *bias, self, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % n] += gi;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, self, &mut |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[*a].value.data.clone(), self.nodes[*b].value.data.clone());
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * db[i];
                    }
                });
                acc(grads, *b, self, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * da[i];
                    }
                });
            }
            Op::ScaleByScalar(a, s) => {
                let sv = self.nodes[*s].value.data[0];
                let da = self.nodes[*a].value.data.clone();
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sv;
                    }
                });
                acc(grads, *s, self, &mut |buf| {
                    buf[0] += g.iter().zip(&da).map(|(gi, xi)| gi * xi).sum::<f64>();
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[id].value.data.clone();
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data.clone();
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[*a].requires_grad {
                    let da = matmul_nt_raw(g, &tb.data, m, n, k);
                    acc(grads, *a, self, &mut |buf| {
                        for i in 0..buf.len() {
                            buf[i] += da[i];
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_tn_raw(&ta.data, g, k, m, n);
                    acc(grads, *b, self, &mut |buf| {
                        for i in 0..buf.len() {
                            buf[i] += db[i];
                        }
                    });
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if self.nodes[*a].requires_grad {
                    let da = matmul_raw(g, &tb.data, m, n, k);
                    acc(grads, *a, self, &mut |buf| {
                        for i in 0..buf.len() {
                            buf[i] += da[i];
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_tn_raw(g, &ta.data, n, m, k);
                    acc(grads, *b, self, &mut |buf| {
                        for i in 0..buf.len() {
                            buf[i] += db[i];
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let p = self.nodes[id].value.data.clone();
                let (m, n) = (self.nodes[id].value.shape[0], self.nodes[id].value.shape[1]);
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..n {
                            buf[i * n + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let out = self.nodes[id].value.data.clone();
                let (m, n) = (self.nodes[id].value.shape[0], self.nodes[id].value.shape[1]);
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            buf[i * n + j] += gr[j] - out[i * n + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let (m, n) = (tx.shape[0], tx.shape[1]);
                // Recompute per-row normalization stats.
                let mut xhat = vec![0.0; m * n];
                let mut inv = vec![0.0; m];
                for i in 0..m {
                    let row = &tx.data[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    inv[i] = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv[i];
                    }
                }
                if self.nodes[*gain].requires_grad {
                    acc(grads, *gain, self, &mut |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += g[i * n + j] * xhat[i * n + j];
                            }
                        }
                    });
                }
                if self.nodes[*bias].requires_grad {
                    acc(grads, *bias, self, &mut |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += g[i * n + j];
                            }
                        }
                    });
                }
                if self.nodes[*x].requires_grad {
                    let gd = tg.data.clone();
                    acc(grads, *x, self, &mut |buf| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            let xr = &xhat[i * n..(i + 1) * n];
                            let mut gy_mean = 0.0;
                            let mut gyx_mean = 0.0;
                            for j in 0..n {
                                let gy = gr[j] * gd[j];
                                gy_mean += gy;
                                gyx_mean += gy * xr[j];
                            }
                            gy_mean /= n as f64;
                            gyx_mean /= n as f64;
                            for j in 0..n {
                                let gy = gr[j] * gd[j];
                                buf[i * n + j] += inv[i] * (gy - gy_mean - xr[j] * gyx_mean);
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.numel();
                acc(grads, *a, self, &mut |buf| {
                    for i in 0..na {
                        buf[i] += g[i];
                    }
                });
                acc(grads, *b, self, &mut |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[na + i];
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let n = self.nodes[id].value.shape[1];
                let (start, len) = (*start, *len);
                acc(grads, *x, self, &mut |buf| {
                    for i in 0..len * n {
                        buf[start * n + i] += g[i];
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[id].value.shape[1];
                acc(grads, *table, self, &mut |buf| {
                    for (row, &tid) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[tid * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::SelectPerRow { x, idx } => {
                let n = self.nodes[*x].value.shape[1];
                acc(grads, *x, self, &mut |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * n + j] += g[i];
                    }
                });
            }
            Op::RowSum(x) => {
                let n = self.nodes[*x].value.shape[1];
                acc(grads, *x, self, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..n {
                            buf[i * n + j] += gi;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (self.nodes[*x].value.shape[0], self.nodes[*x].value.shape[1]);
                acc(grads, *x, self, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let tx = &self.nodes[*x].value;
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let xd = tx.data.clone();
                acc(grads, *x, self, &mut |buf| {
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(LOG_EPS);
                        let dot: f64 = row.iter().zip(gr).map(|(x, gv)| x * gv).sum();
                        for j in 0..n {
                            buf[i * n + j] += gr[j] / norm - row[j] * dot / (norm * norm * norm);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gi = g[0];
                acc(grads, *x, self, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += gi;
                    }
                });
            }
            Op::MeanAll(x) => {
                let numel = self.nodes[*x].value.numel() as f64;
                let gi = g[0] / numel;
                acc(grads, *x, self, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += gi;
                    }
                });
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Mul(..) => "mul",
        Op::ScaleByScalar(..) => "scale_by_scalar",
        Op::Exp(..) => "exp",
        Op::Gelu(..) => "gelu",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::SelectPerRow { .. } => "select_per_row",
        Op::RowSum(..) => "row_sum",
        Op::MeanRows(..) => "mean_rows",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
    }
}

/// Compare analytic gradients of `f` at `x` against central finite
/// differences with the given step. Returns the max over elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must build a scalar from its input node and be deterministic.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut leaf = x.clone();
    leaf.requires_grad = true;

    let mut tape = Tape::new();
    let xid = tape.leaf(&leaf);
    let loss = f(&mut tape, xid)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract("grad_check: f must produce a scalar".into()));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .ok_or_else(|| Error::Contract("grad_check: no gradient reached the input".into()))?
        .to_vec();

    let eval = |data: &[f64], f: &mut F| -> Result<f64> {
        let mut t = Tensor::new(x.shape.clone(), data.to_vec());
        t.requires_grad = false;
        let mut tape = Tape::new();
        let id = tape.leaf(&t);
        let out = f(&mut tape, id)?;
        Ok(tape.data(out)[0])
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = eval(&probe, &mut f)?;
        probe[i] = orig - step;
        let lo = eval(&probe, &mut f)?;
        probe[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data)
    }

    use rand::Rng;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]);
        let b = tape.constant(vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        match tape.matmul(a, b) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // 3×4 by 4×2 per the contract; check both operands.
        let b = rand_tensor(vec![4, 2], 11);
        let a = rand_tensor(vec![3, 4], 12);
        let err_a = grad_check(
            |tape, x| {
                let bb = tape.constant(b.shape.clone(), b.data.clone());
                let c = tape.matmul(x, bb)?;
                tape.sum_all(c)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6, "matmul lhs grad err {}", err_a);

        let err_b = grad_check(
            |tape, x| {
                let aa = tape.constant(a.shape.clone(), a.data.clone());
                let c = tape.matmul(aa, x)?;
                tape.sum_all(c)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_b < 1e-6, "matmul rhs grad err {}", err_b);
    }

    #[test]
    fn log_softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let y = tape.log_softmax_rows(x).unwrap();
        for &v in tape.data(y) {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }

        let x = tape.constant(vec![1, 2], vec![1000.0, 0.0]);
        let y = tape.log_softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert!(d[0].abs() < 1e-12 && (d[1] + 1000.0).abs() < 1e-9);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_rows_sum_to_one_and_grads_match() {
        let x = rand_tensor(vec![2, 5], 21);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let y = tape.log_softmax_rows(id).unwrap();
        for i in 0..2 {
            let s: f64 = tape.data(y)[i * 5..(i + 1) * 5].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // Weighted sum so the gradient is not the degenerate all-rows case.
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = grad_check(
            |tape, x| {
                let ls = tape.log_softmax_rows(x)?;
                let wt = tape.constant(vec![2, 5], w.clone());
                let p = tape.mul(ls, wt)?;
                tape.sum_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "log_softmax grad err {}", err);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]);
        let g = tape.constant(vec![4], vec![1.0; 4]);
        let b = tape.constant(vec![4], vec![0.0; 4]);
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // (x − μ)/√(σ² + ε) for [1, −1]: μ=0, σ²=1 → ≈ ±1.
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, -1.0]);
        let g = tape.constant(vec![2], vec![1.0; 2]);
        let b = tape.constant(vec![2], vec![0.0; 2]);
        let y = tape.layer_norm(x, g, b).unwrap();
        let e = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((tape.data(y)[0] - e).abs() < 1e-12);
        assert!((tape.data(y)[1] + e).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradients_match() {
        let x = rand_tensor(vec![3, 6], 31);
        let gain = rand_tensor(vec![6], 32);
        let bias = rand_tensor(vec![6], 33);
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();

        // d/dx
        let err = grad_check(
            |tape, xid| {
                let g = tape.constant(vec![6], gain.data.clone());
                let b = tape.constant(vec![6], bias.data.clone());
                let y = tape.layer_norm(xid, g, b)?;
                let wt = tape.constant(vec![3, 6], w.clone());
                let p = tape.mul(y, wt)?;
                tape.sum_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm d/dx err {}", err);

        // d/dgain
        let err = grad_check(
            |tape, gid| {
                let xx = tape.constant(vec![3, 6], x.data.clone());
                let b = tape.constant(vec![6], bias.data.clone());
                let y = tape.layer_norm(xx, gid, b)?;
                let wt = tape.constant(vec![3, 6], w.clone());
                let p = tape.mul(y, wt)?;
                tape.sum_all(p)
            },
            &gain,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm d/dgain err {}", err);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_2x() {
        let mut tape = Tape::new();
        let x = Tensor::param(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = tape.leaf(&x);
        let loss = tape.sum_all(id).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(id).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = Tensor::param(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let id = tape.leaf(&x);
        let sq = tape.mul(id, id).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(id).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let id = tape.leaf(&x);
        let loss = tape.sum_all(id).unwrap();
        tape.backward(loss).unwrap();
        match tape.backward(loss) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {:?}", other),
        }
    }

    #[test]
    fn backward_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let id = tape.leaf(&x);
        match tape.backward(id) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {:?}", other),
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = rand_tensor(vec![2, 4], 41);
        let (a, b) = (0.3, -1.7);

        let grad_of = |coeff_a: f64, coeff_b: f64| -> Vec<f64> {
            let mut t = Tensor::new(x.shape.clone(), x.data.clone());
            t.requires_grad = true;
            let mut tape = Tape::new();
            let id = tape.leaf(&t);
            let sq = tape.mul(id, id).unwrap();
            let l1 = tape.sum_all(sq).unwrap();
            let e = tape.exp(id).unwrap();
            let l2 = tape.mean_all(e).unwrap();
            let l1s = tape.scale(l1, coeff_a).unwrap();
            let l2s = tape.scale(l2, coeff_b).unwrap();
            let loss = tape.add(l1s, l2s).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(id).unwrap().to_vec()
        };

        let g1 = grad_of(a, 0.0);
        let g2 = grad_of(0.0, b);
        let gc = grad_of(a, b);
        for i in 0..gc.len() {
            assert!((gc[i] - (g1[i] + g2[i])).abs() < 1e-10, "linearity at {}", i);
        }
    }

    #[test]
    fn grad_check_identity_is_tight() {
        let x = rand_tensor(vec![3], 51);
        let err = grad_check(|tape, x| tape.sum_all(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "identity err {}", err);
    }

    #[test]
    fn grad_check_log_softmax_vector() {
        let x = rand_tensor(vec![1, 4], 52);
        let w = vec![0.9, -0.3, 0.4, 0.1];
        let err = grad_check(
            |tape, x| {
                let ls = tape.log_softmax_rows(x)?;
                let wt = tape.constant(vec![1, 4], w.clone());
                let p = tape.mul(ls, wt)?;
                tape.sum_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "log_softmax grad_check err {}", err);
    }

    #[test]
    fn elementwise_and_reduction_grads_match() {
        for (seed, shape) in [(61u64, vec![2, 3]), (62, vec![4, 4]), (63, vec![1, 7])] {
            let x = rand_tensor(shape.clone(), seed);
            let err = grad_check(
                |tape, x| {
                    let g = tape.gelu(x)?;
                    let e = tape.exp(g)?;
                    let m = tape.mul(e, x)?;
                    let rs = tape.row_sum(m)?;
                    tape.mean_all(rs)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "composite grad err {} for shape {:?}", err, shape);
        }
    }

    #[test]
    fn structural_op_grads_match() {
        let x = rand_tensor(vec![4, 3], 71);
        let err = grad_check(
            |tape, x| {
                let top = tape.slice_rows(x, 0, 2)?;
                let bot = tape.slice_rows(x, 2, 2)?;
                let cat = tape.concat_rows(bot, top)?;
                let sel = tape.select_per_row(cat, &[2, 0, 1, 2])?;
                tape.sum_all(sel)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "structural grad err {}", err);
    }

    #[test]
    fn gather_rows_accumulates_repeated_ids() {
        let table = Tensor::param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let t = tape.leaf(&table);
        let g = tape.gather_rows(t, &[1, 1, 0]).unwrap();
        let loss = tape.sum_all(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_and_mean_rows_grads_match() {
        let x = rand_tensor(vec![3, 5], 81);
        let w: Vec<f64> = (0..5).map(|i| 0.2 + i as f64).collect();
        let err = grad_check(
            |tape, x| {
                let nrm = tape.normalize_rows(x)?;
                let mr = tape.mean_rows(nrm)?;
                // weight the pooled vector so every column matters differently
                let wt = tape.constant(vec![1, 5], w.clone());
                let mr2 = tape.mul(mr, wt)?;
                tape.sum_all(mr2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "normalize/mean_rows grad err {}", err);
    }

    #[test]
    fn softmax_and_scale_by_scalar_grads_match() {
        let x = rand_tensor(vec![2, 4], 91);
        let err = grad_check(
            |tape, x| {
                let s = Tensor::param(vec![], vec![1.3]);
                let sid = tape.leaf(&s);
                let xs = tape.scale_by_scalar(x, sid)?;
                let sm = tape.softmax_rows(xs)?;
                let sq = tape.mul(sm, sm)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax grad err {}", err);

        // d/ds through scale_by_scalar
        let s = Tensor::param(vec![], vec![0.7]);
        let xc = rand_tensor(vec![2, 3], 92);
        let err = grad_check(
            |tape, s| {
                let x = tape.constant(vec![2, 3], xc.data.clone());
                let xs = tape.scale_by_scalar(x, s)?;
                let e = tape.exp(xs)?;
                tape.mean_all(e)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "scale_by_scalar d/ds err {}", err);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let x = rand_tensor(vec![4, 4], 99);
            let mut t = x.clone();
            t.requires_grad = true;
            let mut tape = Tape::new();
            let id = tape.leaf(&t);
            let sm = tape.softmax_rows(id).unwrap();
            let lp = tape.log_softmax_rows(sm).unwrap();
            let loss = tape.mean_all(lp).unwrap();
            tape.backward(loss).unwrap();
            (tape.data(loss).to_vec(), tape.grad(id).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn randomized_primitive_grads_within_1e4() {
        // Every primitive with inputs in [−2, 2], per the module contract.
        for seed in 0..5u64 {
            let x = rand_tensor(vec![3, 4], 1000 + seed);
            let gain = rand_tensor(vec![4], 2000 + seed);
            let bias = rand_tensor(vec![4], 3000 + seed);
            let other = rand_tensor(vec![3, 4], 4000 + seed);
            let err = grad_check(
                |tape, x| {
                    let o = tape.constant(vec![3, 4], other.data.clone());
                    let a = tape.add(x, o)?;
                    let g = tape.constant(vec![4], gain.data.clone());
                    let b = tape.constant(vec![4], bias.data.clone());
                    let ln = tape.layer_norm(a, g, b)?;
                    let gl = tape.gelu(ln)?;
                    let sm = tape.log_softmax_rows(gl)?;
                    let pick = tape.select_per_row(sm, &[0, 2, 3])?;
                    tape.sum_all(pick)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {} composite err {}", seed, err);
        }
    }
}
