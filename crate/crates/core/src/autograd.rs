//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Parameters live in a [`ParamSet`]; a graph copies the
//! parameter values it touches and reports their gradients keyed by the owning
//! set's label, so a frozen set that was only fed in through
//! [`Graph::constant`] never shows up in [`Grads`].

use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{self, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    owner: String,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(owner: impl Into<String>) -> Self {
        Self { owner: owner.into(), names: Vec::new(), values: Vec::new() }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value by its nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Rows of one packed sequence pair inside an attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Packing layout for [`Graph::attention`]: sequences are stacked row-wise
/// and each segment only attends within itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention over sequences of the given lengths.
    pub fn self_attention(lengths: &[usize], heads: usize, causal: bool) -> Self {
        Self::cross_attention(lengths, lengths, heads, causal)
    }

    pub fn cross_attention(q_lengths: &[usize], k_lengths: &[usize], heads: usize, causal: bool) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len());
        let mut segments = Vec::with_capacity(q_lengths.len());
        let (mut q, mut k) = (0, 0);
        for (&ql, &kl) in q_lengths.iter().zip(k_lengths) {
            segments.push(AttnSegment { q_start: q, q_len: ql, k_start: k, k_len: kl });
            q += ql;
            k += kl;
        }
        Self { segments, heads, causal }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, inv_norm: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    WeightedSum { weights: Var, inputs: Vec<Var> },
    CrossEntropy { logits: Var, probs: Tensor, targets: Rc<Tensor>, row_weights: Vec<f64>, denom: f64 },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, probs: Vec<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of every parameter that took part in a graph.
#[derive(Debug, Default)]
pub struct Grads {
    by_param: HashMap<(String, usize), Tensor>,
}

impl Grads {
    pub fn get(&self, set: &ParamSet, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&(set.owner.clone(), id.0))
    }

    /// Number of gradient tensors reported for parameters of `owner`.
    pub fn count_for_owner(&self, owner: &str) -> usize {
        self.by_param.keys().filter(|(o, _)| o == owner).count()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Gradient tensors for every parameter in `set`, zeros where absent.
    pub fn dense_for(&self, set: &ParamSet) -> Vec<Tensor> {
        set.ids()
            .map(|id| {
                self.get(set, id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(set.get(id).rows(), set.get(id).cols()))
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(String, usize), Var>,
    param_of: HashMap<usize, (String, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf backed by `set[id]`; repeated calls share one node.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.owner.clone(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node { value: set.get(id).clone(), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key.clone(), v);
        self.param_of.insert(v.0, key);
        v
    }

    /// Owners of every parameter leaf in this graph.
    pub fn param_owners(&self) -> Vec<String> {
        let mut owners: Vec<String> = self.params.keys().map(|(o, _)| o.clone()).collect();
        owners.sort();
        owners.dedup();
        owners
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(value, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    /// Each row divided by `sqrt(‖row‖² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut inv_norm = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let k = 1.0 / (xv.row(r).iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
            inv_norm.push(k);
        }
        self.push(value, Op::NormalizeRows { x, inv_norm }, &[x])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = tensor::softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with a `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gg + bb;
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).gather_rows(ids);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&vals)
        };
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&vals)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    /// `Σ_j weights[0, j] · inputs[j]`, all inputs sharing one shape.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Var {
        let w = self.value(weights);
        assert_eq!(w.rows(), 1, "weights must be a single row");
        assert_eq!(w.cols(), inputs.len(), "one weight per input");
        let first = self.value(inputs[0]);
        let mut value = Tensor::zeros(first.rows(), first.cols());
        for (j, &inp) in inputs.iter().enumerate() {
            let wj = w.get(0, j);
            for (o, x) in value.data_mut().iter_mut().zip(self.value(inp).data()) {
                *o += wj * x;
            }
        }
        let mut all = inputs.to_vec();
        all.push(weights);
        self.push(value, Op::WeightedSum { weights, inputs: inputs.to_vec() }, &all)
    }

    /// `Σ_r w_r · (−Σ_c t_rc · log softmax(logits)_rc) / denom` as a 1x1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Tensor>, row_weights: Vec<f64>, denom: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "targets must match logits");
        assert_eq!(row_weights.len(), lv.rows(), "one weight per row");
        let logp = tensor::log_softmax_rows(lv);
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row: f64 = logp.row(r).iter().zip(targets.row(r)).map(|(lp, t)| if *t == 0.0 { 0.0 } else { -t * lp }).sum();
            loss += row_weights[r] * row;
        }
        let probs = logp.map(f64::exp);
        self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy { logits, probs, targets, row_weights, denom },
            &[logits],
        )
    }

    /// Packed multi-head scaled dot-product attention. `q`, `k`, `v` hold the
    /// already projected rows; heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols();
        assert_eq!(kv.cols(), dim);
        assert_eq!(vv.cols(), dim);
        assert_eq!(dim % layout.heads, 0, "width not divisible by heads");
        let dk = dim / layout.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), dim);
        let mut probs = Vec::with_capacity(layout.segments.len() * layout.heads);
        for seg in &layout.segments {
            let offset = seg.k_len as isize - seg.q_len as isize;
            for h in 0..layout.heads {
                let c0 = h * dk;
                let mut p = vec![0.0; seg.q_len * seg.k_len];
                for i in 0..seg.q_len {
                    let qi = &qv.row(seg.q_start + i)[c0..c0 + dk];
                    let limit = if layout.causal { ((i as isize + offset + 1).max(0) as usize).min(seg.k_len) } else { seg.k_len };
                    let prow = &mut p[i * seg.k_len..(i + 1) * seg.k_len];
                    for j in 0..seg.k_len {
                        prow[j] = if j < limit {
                            let kj = &kv.row(seg.k_start + j)[c0..c0 + dk];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    tensor::softmax_in_place(prow);
                    let orow = &mut out.row_mut(seg.q_start + i)[c0..c0 + dk];
                    for (j, &pij) in prow.iter().enumerate() {
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(seg.k_start + j)[c0..c0 + dk];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Reverse pass from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Grads::default();
        for (node, key) in &self.param_of {
            if let Some(g) = grads[*node].take() {
                out.by_param.insert(key.clone(), g);
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                self.acc_with(grads, a, |t| tensor::matmul_nt_acc(g, bv, t));
                self.acc_with(grads, b, |t| tensor::matmul_tn_acc(av, g, t));
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                self.acc_with(grads, a, |t| tensor::matmul_acc(g, bv, t));
                self.acc_with(grads, b, |t| tensor::matmul_tn_acc(g, av, t));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    self.acc(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    self.acc(grads, b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *row, |t| {
                    for r in 0..g.rows() {
                        for (o, x) in t.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gg| if x > 0.0 { gg } else { 0.0 });
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::NormalizeRows { x, inv_norm } => {
                let y = &self.nodes[idx].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, yy), gg) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = inv_norm[r] * (gg - yy * dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[idx].value;
                let mut ga = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = p.row(r).iter().zip(g.row(r)).map(|(x, y)| x * y).sum();
                    for ((o, pp), gg) in ga.row_mut(r).iter_mut().zip(p.row(r)).zip(g.row(r)) {
                        *o = pp * (gg - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let cols = xhat.cols();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(xhat.rows(), cols);
                    for r in 0..xhat.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let n = cols as f64;
                        for ((o, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv_std[r] / n * (n * d - sum - xh * dot);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                self.acc_with(grads, *gain, |t| {
                    for r in 0..g.rows() {
                        for ((o, gg), xh) in t.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gg * xh;
                        }
                    }
                });
                self.acc_with(grads, *bias, |t| {
                    for r in 0..g.rows() {
                        for (o, gg) in t.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                self.acc_with(grads, *table, |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, gg) in t.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        self.acc(grads, p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.acc_with(grads, *a, |t| {
                    for r in 0..g.rows() {
                        let dst = &mut t.row_mut(r)[start..start + g.cols()];
                        for (o, gg) in dst.iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        self.acc(grads, p, g.slice_rows(start, start + h));
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start;
                self.acc_with(grads, *a, |t| {
                    for r in 0..g.rows() {
                        for (o, gg) in t.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::WeightedSum { weights, inputs } => {
                let w = self.value(*weights);
                for (j, &inp) in inputs.iter().enumerate() {
                    if self.needs(inp) {
                        let wj = w.get(0, j);
                        self.acc(grads, inp, g.map(|x| x * wj));
                    }
                }
                if self.needs(*weights) {
                    let gw: Vec<f64> = inputs
                        .iter()
                        .map(|&inp| self.value(inp).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *weights, Tensor::row_vector(gw));
                }
            }
            Op::CrossEntropy { logits, probs, targets, row_weights, denom } => {
                let scale = g.item() / denom;
                let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let mass: f64 = targets.row(r).iter().sum();
                    let k = row_weights[r] * scale;
                    for ((o, p), t) in gl.row_mut(r).iter_mut().zip(probs.row(r)).zip(targets.row(r)) {
                        *o = k * (p * mass - t);
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[Vec<f64>],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols();
        let dk = dim / layout.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), dim);
        let mut gk = Tensor::zeros(kv.rows(), dim);
        let mut gv = Tensor::zeros(vv.rows(), dim);
        let mut p_iter = probs.iter();
        for seg in &layout.segments {
            for h in 0..layout.heads {
                let p = p_iter.next().expect("attention probabilities");
                let c0 = h * dk;
                for i in 0..seg.q_len {
                    let gi = &g.row(seg.q_start + i)[c0..c0 + dk];
                    let prow = &p[i * seg.k_len..(i + 1) * seg.k_len];
                    // dP_ij = gO_i · V_j ; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                    let mut dp = vec![0.0; seg.k_len];
                    for (j, d) in dp.iter_mut().enumerate() {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(seg.k_start + j)[c0..c0 + dk];
                        *d = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    let qi: Vec<f64> = qv.row(seg.q_start + i)[c0..c0 + dk].to_vec();
                    for j in 0..seg.k_len {
                        let pij = prow[j];
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        {
                            let gvj = &mut gv.row_mut(seg.k_start + j)[c0..c0 + dk];
                            for (o, x) in gvj.iter_mut().zip(gi) {
                                *o += pij * x;
                            }
                        }
                        {
                            let kj = &kv.row(seg.k_start + j)[c0..c0 + dk];
                            let gqi = &mut gq.row_mut(seg.q_start + i)[c0..c0 + dk];
                            for (o, x) in gqi.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                        }
                        let gkj = &mut gk.row_mut(seg.k_start + j)[c0..c0 + dk];
                        for (o, x) in gkj.iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

/// Largest relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares `∂f/∂set` from the tape against central finite differences.
///
/// `f` builds a fresh graph over `set` and returns it along with the scalar
/// loss node. Relative error per coordinate is
/// `|a − n| / max(|a| + |n|, floor)`.
pub fn gradcheck<F>(set: &mut ParamSet, eps: f64, floor: f64, f: F) -> GradCheck
where
    F: Fn(&ParamSet) -> (Graph, Var),
{
    let analytic = {
        let (g, loss) = f(set);
        g.backward(loss).dense_for(set)
    };
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<ParamId> = set.ids().collect();
    for id in ids {
        for i in 0..set.get(id).len() {
            let orig = set.get(id).data()[i];
            set.get_mut(id).data_mut()[i] = orig + eps;
            let plus = {
                let (g, l) = f(set);
                g.value(l).item()
            };
            set.get_mut(id).data_mut()[i] = orig - eps;
            let minus = {
                let (g, l) = f(set);
                g.value(l).item()
            };
            set.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.0].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheck { max_rel_err, checked }
}
