//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the graph is acyclic by construction. Only leaves
//! created with [`Graph::leaf`] are trainable; constants never receive
//! gradient storage and the backward sweep skips any subgraph that does not
//! depend on a leaf.

use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttentionMask};
use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tensor::{matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        stats: Vec<(T, T)>,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    Transpose(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SoftCrossEntropy {
        logits: NodeId,
        targets: Tensor<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

/// A differentiation graph owned by a single training step.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.constant_shared(Arc::new(t))
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor<T>>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: t,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&mut self, t: Arc<Tensor<T>>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Constant | Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Exp(a) | Op::Gelu(a) | Op::SoftmaxRows(a) | Op::Transpose(a) => {
                vec![*a]
            }
            Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SliceRows { x, .. } | Op::NormalizeRows { x, .. } => vec![*x],
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(self.mismatch("add", a, b));
        }
        let mut v = x.clone();
        v.add_assign(y);
        self.push(Op::Add(a, b), v, "add")
    }

    /// `x + b` with the row vector `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(self.mismatch("add_row", x, b));
        }
        let c = xv.cols();
        let mut v = xv.clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e = *e + bv.data()[i % c];
        }
        self.push(Op::AddRow(x, b), v, "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let s = T::lit(s);
        let v = self.value(x).map(|e| e * s);
        self.push(Op::Scale(x, s), v, "scale")
    }

    /// Multiplies `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scale_by", x, s));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * sv);
        self.push(Op::ScaleBy(x, s), v, "scale_by")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| e.exp());
        self.push(Op::Exp(x), v, "exp")
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let (g, b) = (self.value(gain).data(), self.value(shift).data());
        let n = T::lit(c as f64);
        let eps = T::lit(eps);
        let mut stats = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &e| s + e) / n;
            let var = row.iter().fold(T::zero(), |s, &e| s + (e - mean) * (e - mean)) / n;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out)?;
        self.push(Op::LayerNorm { x, gain, shift, stats }, v, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let v = self
            .value(x)
            .map(|e| half * e * (T::one() + (c * (e + a * e * e * e)).tanh()));
        self.push(Op::Gelu(x), v, "gelu")
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum = sum + *e;
            }
            for e in row.iter_mut() {
                *e = *e / sum;
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out)?;
        self.push(Op::SoftmaxRows(x), v, "softmax_rows")
    }

    /// Multi-head masked attention; head `h` uses column block `h`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<NodeId> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, mask)?;
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            out,
            "attention",
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        self.push(Op::SliceRows { x, start }, v, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat_rows of nothing".into()));
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        self.push(Op::ConcatRows(parts.to_vec()), v, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(self.mismatch("concat_cols", parts[0], *bad));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix_unchecked(rows, total, data),
            "concat_cols",
        )
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericsError::InvalidArgument(format!(
                "gather index {bad} out of {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix_unchecked(ids.len(), t.cols(), data);
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            v,
            "gather_rows",
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose();
        self.push(Op::Transpose(x), v, "transpose")
    }

    /// Scales each row to unit L2 norm; a zero row is an error.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let n = row.iter().fold(T::zero(), |s, &e| s + e * e).sqrt();
            if n == T::zero() {
                return Err(NumericsError::ZeroNorm { op: "normalize_rows" });
            }
            norms.push(n);
            out.extend(row.iter().map(|&e| e / n));
        }
        debug_assert_eq!(out.len(), xv.rows() * c);
        let v = Tensor::from_parts(xv.shape().to_vec(), out)?;
        self.push(Op::NormalizeRows { x, norms }, v, "normalize_rows")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &e| a + e);
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.data().iter().fold(T::zero(), |a, &e| a + e) / T::lit(xv.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s), "mean")
    }

    /// Mean over rows of `-Σ_j targets[r,j] · log softmax(logits[r])_j`.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: Tensor<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() && (lv.rows(), lv.cols()) != (targets.rows(), targets.cols())
        {
            return Err(NumericsError::ShapeMismatch {
                op: "soft_cross_entropy",
                left: lv.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let c = lv.cols();
        let rows = lv.rows();
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let lse = row.iter().fold(T::zero(), |s, &e| s + (e - max).exp()).ln() + max;
            for j in 0..c {
                let logp = row[j] - lse;
                probs.push(logp.exp());
                let t = targets.get(r, j);
                if t != T::zero() {
                    loss = loss - t * logp;
                }
            }
        }
        loss = loss / T::lit(rows as f64);
        self.push(
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            Tensor::scalar(loss),
            "soft_cross_entropy",
        )
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// each of `leaves`, in the given order. Leaves the loss does not depend
    /// on receive a zero tensor.
    pub fn backward(&self, loss: NodeId, leaves: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        self.check_node(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let seed = Tensor::from_parts(lv.shape().to_vec(), vec![T::one()])?;
        self.sweep(loss, seed, leaves)
    }

    /// Backward sweep from a non-scalar output seeded with the upstream
    /// gradient `seed` (same shape as the output).
    pub fn backward_seeded(
        &self,
        output: NodeId,
        seed: &Tensor<T>,
        leaves: &[NodeId],
    ) -> Result<Vec<Tensor<T>>> {
        self.check_node(output)?;
        if self.value(output).len() != seed.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "backward_seeded",
                left: self.value(output).shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        self.sweep(output, seed.clone(), leaves)
    }

    fn check_node(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(NumericsError::UnknownNode(id.0));
        }
        Ok(())
    }

    fn sweep(&self, root: NodeId, seed: Tensor<T>, leaves: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        for &l in leaves {
            self.check_node(l)?;
            if !matches!(self.nodes[l.0].op, Op::Leaf) {
                return Err(NumericsError::NotALeaf(l.0));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(leaves
            .iter()
            .map(|l| {
                leaf_grads
                    .get(l.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*l).shape()))
            })
            .collect())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        // gradients take the shape of the value they belong to
        let g = if g.shape() == self.value(id).shape() {
            g
        } else {
            Tensor::from_parts(self.value(id).shape().to_vec(), g.into_data())
                .expect("gradient size matches value size")
        };
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_bt_acc(g.data(), bv.data(), m, n, k, &mut da);
                    self.acc(grads, *a, Tensor::matrix_unchecked(m, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_at_acc(av.data(), g.data(), m, k, n, &mut db);
                    self.acc(grads, *b, Tensor::matrix_unchecked(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d = *d + e;
                        }
                    }
                    self.acc(grads, *b, Tensor::matrix_unchecked(1, c, db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_parts(av.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_parts(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|e| e * s));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    self.acc(grads, *x, g.map(|e| e * sv));
                }
                if self.wants(*s) {
                    let ds = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .fold(T::zero(), |a, (&p, &q)| a + p * q);
                    self.acc(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                stats,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let c = xv.cols();
                let n = T::lit(c as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] = dgain[j] + gr[j] * xhat[j];
                        dshift[j] = dshift[j] + gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / n, s2 / n);
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx).unwrap());
                }
                if self.wants(*gain) {
                    self.acc(grads, *gain, Tensor::matrix_unchecked(1, c, dgain));
                }
                if self.wants(*shift) {
                    self.acc(grads, *shift, Tensor::matrix_unchecked(1, c, dshift));
                }
            }
            Op::Gelu(x) => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gr)| {
                        let t = (c * (e + a * e * e * e)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * e * e);
                        gr * (half * (T::one() + t) + half * e * dt)
                    })
                    .collect();
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), d).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let want = [self.wants(*q), self.wants(*k), self.wants(*v)];
                let [dq, dk, dv] = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    probs,
                    g,
                    want,
                );
                for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        self.acc(grads, id, d);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![T::zero(); xv.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::matrix_unchecked(xv.rows(), c, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.acc(
                            grads,
                            *p,
                            Tensor::from_parts(self.value(*p).shape().to_vec(), d).unwrap(),
                        );
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut col = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pc = pv.cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g.data()[r * total + col..r * total + col + pc]);
                        }
                        self.acc(grads, *p, Tensor::from_parts(pv.shape().to_vec(), d).unwrap());
                    }
                    col += pc;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut d = vec![T::zero(); tv.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + g.data()[r * c + j];
                    }
                }
                self.acc(grads, *table, Tensor::from_parts(tv.shape().to_vec(), d).unwrap());
            }
            Op::Transpose(x) => {
                self.acc(grads, *x, g.transpose());
            }
            Op::NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
                }
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), d).unwrap());
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), vec![gv; xv.len()]).unwrap());
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / T::lit(xv.len() as f64);
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), vec![gv; xv.len()]).unwrap());
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (rows, c) = (lv.rows(), lv.cols());
                let scale = g.data()[0] / T::lit(rows as f64);
                let mut d = Vec::with_capacity(lv.len());
                for r in 0..rows {
                    let tsum = (0..c).fold(T::zero(), |s, j| s + targets.get(r, j));
                    for j in 0..c {
                        d.push((probs[r * c + j] * tsum - targets.get(r, j)) * scale);
                    }
                }
                self.acc(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d).unwrap());
            }
        }
    }
}
