//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to an arena, so
//! node ids are already a topological order: each node's inputs have
//! smaller ids. [`Graph::backward`] walks the arena in reverse once.
//!
//! Leaves may borrow parameter data (`Graph::param`) so frozen base
//! weights are never copied into the graph.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

/// Which way round the distillation divergence is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// D_KL(teacher ‖ student): the other model's distribution is the target.
    #[default]
    TeacherStudent,
    /// D_KL(student ‖ teacher).
    StudentTeacher,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        scale: f64,
    },
    KlDiv {
        student: NodeId,
        teacher: Vec<f64>,
        tau: f64,
        direction: KlDirection,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { student, .. } => vec![*student],
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread of execution.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn check_finite(op: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("NaN input to {op}")));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrowed leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn param_frozen(&mut self, t: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Owned leaf, tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    /// A constant copy of `id`'s current value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let node = &self.nodes[id.0];
        let t = Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape valid");
        self.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape valid")
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Inputs of a node; every input id is smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn matrix(&self, op: &'static str, id: NodeId, other: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dims(op, s, self.shape(other))),
        }
    }

    /// Rows × last-dim view of any tensor.
    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        let c = *s.last().expect("non-empty shape");
        (s.iter().product::<usize>() / c, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix("matmul", a, b)?;
        let (k2, n) = self.matrix("matmul", b, a)?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&mut out, self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the layout of a linear layer whose weight is `[out × in]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix("matmul_nt", a, b)?;
        let (n, k2) = self.matrix("matmul_nt", b, a)?;
        if k != k2 {
            return Err(Error::dims("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(&mut out, self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b)))
    }

    /// Adds a `[d]` row to every last-dim slice of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.rows_cols(a);
        if self.shape(row) != [c] {
            return Err(Error::dims("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a, c))
    }

    /// `a + c` elementwise; `c` carries no gradient.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddConst(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Gelu(a))
    }

    /// Per-slice normalization over the last dim, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, d) = self.rows_cols(x);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (s[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of a `[n × d]` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (n, d) = match self.shape(table) {
            [n, d] => (*n, *d),
            s => return Err(Error::dims("embedding", s, &[ids.len()])),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("embedding index {bad} out of range for {n} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup of zero ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention over `[L × d]` query/key/value rows.
    /// Row `i` attends only to rows `j ≤ i`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (l, d) = self.matrix("attention", q, k)?;
        if self.shape(k) != [l, d] || self.shape(v) != [l, d] {
            return Err(Error::dims("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    scores[j] = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                }
                let p = &mut probs[(h * l + i) * l..(h * l + i) * l + i + 1];
                kernels::softmax_into(&scores[..=i], p);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    for (oc, &vc) in o.iter_mut().zip(&vv[j * d + off..j * d + off + dh]) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        Ok(self.push(
            vec![l, d],
            Cow::Owned(out),
            Op::Attention { q, k, v, heads, probs },
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        check_finite("softmax", self.value(a))?;
        let (_, c) = self.rows_cols(a);
        let mut out = vec![0.0; self.value(a).len()];
        for (x, o) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_into(x, o);
        }
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax(a)))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        check_finite("log_softmax", self.value(a))?;
        let (_, c) = self.rows_cols(a);
        let mut out = vec![0.0; self.value(a).len()];
        for (x, o) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            kernels::log_softmax_into(x, o);
        }
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(a))
    }

    /// `-scale · Σ log softmax(logits[row])[class]` over `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)], scale: f64) -> Result<NodeId> {
        let (rows, v) = self.rows_cols(logits);
        check_finite("cross_entropy", self.value(logits))?;
        let lv = self.value(logits);
        let mut buf = vec![0.0; v];
        let mut total = 0.0;
        for &(r, c) in targets {
            if r >= rows || c >= v {
                return Err(Error::Input(format!(
                    "cross-entropy target ({r},{c}) outside logits [{rows}×{v}]"
                )));
            }
            kernels::log_softmax_into(&lv[r * v..(r + 1) * v], &mut buf);
            total -= buf[c];
        }
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![scale * total]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
            },
        ))
    }

    /// `τ² / rows · Σ_rows KL` between softened teacher and student
    /// distributions. The teacher is a constant.
    pub fn kl_div(&mut self, student: NodeId, teacher: &[f64], tau: f64, direction: KlDirection) -> Result<NodeId> {
        if teacher.len() != self.value(student).len() {
            return Err(Error::dims("kl_div", self.shape(student), &[teacher.len()]));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        check_finite("kl_div", self.value(student))?;
        check_finite("kl_div", teacher)?;
        let (rows, v) = self.rows_cols(student);
        let sv = self.value(student);
        let mut total = 0.0;
        let mut row = KlRow::new(v);
        for r in 0..rows {
            row.fill(&sv[r * v..(r + 1) * v], &teacher[r * v..(r + 1) * v], tau);
            total += row.divergence(direction);
        }
        let value = tau * tau * total / rows as f64;
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![value]),
            Op::KlDiv {
                student,
                teacher: teacher.to_vec(),
                tau,
                direction,
            },
        ))
    }

    /// Gradient of the last `backward` root with respect to `id`, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but zeros when the node was not reached.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        self.grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(id).len()])
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gout) = hi[0].as_deref() else { continue };
            self.backprop_node(i, gout, lo);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    kernels::matmul_nt_acc(self.gbuf(grads, *a), g, self.value(*b), m, n, k);
                }
                if needs(*b) {
                    kernels::matmul_tn_acc(self.gbuf(grads, *b), self.value(*a), g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if needs(*a) {
                    kernels::matmul_acc(self.gbuf(grads, *a), g, self.value(*b), m, n, k);
                }
                if needs(*b) {
                    kernels::matmul_tn_acc(self.gbuf(grads, *b), g, self.value(*a), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if needs(id) {
                        for (o, x) in self.gbuf(grads, id).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    for (o, x) in self.gbuf(grads, *a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs(*row) {
                    let rb = self.gbuf(grads, *row);
                    let c = rb.len();
                    for chunk in g.chunks(c) {
                        for (o, x) in rb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    for ((o, x), y) in self.gbuf(grads, *a).iter_mut().zip(g).zip(bv.iter()) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    for ((o, x), y) in self.gbuf(grads, *b).iter_mut().zip(g).zip(av.iter()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (o, x) in self.gbuf(grads, *a).iter_mut().zip(g) {
                    *o += c * x;
                }
            }
            Op::AddConst(a) => {
                for (o, x) in self.gbuf(grads, *a).iter_mut().zip(g) {
                    *o += x;
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                for ((o, gx), &x) in self.gbuf(grads, *a).iter_mut().zip(g).zip(xv.iter()) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    *o += gx * d;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = rstd.len().max(1);
                let d = xhat.len() / d;
                let gv = self.value(*gain);
                if needs(*gain) {
                    let gb = self.gbuf(grads, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gb[c] += gr[c] * hr[c];
                        }
                    }
                }
                if needs(*bias) {
                    let bb = self.gbuf(grads, *bias);
                    for gr in g.chunks(d) {
                        for c in 0..d {
                            bb[c] += gr[c];
                        }
                    }
                }
                if needs(*x) {
                    let xb = self.gbuf(grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dot(&dxhat, hr) / d as f64;
                        for c in 0..d {
                            xb[r * d + c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tb = self.gbuf(grads, *table);
                let d = self.shape(*table)[1];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        tb[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = node.shape[node.shape.len() - 1];
                let ab = self.gbuf(grads, *a);
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(ab.chunks_mut(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        or[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = node.shape[node.shape.len() - 1];
                let ab = self.gbuf(grads, *a);
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(ab.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        or[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::Sum(a) => {
                for o in self.gbuf(grads, *a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let ab = self.gbuf(grads, *a);
                let n = ab.len() as f64;
                for o in ab.iter_mut() {
                    *o += g[0] / n;
                }
            }
            Op::CrossEntropy { logits, targets, scale } => {
                let (_, v) = self.rows_cols(*logits);
                let lv = self.value(*logits);
                let lb = self.gbuf(grads, *logits);
                let mut p = vec![0.0; v];
                let f = g[0] * scale;
                for &(r, c) in targets {
                    kernels::softmax_into(&lv[r * v..(r + 1) * v], &mut p);
                    p[c] -= 1.0;
                    for (o, pj) in lb[r * v..(r + 1) * v].iter_mut().zip(&p) {
                        *o += f * pj;
                    }
                }
            }
            Op::KlDiv {
                student,
                teacher,
                tau,
                direction,
            } => {
                let (rows, v) = self.rows_cols(*student);
                let sv = self.value(*student);
                let sb = self.gbuf(grads, *student);
                // d/ds = τ²/rows · (1/τ) · d/dz
                let f = g[0] * tau / rows as f64;
                let mut row = KlRow::new(v);
                let mut dz = vec![0.0; v];
                for r in 0..rows {
                    row.fill(&sv[r * v..(r + 1) * v], &teacher[r * v..(r + 1) * v], *tau);
                    row.grad_wrt_student(*direction, &mut dz);
                    for (o, d) in sb[r * v..(r + 1) * v].iter_mut().zip(&dz) {
                        *o += f * d;
                    }
                }
            }
        }
    }

    fn gbuf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (l, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dp = vec![0.0; l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &probs[(h * l + i) * l..(h * l + i) * l + i + 1];
                let go = &g[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(go, vj);
                    for (o, &gc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                        *o += p[j] * gc;
                    }
                }
                let s = dot(p, &dp[..=i]);
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[j * d + off..j * d + off + dh];
                    for (o, &kc) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    for (o, &qc) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
        for (id, local) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let len = self.nodes[id.0].value.len();
            let b = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            for (o, x) in b.iter_mut().zip(local) {
                *o += x;
            }
        }
    }
}

/// Scratch buffers for one row of the softened divergence.
struct KlRow {
    ls: Vec<f64>,
    lt: Vec<f64>,
    zs: Vec<f64>,
    zt: Vec<f64>,
}

impl KlRow {
    fn new(v: usize) -> Self {
        KlRow {
            ls: vec![0.0; v],
            lt: vec![0.0; v],
            zs: vec![0.0; v],
            zt: vec![0.0; v],
        }
    }

    fn fill(&mut self, student: &[f64], teacher: &[f64], tau: f64) {
        for (z, s) in self.zs.iter_mut().zip(student) {
            *z = s / tau;
        }
        for (z, t) in self.zt.iter_mut().zip(teacher) {
            *z = t / tau;
        }
        kernels::log_softmax_into(&self.zs, &mut self.ls);
        kernels::log_softmax_into(&self.zt, &mut self.lt);
    }

    fn divergence(&self, direction: KlDirection) -> f64 {
        let (lp, lq) = match direction {
            KlDirection::TeacherStudent => (&self.lt, &self.ls),
            KlDirection::StudentTeacher => (&self.ls, &self.lt),
        };
        // Σ p·(d − 1 + e^{−d}) with d = log p − log q: equal to Σ p·d since
        // Σ q = Σ p, but every term is nonnegative, so roundoff cannot push
        // the result below zero when p ≈ q.
        lp.iter()
            .zip(lq)
            .map(|(a, b)| {
                let d = a - b;
                a.exp() * (d + (-d).exp_m1()).max(0.0)
            })
            .sum()
    }

    /// d(divergence)/d(student logits / τ).
    fn grad_wrt_student(&self, direction: KlDirection, out: &mut [f64]) {
        match direction {
            KlDirection::TeacherStudent => {
                for ((o, s), t) in out.iter_mut().zip(&self.ls).zip(&self.lt) {
                    *o = s.exp() - t.exp();
                }
            }
            KlDirection::StudentTeacher => {
                let mean: f64 = self.ls.iter().zip(&self.lt).map(|(s, t)| s.exp() * (s - t)).sum();
                for ((o, s), t) in out.iter_mut().zip(&self.ls).zip(&self.lt) {
                    *o = s.exp() * ((s - t) - mean);
                }
            }
        }
    }
}
