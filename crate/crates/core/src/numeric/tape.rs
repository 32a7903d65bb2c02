//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node; node ids are handed out in creation order, which is therefore a
//! topological order. [`Tape::backward`] walks the tape once in reverse.
//!
//! Leaves come in two flavours: [`Tape::var`] nodes are differentiated,
//! [`Tape::constant`] nodes are not. A node requires a gradient iff one of its
//! inputs does, so a forward pass with constant weights and a handful of
//! [`Tape::watch`]ed intermediates only pays for the backward work it needs.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddRow(NodeId, NodeId),
    SumN(Vec<NodeId>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<S>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Index {
        x: NodeId,
        flat: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a traced computation. Single-use: build, then call
/// [`Tape::backward`] as many times as needed.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Tape::backward`]: `∂loss/∂node` for every differentiated node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node, or `None` when the node does not require grad.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a node; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Row-wise softmax in place; when `causal`, row `i` only covers columns `0..=i`.
fn softmax_rows<S: Scalar>(data: &mut [S], rows: usize, cols: usize, causal: bool) {
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let live = if causal { (i + 1).min(cols) } else { cols };
        let max = row[..live].iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for v in row[..live].iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row[..live].iter_mut() {
            *v /= total;
        }
        for v in row[live..].iter_mut() {
            *v = S::zero();
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, contribution: Vec<S>) {
    match slot {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn mat(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Differentiable leaf.
    pub fn var(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Marks an already recorded node as differentiated. Must be called
    /// before the node is consumed by later operations.
    pub fn watch(&mut self, id: NodeId) {
        self.nodes[id.0].requires_grad = true;
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `x[i, :] + row` for every row of the matrix `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        if self.shape(row) != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let rs = self.value(row).data();
        let mut out = xs.to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(rs) {
                *o += r;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, row), rg))
    }

    /// Sum of equally shaped tensors, accumulated left to right.
    pub fn sum_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("sum_n of an empty list".into()))?;
        for &p in &parts[1..] {
            self.same_shape("sum_n", first, p)?;
        }
        let mut acc = self.value(first).to_vec();
        for &p in &parts[1..] {
            for (a, &b) in acc.iter_mut().zip(self.value(p).data()) {
                *a += b;
            }
        }
        let shape = self.shape(first).to_vec();
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, acc), Op::SumN(parts.to_vec()), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            1,
            k,
            S::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` attends to columns `0..=i` only; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        let mut out = self.value(x).to_vec();
        softmax_rows(&mut out, m, n, causal);
        let rg = self.rg(&[x]);
        // Masked rows are handled identically in backward: y = 0 there.
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(x), rg))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = S::from_usize(n).unwrap();
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-row RMS normalisation with learned gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: S) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        if self.shape(gain) != [n] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: vec![m, n],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let nf = S::from_usize(n).unwrap();
        let mut inv_rms = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / nf;
            let ir = S::one() / (ms + eps).sqrt();
            inv_rms[i] = ir;
            for j in 0..n {
                out[i * n + j] = row[j] * ir * g[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Gathers rows `ids` of `table: [vocab, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.mat(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        if start > end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let (m, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.mat(p)?;
            if mp != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Single entry of a matrix as a rank-0 tensor.
    pub fn index2(&mut self, x: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let (m, n) = self.mat(x)?;
        if i >= m || j >= n {
            return Err(Error::Input(format!(
                "index ({i}, {j}) out of bounds for [{m}, {n}]"
            )));
        }
        let flat = i * n + j;
        let v = Tensor::scalar(self.value(x).data()[flat]);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Index { x, flat }, rg))
    }

    /// Mean next-token cross-entropy of `logits: [n, vocab]` against one
    /// target id per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.mat(logits)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target {bad} out of range for {n} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        softmax_rows(&mut probs, m, n, false);
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            // log p computed from the shifted logits for stability
            let row = &self.value(logits).data()[i * n..(i + 1) * n];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            loss += lse - row[t];
        }
        loss /= S::from_usize(m.max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n_nodes).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(self.nodes.iter())
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let c = g.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[a.0], c);
                }
                if needs(*b) {
                    let c = g.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if needs(*row) {
                    let n = self.nodes[row.0].value.len();
                    let mut c = vec![S::zero(); n];
                    for chunk in g.chunks(n) {
                        for (acc, &v) in c.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads[row.0], c);
                }
            }
            Op::SumN(parts) => {
                for p in parts {
                    if needs(*p) {
                        accumulate(&mut grads[p.0], g.to_vec());
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let mut c = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g, n, 1, val(*b), 1, n, S::zero(), &mut c);
                    accumulate(&mut grads[a.0], c);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let mut c = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), val(*a), 1, k, g, n, 1, S::zero(), &mut c);
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (n, _) = self.nodes[b.0].value.dims2().unwrap();
                if needs(*a) {
                    // dA = dC · B
                    let mut c = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g, n, 1, val(*b), k, 1, S::zero(), &mut c);
                    accumulate(&mut grads[a.0], c);
                }
                if needs(*b) {
                    // dB = dCᵀ · A
                    let mut c = vec![S::zero(); n * k];
                    S::gemm(n, m, k, S::one(), g, 1, n, val(*a), k, 1, S::zero(), &mut c);
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut c = vec![S::zero(); y.len()];
                    for ((yr, gr), cr) in y.chunks(n).zip(g.chunks(n)).zip(c.chunks_mut(n)) {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in cr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gv = val(*gain);
                if needs(*x) {
                    let nf = S::from_usize(n).unwrap();
                    let mut c = vec![S::zero(); g.len()];
                    for (i, is) in inv_std.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            c[i * n + j] = *is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads[x.0], c);
                }
                if needs(*gain) {
                    let mut c = vec![S::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            c[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[gain.0], c);
                }
                if needs(*bias) {
                    let mut c = vec![S::zero(); n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            c[j] += gr[j];
                        }
                    }
                    accumulate(&mut grads[bias.0], c);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = *node.value.shape().last().unwrap();
                let gv = val(*gain);
                let xv = val(*x);
                if needs(*x) {
                    let nf = S::from_usize(n).unwrap();
                    let mut c = vec![S::zero(); g.len()];
                    for (i, &ir) in inv_rms.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xv[i * n..(i + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += gr[j] * gv[j] * xr[j];
                        }
                        let coef = ir * ir * ir * dot / nf;
                        for j in 0..n {
                            c[i * n + j] = ir * gr[j] * gv[j] - coef * xr[j];
                        }
                    }
                    accumulate(&mut grads[x.0], c);
                }
                if needs(*gain) {
                    let mut c = vec![S::zero(); n];
                    for (i, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..n {
                            c[j] += g[i * n + j] * xv[i * n + j] * ir;
                        }
                    }
                    accumulate(&mut grads[gain.0], c);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let c = g.iter().zip(val(*x)).map(|(&g, &v)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let c = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let (v, d) = self.nodes[table.0].value.dims2().unwrap();
                    let mut c = vec![S::zero(); v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            c[id * d + j] += g[row * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], c);
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                    let w = *node.value.shape().last().unwrap();
                    let mut c = vec![S::zero(); m * n];
                    for i in 0..m {
                        c[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                    let mut c = vec![S::zero(); m * n];
                    c[start * n..start * n + g.len()].copy_from_slice(g);
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if needs(*p) {
                        let mut c = Vec::with_capacity(m * w);
                        for i in 0..m {
                            c.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], c);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
            }
            Op::Index { x, flat } => {
                if needs(*x) {
                    let mut c = vec![S::zero(); self.nodes[x.0].value.len()];
                    c[*flat] = g[0];
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let n = self.nodes[logits.0].value.shape()[1];
                    let scale = g[0] / S::from_usize(targets.len().max(1)).unwrap();
                    let mut c: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        c[i * n + t] -= scale;
                    }
                    accumulate(&mut grads[logits.0], c);
                }
            }
        }
    }
}
