//! Reverse-mode automatic differentiation over a record-and-replay tape.
//!
//! Every primitive applied through [`Graph`] is appended to an ordered node
//! list; node inputs always precede the node, so walking the list backward
//! visits each node exactly once in reverse topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Value replaced into masked positions before the attention softmax.
/// exp(x - rowmax) underflows to exactly 0.0 for any realistic row max, so
/// masked positions carry zero weight and zero gradient.
const MASKED_LOGIT: f64 = -1.0e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a fixed mask (dropout).
    MulMask(NodeId, Vec<f64>),
    MatMul(NodeId, NodeId),
    /// a @ b^T without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Replace entries above the diagonal with MASKED_LOGIT.
    CausalMask(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Broadcast add of a width-n vector to every row of an [m, n] tensor.
    AddRow(NodeId, NodeId),
    /// Gather rows of `table` at `ids`.
    EmbedLookup { table: NodeId, ids: Vec<u32> },
    SliceCols { x: NodeId, start: usize, width: usize },
    ConcatCols(Vec<NodeId>),
    /// Summed label-smoothed cross-entropy over kept positions -> scalar.
    CrossEntropy { logits: NodeId, targets: Vec<u32>, keep: Vec<bool>, smoothing: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations, sufficient to replay gradients
/// in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input tensor. Gradients are produced for it iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidShape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::InvalidShape(format!(
                "mask length {} vs tensor numel {}",
                mask.len(),
                ta.numel()
            )));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulMask(a, mask)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                data[i * n + j] = MASKED_LOGIT;
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::CausalMask(a)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::InvalidShape(format!(
                "row add: width {} vs {}",
                self.value(row).numel(),
                n
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v_rows, width) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= v_rows {
                return Err(Error::Index(format!(
                    "embedding id {id} out of range for table with {v_rows} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let v = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push(v, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + width > n {
            return Err(Error::InvalidShape(format!(
                "column slice {start}..{} out of width {n}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&self.value(x).row(i)[start..start + width]);
        }
        let v = Tensor::new(vec![m, width], data)?;
        Ok(self.push(v, Op::SliceCols { x, start, width }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat of zero parts".into()));
        }
        let m = self.value(parts[0]).rows()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::InvalidShape("concat: row counts differ".into()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Summed label-smoothed cross-entropy over kept positions. Pair with
    /// [`Graph::scale`] to take the per-token mean.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        keep: &[bool],
        smoothing: f64,
    ) -> Result<NodeId> {
        let (sum, _count) =
            tensor::cross_entropy_sum(self.value(logits), targets, keep, smoothing)?;
        Ok(self.push(
            Tensor::scalar(sum),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                smoothing,
            },
        ))
    }

    /// Replay the tape backward from a scalar loss node. Returns gradients
    /// for every leaf whose tensor has `requires_grad`; leaves the loss does
    /// not reach get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for collection below
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::MulMask(a, mask) => {
                    let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::MatMul(a, b) => {
                    let gt = Tensor::new(self.nodes[idx].value.shape().to_vec(), g.clone())?;
                    let da = tensor::matmul_nt(&gt, self.value(*b))?;
                    let db = tensor::matmul_tn(self.value(*a), &gt)?;
                    self.accumulate(&mut grads, *a, da.data());
                    self.accumulate(&mut grads, *b, db.data());
                }
                Op::MatMulNT(a, b) => {
                    let gt = Tensor::new(self.nodes[idx].value.shape().to_vec(), g.clone())?;
                    let da = tensor::matmul(&gt, self.value(*b))?;
                    let db = tensor::matmul_tn(&gt, self.value(*a))?;
                    self.accumulate(&mut grads, *a, da.data());
                    self.accumulate(&mut grads, *b, db.data());
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[idx].value;
                    let (m, n) = p.dims2()?;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let prow = p.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, gy)| p * gy).sum();
                        for j in 0..n {
                            da[i * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::CausalMask(a) => {
                    let (m, n) = self.nodes[idx].value.dims2()?;
                    let mut da = g.clone();
                    for i in 0..m {
                        for j in (i + 1)..n {
                            da[i * n + j] = 0.0;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dgain, dbias) =
                        self.layer_norm_backward(*x, *gain, &g)?;
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gain, &dgain);
                    self.accumulate(&mut grads, *bias, &dbias);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, *a, &g);
                    let (m, n) = self.nodes[idx].value.dims2()?;
                    let mut drow = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            drow[j] += g[i * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *row, &drow);
                }
                Op::EmbedLookup { table, ids } => {
                    let (v_rows, width) = self.value(*table).dims2()?;
                    let mut dt = vec![0.0; v_rows * width];
                    for (pos, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * width..(id as usize + 1) * width];
                        let src = &g[pos * width..(pos + 1) * width];
                        for j in 0..width {
                            dst[j] += src[j];
                        }
                    }
                    self.accumulate(&mut grads, *table, &dt);
                }
                Op::SliceCols { x, start, width } => {
                    let (m, n) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..*width {
                            dx[i * n + start + j] = g[i * width + j];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let m = self.nodes[idx].value.rows()?;
                    let total = self.nodes[idx].value.cols()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols()?;
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(&mut grads, p, &dp);
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, targets, keep, smoothing } => {
                    let dz = tensor::cross_entropy_grad(
                        self.value(*logits),
                        targets,
                        keep,
                        *smoothing,
                    );
                    let da: Vec<f64> = dz.data().iter().map(|x| x * g[0]).collect();
                    self.accumulate(&mut grads, *logits, &da);
                }
            }
        }

        let mut out = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(idx, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { by_node: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]) {
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        g: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (m, n) = xt.dims2()?;
        let gv = self.value(gain).data();
        let mut dx = vec![0.0; m * n];
        let mut dgain = vec![0.0; n];
        let mut dbias = vec![0.0; n];
        for i in 0..m {
            let row = xt.row(i);
            let grow = &g[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
            // xhat, d = g ∘ dy, then dx = inv * (d - mean(d) - xhat * mean(d ∘ xhat))
            let mut d_mean = 0.0;
            let mut dxhat_dot = 0.0;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let d = gv[j] * grow[j];
                d_mean += d;
                dxhat_dot += d * xhat;
                dgain[j] += grow[j] * xhat;
                dbias[j] += grow[j];
            }
            d_mean /= n as f64;
            dxhat_dot /= n as f64;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let d = gv[j] * grow[j];
                dx[i * n + j] = inv * (d - d_mean - xhat * dxhat_dot);
            }
        }
        Ok((dx, dgain, dbias))
    }
}

/// Gradients keyed by the leaf node they belong to.
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id.0)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node.remove(&id.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}
