//! Reverse-mode autodiff over a recorded tape of kernel applications.
//!
//! Forward calls (`Tape::matmul`, ...) run the corresponding kernel from
//! [`crate::tensor`] immediately and append one node holding the op
//! descriptor plus the computed value. `backward` walks the nodes in reverse
//! and accumulates vector-Jacobian products; `replay_matches` re-executes the
//! whole tape and confirms every stored value bit for bit, which is the
//! determinism contract of the kernel layer.
//!
//! A tape belongs to one forward pass of one sample; it is cheap to build and
//! is dropped afterwards. Tapes are single-threaded by construction.

use crate::rope;
use crate::tensor::{self, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddRowBroadcast { x: NodeId, bias: NodeId },
    Silu { x: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, eps: f64 },
    SoftmaxRows { x: NodeId },
    CausalSoftmaxRows { x: NodeId },
    Rope1d { x: NodeId, heads: usize, positions: Vec<i64>, base: f64 },
    Rope2d { x: NodeId, heads: usize, rows: Vec<i64>, cols: Vec<i64>, base: f64 },
    GatherRows { table: NodeId, ids: Vec<usize> },
    ComposeRows { sources: Vec<NodeId>, picks: Vec<(usize, usize)> },
    SliceCols { x: NodeId, from: usize, to: usize },
    ConcatCols { parts: Vec<NodeId> },
    Reshape { x: NodeId },
    SumAll { x: NodeId },
    MaskedCrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes the loss does not
/// depend on stay `None`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the loss ignored it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul { a, b }, v))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::transpose(self.value(x))?;
        Ok(self.push(Op::Transpose { x }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = tensor::scale(self.value(x), c)?;
        Ok(self.push(Op::Scale { x, c }, v))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::add_row_broadcast(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddRowBroadcast { x, bias }, v))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::silu(self.value(x))?;
        Ok(self.push(Op::Silu { x }, v))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        let v = tensor::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(Op::RmsNorm { x, gain, eps }, v))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(Op::SoftmaxRows { x }, v))
    }

    pub fn causal_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::causal_softmax_rows(self.value(x))?;
        Ok(self.push(Op::CausalSoftmaxRows { x }, v))
    }

    pub fn rope_1d(
        &mut self,
        x: NodeId,
        heads: usize,
        positions: &[i64],
        base: f64,
    ) -> Result<NodeId, TensorError> {
        let v = rope::rope_1d(self.value(x), heads, positions, base)?;
        Ok(self.push(
            Op::Rope1d { x, heads, positions: positions.to_vec(), base },
            v,
        ))
    }

    pub fn rope_2d(
        &mut self,
        x: NodeId,
        heads: usize,
        rows: &[i64],
        cols: &[i64],
        base: f64,
    ) -> Result<NodeId, TensorError> {
        let v = rope::rope_2d(self.value(x), heads, rows, cols, base)?;
        Ok(self.push(
            Op::Rope2d { x, heads, rows: rows.to_vec(), cols: cols.to_vec(), base },
            v,
        ))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let v = tensor::gather_rows(self.value(table), ids)?;
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v))
    }

    pub fn compose_rows(
        &mut self,
        sources: &[NodeId],
        picks: &[(usize, usize)],
    ) -> Result<NodeId, TensorError> {
        let tensors: Vec<&Tensor> = sources.iter().map(|&s| self.value(s)).collect();
        let v = tensor::compose_rows(&tensors, picks)?;
        Ok(self.push(
            Op::ComposeRows { sources: sources.to_vec(), picks: picks.to_vec() },
            v,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId, TensorError> {
        let v = tensor::slice_cols(self.value(x), from, to)?;
        Ok(self.push(Op::SliceCols { x, from, to }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&tensors)?;
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = tensor::sum_all(self.value(x))?;
        Ok(self.push(Op::SumAll { x }, v))
    }

    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let v = tensor::masked_cross_entropy(self.value(logits), targets, mask)?;
        Ok(self.push(
            Op::MaskedCrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            v,
        ))
    }

    /// Reverse-mode gradients of a scalar node w.r.t. every node on the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(id, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
        match slot {
            Some(existing) => {
                let data = existing.data_mut();
                for (d, s) in data.iter_mut().zip(delta.data()) {
                    *d += s;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let bt = tensor::transpose(self.value(*b))?;
                Self::add_into(&mut grads[*a], tensor::matmul(dy, &bt)?);
                let at = tensor::transpose(self.value(*a))?;
                Self::add_into(&mut grads[*b], tensor::matmul(&at, dy)?);
            }
            Op::Transpose { x } => {
                Self::add_into(&mut grads[*x], tensor::transpose(dy)?);
            }
            Op::Add { a, b } => {
                Self::add_into(&mut grads[*a], dy.clone());
                Self::add_into(&mut grads[*b], dy.clone());
            }
            Op::Mul { a, b } => {
                Self::add_into(&mut grads[*a], tensor::mul(dy, self.value(*b))?);
                Self::add_into(&mut grads[*b], tensor::mul(dy, self.value(*a))?);
            }
            Op::Scale { x, c } => {
                Self::add_into(&mut grads[*x], tensor::scale(dy, *c)?);
            }
            Op::AddRowBroadcast { x, bias } => {
                Self::add_into(&mut grads[*x], dy.clone());
                let w = self.value(*bias).last_dim();
                let mut db = vec![0.0; w];
                for row in dy.data().chunks_exact(w) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Self::add_into(&mut grads[*bias], Tensor::new(vec![w], db)?);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let data: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| {
                        let s = tensor::sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                Self::add_into(&mut grads[*x], Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let w = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; w];
                for (r, row) in xv.data().chunks_exact(w).enumerate() {
                    let mut ms = 0.0;
                    for &v in row {
                        ms += v * v;
                    }
                    ms /= w as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let dyr = &dy.data()[r * w..(r + 1) * w];
                    // dot = Σ_j dy_j g_j x_j
                    let mut dot = 0.0;
                    for j in 0..w {
                        dot += dyr[j] * gv.data()[j] * row[j];
                    }
                    let k = inv * inv * inv / w as f64;
                    for j in 0..w {
                        dx[r * w + j] = dyr[j] * gv.data()[j] * inv - k * row[j] * dot;
                        dg[j] += dyr[j] * row[j] * inv;
                    }
                }
                Self::add_into(&mut grads[*x], Tensor::new(xv.shape().to_vec(), dx)?);
                Self::add_into(&mut grads[*gain], Tensor::new(vec![w], dg)?);
            }
            Op::SoftmaxRows { x } | Op::CausalSoftmaxRows { x } => {
                // dx = p ⊙ (dy − Σ p·dy); rows masked in forward have p = 0
                // there, so the same formula covers the causal variant.
                let p = &self.nodes[id].value;
                let w = p.last_dim();
                let mut dx = vec![0.0; p.numel()];
                for (r, prow) in p.data().chunks_exact(w).enumerate() {
                    let dyr = &dy.data()[r * w..(r + 1) * w];
                    let mut dot = 0.0;
                    for j in 0..w {
                        dot += prow[j] * dyr[j];
                    }
                    for j in 0..w {
                        dx[r * w + j] = prow[j] * (dyr[j] - dot);
                    }
                }
                Self::add_into(&mut grads[*x], Tensor::new(p.shape().to_vec(), dx)?);
            }
            Op::Rope1d { x, heads, positions, base } => {
                // Rotations are orthogonal: the adjoint is the same rotation
                // with negated positions.
                let neg: Vec<i64> = positions.iter().map(|p| -p).collect();
                Self::add_into(&mut grads[*x], rope::rope_1d(dy, *heads, &neg, *base)?);
            }
            Op::Rope2d { x, heads, rows, cols, base } => {
                let nr: Vec<i64> = rows.iter().map(|p| -p).collect();
                let nc: Vec<i64> = cols.iter().map(|p| -p).collect();
                Self::add_into(&mut grads[*x], rope::rope_2d(dy, *heads, &nr, &nc, *base)?);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let w = tv.last_dim();
                let mut dt = Tensor::zeros(tv.shape());
                for (i, &id_) in ids.iter().enumerate() {
                    let src = &dy.data()[i * w..(i + 1) * w];
                    let dst = &mut dt.data_mut()[id_ * w..(id_ + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                Self::add_into(&mut grads[*table], dt);
            }
            Op::ComposeRows { sources, picks } => {
                let w = dy.last_dim();
                let mut deltas: Vec<Tensor> = sources
                    .iter()
                    .map(|&s| Tensor::zeros(self.value(s).shape()))
                    .collect();
                for (j, &(s, r)) in picks.iter().enumerate() {
                    let src = &dy.data()[j * w..(j + 1) * w];
                    let dst = &mut deltas[s].data_mut()[r * w..(r + 1) * w];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                for (&s, delta) in sources.iter().zip(deltas) {
                    Self::add_into(&mut grads[s], delta);
                }
            }
            Op::SliceCols { x, from, to } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let w = to - from;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.rows() {
                    let src = &dy.data()[i * w..(i + 1) * w];
                    let dst = &mut dx.data_mut()[i * n + from..i * n + to];
                    dst.copy_from_slice(src);
                }
                Self::add_into(&mut grads[*x], dx);
            }
            Op::ConcatCols { parts } => {
                let total = dy.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.last_dim();
                    let mut dp = Tensor::zeros(pv.shape());
                    for i in 0..pv.rows() {
                        let src = &dy.data()[i * total + offset..i * total + offset + w];
                        dp.data_mut()[i * w..(i + 1) * w].copy_from_slice(src);
                    }
                    offset += w;
                    Self::add_into(&mut grads[p], dp);
                }
            }
            Op::Reshape { x } => {
                let back = dy.reshaped(self.value(*x).shape().to_vec())?;
                Self::add_into(&mut grads[*x], back);
            }
            Op::SumAll { x } => {
                let g = dy.item();
                Self::add_into(&mut grads[*x], Tensor::filled(self.value(*x).shape(), g));
            }
            Op::MaskedCrossEntropy { logits, targets, mask } => {
                let lv = self.value(*logits);
                let n = lv.last_dim();
                let count = mask.iter().filter(|&&b| b).count() as f64;
                let g = dy.item() / count;
                let mut dl = Tensor::zeros(lv.shape());
                for (i, row) in lv.data().chunks_exact(n).enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    let mut max = f64::NEG_INFINITY;
                    for &v in row {
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = 0.0;
                    for &v in row {
                        sum += (v - max).exp();
                    }
                    let out = &mut dl.data_mut()[i * n..(i + 1) * n];
                    for (j, &v) in row.iter().enumerate() {
                        out[j] = g * ((v - max).exp() / sum);
                    }
                    out[targets[i]] -= g;
                }
                Self::add_into(&mut grads[*logits], dl);
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf node and checks stored values bit for bit.
    pub fn replay_matches(&self) -> Result<bool, TensorError> {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::Matmul { a, b } => tensor::matmul(self.value(*a), self.value(*b))?,
                Op::Transpose { x } => tensor::transpose(self.value(*x))?,
                Op::Add { a, b } => tensor::add(self.value(*a), self.value(*b))?,
                Op::Mul { a, b } => tensor::mul(self.value(*a), self.value(*b))?,
                Op::Scale { x, c } => tensor::scale(self.value(*x), *c)?,
                Op::AddRowBroadcast { x, bias } => {
                    tensor::add_row_broadcast(self.value(*x), self.value(*bias))?
                }
                Op::Silu { x } => tensor::silu(self.value(*x))?,
                Op::RmsNorm { x, gain, eps } => {
                    tensor::rmsnorm(self.value(*x), self.value(*gain), *eps)?
                }
                Op::SoftmaxRows { x } => tensor::softmax_rows(self.value(*x))?,
                Op::CausalSoftmaxRows { x } => tensor::causal_softmax_rows(self.value(*x))?,
                Op::Rope1d { x, heads, positions, base } => {
                    rope::rope_1d(self.value(*x), *heads, positions, *base)?
                }
                Op::Rope2d { x, heads, rows, cols, base } => {
                    rope::rope_2d(self.value(*x), *heads, rows, cols, *base)?
                }
                Op::GatherRows { table, ids } => tensor::gather_rows(self.value(*table), ids)?,
                Op::ComposeRows { sources, picks } => {
                    let tensors: Vec<&Tensor> = sources.iter().map(|&s| self.value(s)).collect();
                    tensor::compose_rows(&tensors, picks)?
                }
                Op::SliceCols { x, from, to } => tensor::slice_cols(self.value(*x), *from, *to)?,
                Op::ConcatCols { parts } => {
                    let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
                    tensor::concat_cols(&tensors)?
                }
                Op::Reshape { x } => self.value(*x).reshaped(node.value.shape().to_vec())?,
                Op::SumAll { x } => tensor::sum_all(self.value(*x))?,
                Op::MaskedCrossEntropy { logits, targets, mask } => {
                    tensor::masked_cross_entropy(self.value(*logits), targets, mask)?
                }
            };
            if recomputed.data() != node.value.data() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
