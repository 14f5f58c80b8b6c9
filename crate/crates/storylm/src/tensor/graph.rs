//! The recorded computation graph.
//!
//! Ops append nodes in execution order, which is already a topological order,
//! so [`Graph::backward`] is a single reverse sweep that visits each node
//! once. Leaves carry `requires_grad`; interior nodes need gradients iff any
//! parent does, and backward skips the rest.

use super::kernels;
use super::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// A dropout configuration for training-mode forward passes. With `rate` 0
/// the op is skipped entirely and no randomness is consumed.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    SoftmaxLast {
        a: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(f64, f64)>,
    },
    Gelu {
        a: usize,
    },
    Gather {
        table: usize,
        ids: Vec<u32>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    MeanRows {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        mask: Vec<bool>,
        n_counted: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of the given shape if the node did not
    /// influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// A recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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
        &self.nodes[id.0].value
    }

    /// Inserts a leaf; its `requires_grad` flag decides whether backward
    /// populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs_grad = t.requires_grad();
        self.push_unchecked(t, Op::Leaf, needs_grad)
    }

    /// Inserts a non-differentiable constant (e.g. an attention mask).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(t, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<NodeId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn require_2d(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let t = self.value(id);
        if t.ndim() != 2 {
            return Err(TensorError::BadShape {
                op,
                expected: "a 2-D tensor",
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", shape, data, Op::Add { a: a.0, b: b.0 }, needs)
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (_rows, cols) = self.require_2d("add_row", a)?;
        let tb = self.value(b);
        if tb.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let ta = self.value(a);
        let tb = self.value(b);
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(cols) {
            for (x, y) in row.iter().zip(tb.data()) {
                data.push(x + y);
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("add_row", shape, data, Op::AddRow { a: a.0, b: b.0 }, needs)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", shape, data, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    /// Multiplies by a compile-time-known scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push("scale", shape, data, Op::Scale { a: a.0, factor }, needs)
    }

    /// Matrix product of an m×k and a k×n tensor.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            vec![m, n],
            data,
            Op::Matmul { a: a.0, b: b.0 },
            needs,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_2d("transpose", a)?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        let needs = self.needs(a);
        self.push("transpose", vec![n, m], data, Op::Transpose { a: a.0 }, needs)
    }

    /// Softmax along `axis`. Supports 1-D tensors (axis 0) and 2-D tensors
    /// (axis 0 or 1); rows of zeros are impossible since rows always have at
    /// least one element.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        match (t.ndim(), axis) {
            (1, 0) | (2, 1) => self.softmax_last(a),
            (2, 0) => {
                let t1 = self.transpose(a)?;
                let s = self.softmax_last(t1)?;
                self.transpose(s)
            }
            _ => Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            }),
        }
    }

    fn softmax_last(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, cols);
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push("softmax", shape, data, Op::SoftmaxLast { a: a.0 }, needs)
    }

    /// Layer normalization over the last axis of a 2-D tensor, with learned
    /// gain and bias of matching width.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (_rows, cols) = self.require_2d("layer_norm", a)?;
        for &p in &[gain, bias] {
            if self.value(p).len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.value(a).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let x = self.value(a);
        let mut data = vec![0.0; x.len()];
        let stats = kernels::layer_norm_rows(
            x.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            cols,
            eps,
            &mut data,
        );
        let shape = x.shape().to_vec();
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
            needs,
        )
    }

    /// Exact-CDF GELU, elementwise.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push("gelu", shape, data, Op::Gelu { a: a.0 }, needs)
    }

    /// Gathers rows of a 2-D table by id: the embedding lookup.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.require_2d("gather", table)?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let needs = self.needs(table);
        self.push(
            "gather",
            vec![ids.len(), cols],
            data,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Column slice `[start, end)` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.require_2d("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: cols,
            });
        }
        let t = self.value(a);
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let needs = self.needs(a);
        self.push(
            "slice_cols",
            vec![rows, width],
            data,
            Op::SliceCols { a: a.0, start },
            needs,
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "at least one part",
                shape: vec![],
            });
        }
        let (rows, _) = self.require_2d("concat_cols", parts[0])?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.require_2d("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            vec![rows, total_cols],
            data,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
        )
    }

    /// Arithmetic mean over rows of an m×n tensor, yielding 1×n.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.require_2d("mean_rows", a)?;
        if rows == 0 {
            return Err(TensorError::BadShape {
                op: "mean_rows",
                expected: "at least one row",
                shape: self.value(a).shape().to_vec(),
            });
        }
        let t = self.value(a);
        let mut data = vec![0.0; cols];
        for row in t.data().chunks(cols) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let needs = self.needs(a);
        self.push("mean_rows", vec![1, cols], data, Op::MeanRows { a: a.0 }, needs)
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let needs = self.needs(a);
        self.push("sum", vec![1], vec![total], Op::Sum { a: a.0 }, needs)
    }

    /// Inverted-scaling dropout. Identity (and rng untouched) when rate is 0.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        if rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadShape {
                op: "dropout",
                expected: "rate in [0, 1)",
                shape: vec![],
            });
        }
        let t = self.value(a);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push("dropout", shape, data, Op::Dropout { a: a.0, mask }, needs)
    }

    /// Masked mean token-level cross entropy: for each position `t` with
    /// `mask[t]`, the negative log softmax probability of `targets[t]` under
    /// `logits` row `t`, averaged over masked positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.require_2d("cross_entropy", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let n_counted = mask.iter().filter(|&&m| m).count();
        if n_counted == 0 {
            return Err(TensorError::EmptyMask);
        }
        let t = self.value(logits);
        let mut nll = 0.0;
        for (r, (&target, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let target = target as usize;
            if target >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    size: cols,
                });
            }
            let row = &t.data()[r * cols..(r + 1) * cols];
            nll += kernels::log_sum_exp(row) - row[target];
        }
        let loss = nll / n_counted as f64;
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                n_counted,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that influences the loss; leaves that do not participate keep `None`
    /// (read them with [`Gradients::get_or_zeros`]).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape mirrors value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], parent: usize, contrib: &[f64]| {
            if !self.nodes[parent].needs_grad {
                return;
            }
            match &mut grads[parent] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => grads[parent] = Some(contrib.to_vec()),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::AddRow { a, b } => {
                acc(grads, *a, g);
                if self.nodes[*b].needs_grad {
                    let cols = self.nodes[*b].value.len();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let vb = self.nodes[*b].value.data();
                    let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let va = self.nodes[*a].value.data();
                    let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                acc(grads, *a, &da);
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[*b].value.shape()[1];
                if self.nodes[*a].needs_grad {
                    // dA = dC · Bᵀ
                    let bt = kernels::transpose(self.nodes[*b].value.data(), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = Aᵀ · dC
                    let at = kernels::transpose(self.nodes[*a].value.data(), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let s = self.nodes[idx].value.shape();
                let da = kernels::transpose(g, s[0], s[1]);
                acc(grads, *a, &da);
            }
            Op::SoftmaxLast { a } => {
                let y = self.nodes[idx].value.data();
                let cols = self.nodes[idx].value.cols();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        da[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, &da);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                stats,
            } => {
                let x = self.nodes[*a].value.data();
                let gain_v = self.nodes[*gain].value.data();
                let cols = gain_v.len();
                let rows = x.len() / cols;
                let mut da = vec![0.0; x.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gain_v[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    let inv_n = 1.0 / cols as f64;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gain_v[j];
                        da[r * cols + j] = rstd
                            * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                acc(grads, *a, &da);
                acc(grads, *gain, &dgain);
                acc(grads, *bias, &dbias);
            }
            Op::Gelu { a } => {
                let x = self.nodes[*a].value.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Gather { table, ids } => {
                if self.nodes[*table].needs_grad {
                    let cols = self.nodes[*table].value.cols();
                    let mut dt = vec![0.0; self.nodes[*table].value.len()];
                    // Sequential scatter-add: ids may repeat.
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for j in 0..cols {
                            dt[id * cols + j] += g[r * cols + j];
                        }
                    }
                    acc(grads, *table, &dt);
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let width = self.nodes[idx].value.cols();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..width {
                        da[r * cols + start + j] = g[r * width + j];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let total_cols = self.nodes[idx].value.cols();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &g[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        acc(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::MeanRows { a } => {
                let rows = self.nodes[*a].value.rows();
                let cols = self.nodes[*a].value.cols();
                let inv = 1.0 / rows as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        da[r * cols + j] = g[j] * inv;
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[*a].value.len()];
                acc(grads, *a, &da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                acc(grads, *a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                n_counted,
            } => {
                if self.nodes[*logits].needs_grad {
                    let t = self.nodes[*logits].value.data();
                    let cols = self.nodes[*logits].value.cols();
                    let scale = g[0] / *n_counted as f64;
                    let mut dl = vec![0.0; t.len()];
                    for (r, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &t[r * cols..(r + 1) * cols];
                        let lse = kernels::log_sum_exp(row);
                        for j in 0..cols {
                            let p = (row[j] - lse).exp();
                            let delta = if j == target as usize { 1.0 } else { 0.0 };
                            dl[r * cols + j] = (p - delta) * scale;
                        }
                    }
                    acc(grads, *logits, &dl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use approx::assert_abs_diff_eq;

    fn leaf_grad(g: &mut Graph, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        g.leaf(
            Tensor::new(shape, data)
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x ∘ x), x = [1,2,3]  →  grad = [2,4,6]
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0, 2.0, 3.0], vec![3]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.value(loss).item(), 14.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
        let y = leaf_grad(&mut g, vec![3.0], vec![1]);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, &[1]).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![101.0, 102.0, 103.0]));
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // Independent high-precision evaluation of e^{x_i} / Σ e^{x_j}.
        let xs: [f64; 3] = [1.0, 2.0, 3.0];
        let denom: f64 = xs.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = xs.iter().map(|v| v.exp() / denom).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs.to_vec()));
        let s = g.softmax(x, 0).unwrap();
        for (got, want) in g.value(s).data().iter().zip(&expected) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        let total: f64 = g.value(s).data().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(
            g.softmax(x, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn softmax_axis_zero_of_matrix_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 5.0, 0.0, 5.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1] + v[3], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed_by_epsilon() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let gain = g.constant(Tensor::vector(vec![1.0; 4]));
        let bias = g.constant(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let mut rng = derive_rng(3, "ln-test", 0);
        use rand::Rng;
        let xs: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let eps = 1e-5;

        // Brute-force mean/variance per row.
        let mean: f64 = xs.iter().sum::<f64>() / 6.0;
        let var: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        let expected: Vec<f64> = xs.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 6, xs.clone()).unwrap());
        let gain = g.constant(Tensor::vector(vec![1.0; 6]));
        let bias = g.constant(Tensor::vector(vec![0.0; 6]));
        let y = g.layer_norm(x, gain, bias, eps).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        let out_mean: f64 = g.value(y).data().iter().sum::<f64>() / 6.0;
        assert_abs_diff_eq!(out_mean, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_certain_prediction_has_zero_loss() {
        let mut g = Graph::new();
        // Huge margin on the target puts probability ~1 on it.
        let logits = g.constant(Tensor::matrix(1, 3, vec![500.0, 0.0, 0.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0], &[true]).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let v = 7;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, v, vec![0.3; 2 * v]).unwrap());
        let loss = g.cross_entropy(logits, &[1, 4], &[true, true]).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), (v as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        use rand::Rng;
        let mut rng = derive_rng(9, "ce-test", 0);
        let (rows, cols) = (4, 5);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0).collect();
        let targets = [3u32, 0, 2, 4];
        let mask = [true, false, true, true];

        // Scalar oracle: -log(exp(x_t) / Σ exp(x_j)) averaged over masked rows.
        let mut expected = 0.0;
        let mut n = 0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &data[r * cols..(r + 1) * cols];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[targets[r] as usize].exp() / denom;
            expected += -p.ln();
            n += 1;
        }
        expected /= n as f64;

        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let loss = g.cross_entropy(logits, &targets, &mask).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), expected, epsilon = 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(
            g.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(TensorError::EmptyMask)
        ));
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_backwards() {
        use rand::Rng;
        let mut rng = derive_rng(21, "linearity", 0);
        let data: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();

        // Combined: loss = sum(x∘x) + sum(gelu(x))
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, data.clone(), vec![6]);
        let sq = g.mul(x, x).unwrap();
        let l1 = g.sum(sq).unwrap();
        let ge = g.gelu(x).unwrap();
        let l2 = g.sum(ge).unwrap();
        let total = g.add(l1, l2).unwrap();
        let combined = g.backward(total).unwrap();

        // Separate backwards, summed.
        let mut g1 = Graph::new();
        let x1 = leaf_grad(&mut g1, data.clone(), vec![6]);
        let sq1 = g1.mul(x1, x1).unwrap();
        let l = g1.sum(sq1).unwrap();
        let ga = g1.backward(l).unwrap();

        let mut g2 = Graph::new();
        let x2 = leaf_grad(&mut g2, data.clone(), vec![6]);
        let ge2 = g2.gelu(x2).unwrap();
        let l = g2.sum(ge2).unwrap();
        let gb = g2.backward(l).unwrap();

        let lhs = combined.get(x).unwrap().data();
        for i in 0..6 {
            let rhs = ga.get(x1).unwrap().data()[i] + gb.get(x2).unwrap().data()[i];
            assert_abs_diff_eq!(lhs[i], rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308]));
        let y = g.constant(Tensor::vector(vec![1e308]));
        // Both overflow to Inf and must surface as errors.
        assert!(matches!(
            g.scale(x, 10.0),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            g.add(x, y),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_consumes_no_randomness() {
        use rand::Rng;
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let mut rng = derive_rng(5, "dropout", 0);
        let before: u64 = rng.clone().random();
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        let after: u64 = rng.random();
        assert_eq!(before, after);
    }

    #[test]
    fn dropout_applies_inverted_scaling() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0; 1000]));
        let mut rng = derive_rng(5, "dropout", 1);
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        let kept: Vec<f64> = g
            .value(y)
            .data()
            .iter()
            .cloned()
            .filter(|v| *v != 0.0)
            .collect();
        for v in &kept {
            assert_abs_diff_eq!(*v, 1.0 / 0.75, epsilon = 1e-12);
        }
        // Roughly three quarters kept.
        assert!(kept.len() > 650 && kept.len() < 850, "kept {}", kept.len());
    }
}
