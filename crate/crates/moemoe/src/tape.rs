//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Each forward pass records nodes into a [`Tape`]; node ids are handles into
//! it. [`Tape::backward`] seeds a scalar loss with gradient one, sweeps the
//! tape in reverse, and accumulates gradients into every node that needs
//! them. Leaves created from [`Parameter`]s remember the parameter name so
//! gradients can be written back after the sweep.
//!
//! Repeated `backward` calls accumulate: each call propagates through a
//! per-call scratch buffer and then adds the result into the persistent
//! per-node gradients.

use std::collections::HashMap;

use crate::tensor::{Parameter, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Additive logit mask; exp(x + MASK_OFF) underflows to exactly zero.
pub const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    ScaleRows { x: NodeId, scales: NodeId },
    ScaleByScalar { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad_id: usize },
    Sum { x: NodeId },
    Sqrt { x: NodeId },
    Abs { x: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Transpose { x: NodeId },
    TileRows { x: NodeId },
    Reshape { x: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn item(&self, id: NodeId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.data.len(), 1, "item() on shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let (shape, data) = t.into_parts();
        self.push(shape, data, false, Op::Leaf)
    }

    /// Leaf honoring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        let (shape, data) = t.into_parts();
        self.push(shape, data, needs, Op::Leaf)
    }

    /// Leaf backed by a named parameter; trainable parameters get gradients.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        let id = self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            p.trainable,
            Op::Leaf,
        );
        self.nodes[id.0].param = Some(p.name.clone());
        id
    }

    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, p) = self.shape2(a, "matmul")?;
        let (p2, n) = self.shape2(b, "matmul")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, p, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::MatMul { a, b }))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, needs, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    /// `[r, c] + [c]` broadcast along rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.node(x).data.clone();
        let b = &self.node(bias).data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![r, c], data, needs, Op::AddBias { x, bias }))
    }

    /// Multiply row `i` of `[r, c]` by `scales[i]`.
    pub fn scale_rows(&mut self, x: NodeId, scales: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "scale_rows")?;
        if self.shape(scales) != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(scales).to_vec(),
            });
        }
        let s = self.node(scales).data.clone();
        let mut data = self.node(x).data.clone();
        for i in 0..r {
            for v in &mut data[i * c..(i + 1) * c] {
                *v *= s[i];
            }
        }
        let needs = self.needs(x) || self.needs(scales);
        Ok(self.push(vec![r, c], data, needs, Op::ScaleRows { x, scales }))
    }

    /// Multiply every element by a one-element node.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.node(s).data.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by_scalar",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.node(s).data[0];
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::ScaleByScalar { x, s }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Relu { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let lanes = lane_layout(&shape, axis);
        let src = &self.node(x).data;
        let mut data = vec![0.0; src.len()];
        for (outer, inner) in lanes.iter_lanes() {
            let mut max = f64::NEG_INFINITY;
            for a in 0..lanes.axis_len {
                max = max.max(src[lanes.index(outer, a, inner)]);
            }
            let mut z = 0.0;
            for a in 0..lanes.axis_len {
                let idx = lanes.index(outer, a, inner);
                let e = (src[idx] - max).exp();
                data[idx] = e;
                z += e;
            }
            for a in 0..lanes.axis_len {
                data[lanes.index(outer, a, inner)] /= z;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, data, needs, Op::Softmax { x, axis }))
    }

    /// Per-row standardization over the last axis followed by a learned gain.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::EmptyInput("layer_norm"))?;
        if self.shape(gain) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let src = &self.node(x).data;
        let g = &self.node(gain).data;
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::LayerNorm { x, gain }))
    }

    /// Mean negative log-likelihood over non-pad target positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<NodeId> {
        let (t, v) = self.shape2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        for &tid in targets {
            if tid != pad_id && tid >= v {
                return Err(TensorError::TargetOutOfVocab { id: tid, vocab: v });
            }
        }
        let n_live = targets.iter().filter(|&&tid| tid != pad_id).count();
        if n_live == 0 {
            return Err(TensorError::AllPositionsPadded);
        }
        let src = &self.node(logits).data;
        let mut total = 0.0;
        for (row, &tid) in targets.iter().enumerate() {
            if tid == pad_id {
                continue;
            }
            let r = &src[row * v..(row + 1) * v];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|&x| (x - max).exp()).sum();
            total -= r[tid] - max - z.ln();
        }
        let loss = total / n_live as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
            },
        ))
    }

    /// Full reduction to a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.node(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], needs, Op::Sum { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.sqrt()).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Sqrt { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.abs()).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Abs { x })
    }

    /// Row lookup into a `[vocab, d]` table; duplicate ids accumulate grads.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.shape2(table, "gather_rows")?;
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TokenOutOfVocab { id, vocab });
            }
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            needs,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let data = self.node(x).data[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![len, c], data, needs, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = &self.node(x).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, len], data, needs, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_rows"));
        }
        let (_, c) = self.shape2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.shape2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.node(p).data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, c],
            data,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_cols"));
        }
        let (r, _) = self.shape2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.node(p).data;
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![r, total],
            data,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(x, "transpose")?;
        let data = transpose_raw(&self.node(x).data, r, c);
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], data, needs, Op::Transpose { x }))
    }

    /// Repeat the row sequence of `[k', d]` until exactly `k` rows:
    /// output row `i` is source row `i mod k'`.
    pub fn tile_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (kp, d) = self.shape2(x, "tile_rows")?;
        if k == 0 {
            return Err(TensorError::EmptyInput("tile_rows"));
        }
        let src = &self.node(x).data;
        let mut data = Vec::with_capacity(k * d);
        for i in 0..k {
            let s = i % kp;
            data.extend_from_slice(&src[s * d..(s + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![k, d], data, needs, Op::TileRows { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != self.node(x).data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let data = self.node(x).data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, data, needs, Op::Reshape { x }))
    }

    /// Arithmetic mean of one-element nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("mean_scalars"));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Reverse sweep from a scalar loss. Gradients add onto any previously
    /// accumulated node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.node(loss).needs_grad {
            scratch[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = scratch[i].take() else { continue };
            self.propagate(i, &g, &mut scratch);
            let node = &mut self.nodes[i];
            let dst = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += s;
            }
        }
        Ok(())
    }

    fn accumulate(&self, scratch: &mut [Option<Vec<f64>>], id: NodeId, add: impl Fn(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let buf = scratch[id.0].get_or_insert_with(|| vec![0.0; self.node(id).data.len()]);
        add(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, p) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let bt = transpose_raw(&self.node(b).data, p, n);
                    let da = matmul_raw(g, &bt, m, n, p);
                    self.accumulate(scratch, a, |buf| {
                        for (d, s) in buf.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if self.needs(b) {
                    let at = transpose_raw(&self.node(a).data, m, p);
                    let db = matmul_raw(&at, g, p, m, n);
                    self.accumulate(scratch, b, |buf| {
                        for (d, s) in buf.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(scratch, a, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accumulate(scratch, b, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(scratch, a, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accumulate(scratch, b, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.node(a).data;
                let bv = &self.node(b).data;
                self.accumulate(scratch, a, |buf| {
                    for ((d, s), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                self.accumulate(scratch, b, |buf| {
                    for ((d, s), &x) in buf.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Div { a, b } => {
                let av = &self.node(a).data;
                let bv = &self.node(b).data;
                self.accumulate(scratch, a, |buf| {
                    for ((d, s), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += s / y;
                    }
                });
                self.accumulate(scratch, b, |buf| {
                    for (j, (d, s)) in buf.iter_mut().zip(g).enumerate() {
                        *d -= s * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(bias)[0];
                self.accumulate(scratch, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accumulate(scratch, bias, |buf| {
                    for (j, &s) in g.iter().enumerate() {
                        buf[j % c] += s;
                    }
                });
            }
            Op::ScaleRows { x, scales } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let s = &self.node(scales).data;
                let xv = &self.node(x).data;
                self.accumulate(scratch, x, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[i * c + j] * s[i];
                        }
                    }
                });
                self.accumulate(scratch, scales, |buf| {
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * xv[i * c + j];
                        }
                        buf[i] += acc;
                    }
                });
            }
            Op::ScaleByScalar { x, s } => {
                let sv = self.node(s).data[0];
                let xv = &self.node(x).data;
                self.accumulate(scratch, x, |buf| {
                    for (d, gs) in buf.iter_mut().zip(g) {
                        *d += gs * sv;
                    }
                });
                self.accumulate(scratch, s, |buf| {
                    buf[0] += g.iter().zip(xv).map(|(gs, xv)| gs * xv).sum::<f64>();
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(scratch, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::AddScalar { x } => {
                self.accumulate(scratch, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &self.node(x).data;
                self.accumulate(scratch, x, |buf| {
                    for (j, (d, s)) in buf.iter_mut().zip(g).enumerate() {
                        if xv[j] > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let out = &self.nodes[i].data;
                let lanes = lane_layout(&self.nodes[i].shape, axis);
                self.accumulate(scratch, x, |buf| {
                    for (outer, inner) in lanes.iter_lanes() {
                        let mut dot = 0.0;
                        for a in 0..lanes.axis_len {
                            let idx = lanes.index(outer, a, inner);
                            dot += g[idx] * out[idx];
                        }
                        for a in 0..lanes.axis_len {
                            let idx = lanes.index(outer, a, inner);
                            buf[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain } => {
                let d = self.shape(gain)[0];
                let xv = &self.node(x).data;
                let gv = &self.node(gain).data;
                let rows = xv.len() / d;
                // Recompute the per-row statistics from the stored input.
                let mut xhat = vec![0.0; xv.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = inv;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv;
                    }
                }
                self.accumulate(scratch, x, |buf| {
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            buf[r * d + j] += inv_std[r]
                                * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                });
                self.accumulate(scratch, gain, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
            } => {
                let v = self.shape(logits)[1];
                let lv = &self.node(logits).data;
                let n_live = targets.iter().filter(|&&t| t != pad_id).count() as f64;
                let gs = g[0];
                self.accumulate(scratch, logits, |buf| {
                    for (row, &tid) in targets.iter().enumerate() {
                        if tid == pad_id {
                            continue;
                        }
                        let r = &lv[row * v..(row + 1) * v];
                        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = r.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (r[j] - max).exp() / z;
                            let onehot = if j == tid { 1.0 } else { 0.0 };
                            buf[row * v + j] += gs * (p - onehot) / n_live;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gs = g[0];
                self.accumulate(scratch, x, |buf| {
                    for d in buf.iter_mut() {
                        *d += gs;
                    }
                });
            }
            Op::Sqrt { x } => {
                let out = &self.nodes[i].data;
                self.accumulate(scratch, x, |buf| {
                    for (j, (d, s)) in buf.iter_mut().zip(g).enumerate() {
                        *d += s / (2.0 * out[j]);
                    }
                });
            }
            Op::Abs { x } => {
                let xv = &self.node(x).data;
                self.accumulate(scratch, x, |buf| {
                    for (j, (d, s)) in buf.iter_mut().zip(g).enumerate() {
                        let sign = if xv[j] > 0.0 {
                            1.0
                        } else if xv[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += s * sign;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(table)[1];
                self.accumulate(scratch, table, |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(x)[1];
                let len = self.nodes[i].shape[0];
                self.accumulate(scratch, x, |buf| {
                    buf[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let len = self.nodes[i].shape[1];
                self.accumulate(scratch, x, |buf| {
                    for row in 0..r {
                        for j in 0..len {
                            buf[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let c = self.nodes[i].shape[1];
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(p)[0];
                    let seg = &g[offset * c..(offset + rows) * c];
                    self.accumulate(scratch, p, |buf| {
                        for (d, s) in buf.iter_mut().zip(seg) {
                            *d += s;
                        }
                    });
                    offset += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(scratch, p, |buf| {
                        for row in 0..r {
                            for j in 0..w {
                                buf[row * w + j] += g[row * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let gt = transpose_raw(g, r, c);
                self.accumulate(scratch, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(&gt) {
                        *d += s;
                    }
                });
            }
            Op::TileRows { x } => {
                let (kp, d) = (self.shape(x)[0], self.shape(x)[1]);
                let k = self.nodes[i].shape[0];
                self.accumulate(scratch, x, |buf| {
                    for row in 0..k {
                        let s = row % kp;
                        for j in 0..d {
                            buf[s * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(scratch, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
        }
    }

    /// Merge gradients of all parameter-backed leaves, keyed by name.
    pub fn collect_param_grads(&self) -> HashMap<String, Vec<f64>> {
        let mut out: HashMap<String, Vec<f64>> = HashMap::new();
        for node in &self.nodes {
            let (Some(name), Some(grad)) = (&node.param, &node.grad) else {
                continue;
            };
            match out.get_mut(name) {
                Some(buf) => {
                    for (d, s) in buf.iter_mut().zip(grad) {
                        *d += s;
                    }
                }
                None => {
                    out.insert(name.clone(), grad.clone());
                }
            }
        }
        out
    }
}

struct LaneLayout {
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl LaneLayout {
    fn index(&self, outer: usize, axis: usize, inner: usize) -> usize {
        (outer * self.axis_len + axis) * self.inner + inner
    }

    fn iter_lanes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let inner = self.inner;
        (0..self.outer).flat_map(move |o| (0..inner).map(move |i| (o, i)))
    }
}

fn lane_layout(shape: &[usize], axis: usize) -> LaneLayout {
    LaneLayout {
        outer: shape[..axis].iter().product(),
        axis_len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}
