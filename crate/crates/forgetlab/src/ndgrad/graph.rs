//! Define-by-run reverse-mode tape.
//!
//! A `Graph` is rebuilt for every forward pass. Nodes own their forward
//! values; gradients are allocated lazily during backward so untouched
//! branches provably keep all-zero gradients.

use super::kernels::{self, AttnMask};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(NodeId),
    Scale {
        x: NodeId,
        c: f64,
    },
    Sum(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Vec<(f64, f64)>,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        row_start: usize,
        col_start: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        q_len: usize,
        k_len: usize,
        heads: usize,
        attn: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        pad_id: u32,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.idx()].data[0]
    }

    /// Gradient of a leaf node, or None if backward never touched it.
    /// Interior gradients are consumed during the reverse pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    fn rows_cols(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Insert a persistent tensor as a leaf; its data is copied into the tape.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Insert raw values as a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "constant shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    /// x[m×n] + bias[n] broadcast over rows — the only broadcast we support.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(x, "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let data = kernels::add_row_bias(self.value(x), self.value(bias), m, n);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![m, n], data, Op::AddRowBias { x, bias }, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b, m, k: ka, n }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = kernels::relu(self.value(x));
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c }, ng)
    }

    /// Sum of all elements, yielding a scalar node of shape [1].
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let data = kernels::softmax_axis(self.value(x), &shape, axis);
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::Softmax { x, axis }, ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (data, stats) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), m, n);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(vec![m, n], data, Op::LayerNorm { x, gain, bias, stats }, ng))
    }

    /// Gather rows of `table`[v×d] by token id, producing [ids.len()×d].
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.rows_cols(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Index(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenate 2-D parts along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat needs at least one part"));
        }
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} not supported")));
        }
        let (r0, c0) = self.rows_cols(parts[0], "concat")?;
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.rows_cols(p, "concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                data[off..off + pv.len()].copy_from_slice(pv);
                off += pv.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let (r, c) = self.rows_cols(p, "concat")?;
                let pv = self.value(p);
                for i in 0..r {
                    data[i * cols + col_off..i * cols + col_off + c]
                        .copy_from_slice(&pv[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous sub-block of a 2-D node (the split half of concat/split).
    pub fn slice(
        &mut self,
        x: NodeId,
        row_start: usize,
        row_len: usize,
        col_start: usize,
        col_len: usize,
    ) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "slice")?;
        if row_start + row_len > r || col_start + col_len > c || row_len == 0 || col_len == 0 {
            return Err(Error::contract(format!(
                "slice [{row_start}+{row_len}, {col_start}+{col_len}] out of bounds for [{r}, {c}]"
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(row_len * col_len);
        for i in 0..row_len {
            let base = (row_start + i) * c + col_start;
            data.extend_from_slice(&xv[base..base + col_len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            vec![row_len, col_len],
            data,
            Op::Slice {
                x,
                row_start,
                col_start,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention with causal / key-padding masks.
    ///
    /// q is [batch·q_len × d]; k and v are [batch·k_len × d].
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        q_len: usize,
        k_len: usize,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (qr, d) = self.rows_cols(q, "attention")?;
        let (kr, kd) = self.rows_cols(k, "attention")?;
        let (vr, vd) = self.rows_cols(v, "attention")?;
        if qr != batch * q_len || kr != batch * k_len || vr != batch * k_len || kd != d || vd != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![qr, d],
                rhs: vec![kr, kd],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {d} not divisible by {heads} heads"
            )));
        }
        if let AttnMask::KeyPadding(valid) = &mask {
            if valid.len() != batch || valid.iter().any(|&l| l == 0 || l > k_len) {
                return Err(Error::contract(format!(
                    "key padding lengths {valid:?} invalid for batch {batch} k_len {k_len}"
                )));
            }
        }
        let (out, attn) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            batch,
            q_len,
            k_len,
            d,
            heads,
            &mask,
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![batch * q_len, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                q_len,
                k_len,
                heads,
                attn,
            },
            ng,
        ))
    }

    /// Inverted dropout with a caller-supplied mask of 0.0 / (1/(1-p)) entries.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::contract(format!(
                "dropout mask length {} does not match node ({})",
                mask.len(),
                self.value(x).len()
            )));
        }
        let data = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Dropout { x, mask }, ng))
    }

    /// Mean per-token cross-entropy over non-pad targets; scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], pad_id: u32) -> Result<NodeId> {
        let (rows, vocab) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t as usize >= vocab) {
            return Err(Error::Index(format!(
                "target id {bad} out of range for vocab {vocab}"
            )));
        }
        let (loss, probs, count) = kernels::cross_entropy(self.value(logits), targets, vocab, pad_id);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            ng,
        ))
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let node = &mut self.nodes[id.idx()];
        if !node.needs_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let node = &mut self.nodes[id.idx()];
        let n = node.data.len();
        node.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Reverse pass from a scalar loss. Repeated calls accumulate additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        {
            let g = self.grad_buf(loss);
            g[0] += 1.0;
        }
        for idx in (0..=loss.idx()).rev() {
            let id = NodeId(idx as u32);
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn step_backward(&mut self, id: NodeId) {
        // The node's grad is complete at this point (reverse topological order).
        let g = self.nodes[id.idx()].grad.take().expect("grad present");
        match std::mem::replace(&mut self.nodes[id.idx()].op, Op::Leaf) {
            Op::Leaf => {
                // Leaves keep their gradient; repeated backward calls
                // accumulate into them additively.
                self.nodes[id.idx()].grad = Some(g);
            }
            op => {
                // Interior gradients are consumed once propagated, so a later
                // backward pass cannot re-propagate a stale seed.
                self.apply_backward(&op, id, &g);
                self.nodes[id.idx()].op = op;
            }
        }
    }

    fn apply_backward(&mut self, op: &Op, id: NodeId, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_grad(*a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(&gv, &av)| gv * av).collect();
                    self.add_grad(*b, &d);
                }
            }
            Op::AddRowBias { x, bias } => {
                self.add_grad(*x, g);
                if self.needs(*bias) {
                    let n = self.shape(*bias)[0];
                    let m = g.len() / n;
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(*bias, &d);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_grad_lhs_acc(g, self.value(*b), *m, *k, *n, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_grad_rhs_acc(self.value(*a), g, *m, *k, *n, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::Relu(x) => {
                // Subgradient at 0 is fixed to 0.
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &d);
            }
            Op::Scale { x, c } => {
                let d: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(*x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                self.add_grad(*x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = self.value(id).to_vec();
                let shape = self.shape(id).to_vec();
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            let p = base + a * inner;
                            dot += g[p] * y[p];
                        }
                        for a in 0..axis_len {
                            let p = base + a * inner;
                            d[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.add_grad(*x, &d);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let n = self.shape(*gain)[0];
                let m = g.len() / n;
                let xv = self.value(*x);
                let gainv = self.value(*gain);
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    let grow = &g[i * n..(i + 1) * n];
                    let xrow = &xv[i * n..(i + 1) * n];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dy = grow[j] * gainv[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let inv_n = 1.0 / n as f64;
                    let dxrow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * rstd;
                        dxrow[j] = rstd * (grow[j] * gainv[j] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*gain, &dgain);
                self.add_grad(*bias, &dbias);
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (p, &i) in ids.iter().enumerate() {
                        let dst = &mut dt[i as usize * d..(i as usize + 1) * d];
                        let src = &g[p * d..(p + 1) * d];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                    self.add_grad(*table, &dt);
                }
            }
            Op::Concat { parts, axis } => {
                let cols = self.shape(id)[1];
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            self.add_grad(p, &g[off..off + len]);
                        }
                        off += len;
                    }
                } else {
                    let mut col_off = 0;
                    for &p in parts {
                        let (r, c) = (self.shape(p)[0], self.shape(p)[1]);
                        if self.needs(p) {
                            let mut d = vec![0.0; r * c];
                            for i in 0..r {
                                d[i * c..(i + 1) * c].copy_from_slice(
                                    &g[i * cols + col_off..i * cols + col_off + c],
                                );
                            }
                            self.add_grad(p, &d);
                        }
                        col_off += c;
                    }
                }
            }
            Op::Slice {
                x,
                row_start,
                col_start,
            } => {
                let (rows, cols) = (self.shape(id)[0], self.shape(id)[1]);
                let c = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).len()];
                for i in 0..rows {
                    let base = (row_start + i) * c + col_start;
                    d[base..base + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                self.add_grad(*x, &d);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                q_len,
                k_len,
                heads,
                attn,
            } => {
                let d = self.shape(*q)[1];
                let mut dq = vec![0.0; self.value(*q).len()];
                let mut dk = vec![0.0; self.value(*k).len()];
                let mut dv = vec![0.0; self.value(*v).len()];
                kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    attn,
                    g,
                    *batch,
                    *q_len,
                    *k_len,
                    d,
                    *heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.add_grad(*v, &dv);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.add_grad(*x, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    let prow = &probs[i * vocab..(i + 1) * vocab];
                    let drow = &mut d[i * vocab..(i + 1) * vocab];
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * scale;
                    }
                    drow[t as usize] -= scale;
                }
                self.add_grad(*logits, &d);
            }
        }
    }
}
