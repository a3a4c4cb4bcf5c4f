//! Dynamically recorded computation graph with reverse-mode backward.

use super::{Parameter, Scalar, Tensor};
use std::collections::HashMap;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Reduction applied to the per-channel top-k values of a pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Max over the top-k values; equal to a global max for any k.
    Max,
    /// Mean over the top-k values.
    MeanOfTopK,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    PickPerRow {
        x: NodeId,
        idx: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    TopKPool {
        x: NodeId,
        mode: PoolMode,
        /// Selected row index per (channel, rank), row-major `[f][kk]`.
        picked: Vec<usize>,
    },
    GroupMeanRows {
        x: NodeId,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
}

struct Node<F: Scalar> {
    op: Op,
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Vec<F>,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_ids: HashMap<String, NodeId>,
    ran_backward: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_ids: HashMap::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<F>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<F>) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape, values, false)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Intern a parameter as a gradient-bearing leaf. Repeated calls with the
    /// same parameter name return the same node, so shared weights accumulate
    /// one gradient.
    pub fn param(&mut self, p: &Parameter<F>) -> NodeId {
        if let Some(&id) = self.param_ids.get(&p.name) {
            return id;
        }
        let id = self.push(
            Op::Leaf,
            p.tensor.shape.clone(),
            p.tensor.values.clone(),
            true,
        );
        self.param_ids.insert(p.name.clone(), id);
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        assert_eq!(self.nodes[id.0].values.len(), 1, "scalar_value on non-scalar");
        self.nodes[id.0].values[0]
    }

    /// Gradient of a node; `None` before `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        if self.ran_backward {
            Some(&self.nodes[id.0].grad)
        } else {
            None
        }
    }

    /// Gradient of an interned parameter, by name.
    pub fn param_grad(&self, name: &str) -> Option<&[F]> {
        let id = *self.param_ids.get(name)?;
        self.grad(id)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.param_ids.contains_key(name)
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("rank-{} tensor where matrix expected", s.len()),
        }
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(
            k, k2,
            "matmul shape mismatch: [{m}x{k}] x [{k2}x{n}] (inner dims must agree)"
        );
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), vec![n, m], out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "add shape mismatch: {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add(a, b), shape, out, rg)
    }

    /// Add a rank-1 bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_m, n) = self.rows_cols(a);
        assert_eq!(
            self.nodes[bias.0].shape,
            vec![n],
            "add_row: bias shape {:?} does not match row width {}",
            self.nodes[bias.0].shape,
            n
        );
        let bv = &self.nodes[bias.0].values;
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::AddRow(a, bias), shape, out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "sub shape mismatch: {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| *x - *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sub(a, b), shape, out, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "mul shape mismatch: {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul(a, b), shape, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let fc = F::from_f64(c);
        let out: Vec<F> = self.nodes[a.0].values.iter().map(|x| *x * fc).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(a, c), shape, out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| {
                // Stable in both tails.
                if *x >= F::zero() {
                    F::one() / (F::one() + (-*x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            })
            .collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sigmoid(a), shape, out, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Tanh(a), shape, out, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| x.maximum(F::zero()))
            .collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Relu(a), shape, out, rg)
    }

    /// Softmax along `axis` (0 or the last axis). Each slice is stabilized by
    /// max subtraction before exponentiation.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let rank = self.nodes[a.0].shape.len();
        let last = rank - 1;
        if axis == last || rank == 1 {
            return self.softmax_rows(a);
        }
        assert_eq!(axis, 0, "softmax axis {axis} out of range for rank {rank}");
        let t = self.transpose(a);
        let s = self.softmax_rows(t);
        self.transpose(s)
    }

    fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(a);
        assert!(n > 0, "softmax over empty axis");
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            softmax_row(row, o);
        }
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Softmax(a), shape, out, rg)
    }

    /// Row-wise log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(a);
        assert!(n > 0, "log_softmax over empty axis");
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mut mx = row[0];
            for v in row {
                mx = mx.maximum(*v);
            }
            let lse: F = row.iter().map(|v| (*v - mx).exp()).sum::<F>().ln() + mx;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = *v - lse;
            }
        }
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::LogSoftmax(a), shape, out, rg)
    }

    /// Per-row standardization followed by the affine map `x̂·gain + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (m, n) = self.rows_cols(x);
        assert!(n >= 1 && eps > 0.0, "layer_norm needs d >= 1 and eps > 0");
        assert_eq!(self.nodes[gain.0].shape, vec![n], "layer_norm gain shape");
        assert_eq!(self.nodes[bias.0].shape, vec![n], "layer_norm bias shape");
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let inv_n = F::from_f64(1.0 / n as f64);
        let feps = F::from_f64(eps);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_n;
            let inv_std = F::one() / (var + feps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::LayerNorm { x, gain, bias, eps }, shape, out, rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (v, d) = self.rows_cols(table);
        assert!(!ids.is_empty(), "embed with empty id sequence");
        let tv = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "embed id {id} out of vocabulary range {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = self.rows_cols(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.rows_cols(p);
            assert_eq!(n, n2, "concat_rows width mismatch: {n} vs {n2}");
            rows += m;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, n], out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = self.rows_cols(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (m2, n) = self.rows_cols(*p);
                assert_eq!(m, m2, "concat_cols row-count mismatch: {m} vs {m2}");
                n
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                let pv = &self.nodes[p.0].values;
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], out, rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.rows_cols(x);
        assert!(
            start + len <= m && len > 0,
            "slice_rows [{start}, {}) out of {m} rows",
            start + len
        );
        let out = self.nodes[x.0].values[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        self.push(Op::SliceRows { x, start }, vec![len, n], out, rg)
    }

    /// `out[i] = x[i, idx[i]]`, producing a rank-1 tensor.
    pub fn pick_per_row(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = self.rows_cols(x);
        assert_eq!(idx.len(), m, "pick_per_row needs one index per row");
        let xv = &self.nodes[x.0].values;
        let out: Vec<F> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "pick_per_row index {j} out of row width {n}");
                xv[i * n + j]
            })
            .collect();
        let rg = self.rg(x);
        self.push(
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            vec![m],
            out,
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: F = self.nodes[a.0].values.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], vec![total], rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].values.len();
        assert!(n > 0, "mean of empty tensor");
        let total: F = self.nodes[a.0].values.iter().copied().sum();
        let rg = self.rg(a);
        self.push(
            Op::Mean(a),
            vec![1],
            vec![total * F::from_f64(1.0 / n as f64)],
            rg,
        )
    }

    /// Per channel, select the k largest values over rows and reduce them by
    /// `mode`. When there are fewer than k rows, all rows are used. Ties are
    /// broken toward the lower row index.
    pub fn topk_pool(&mut self, x: NodeId, k: usize, mode: PoolMode) -> NodeId {
        let (m, n) = self.rows_cols(x);
        assert!(m > 0, "topk_pool over zero rows");
        assert!(k >= 1, "topk_pool needs k >= 1");
        let kk = k.min(m);
        let xv = &self.nodes[x.0].values;
        let mut picked = Vec::with_capacity(n * kk);
        let mut out = vec![F::zero(); n];
        let mut order: Vec<usize> = Vec::with_capacity(m);
        for j in 0..n {
            order.clear();
            order.extend(0..m);
            // Descending by value, ascending by row index on ties.
            order.sort_by(|&a, &b| {
                let va = xv[a * n + j];
                let vb = xv[b * n + j];
                vb.partial_cmp(&va)
                    .expect("non-finite value in topk_pool")
                    .then(a.cmp(&b))
            });
            let top = &order[..kk];
            out[j] = match mode {
                PoolMode::Max => xv[top[0] * n + j],
                PoolMode::MeanOfTopK => {
                    top.iter().map(|&r| xv[r * n + j]).sum::<F>()
                        * F::from_f64(1.0 / kk as f64)
                }
            };
            picked.extend_from_slice(top);
        }
        let rg = self.rg(x);
        self.push(Op::TopKPool { x, mode, picked }, vec![1, n], out, rg)
    }

    /// Mean-pool row groups: `groups[i]` gives the output row of input row
    /// `i`; group ids must start at 0, be non-decreasing and contiguous.
    pub fn group_mean_rows(&mut self, x: NodeId, groups: &[usize]) -> NodeId {
        let (m, n) = self.rows_cols(x);
        assert_eq!(groups.len(), m, "group_mean_rows needs one group per row");
        let w = groups.last().map(|g| g + 1).unwrap_or(0);
        let mut counts = vec![0usize; w];
        let mut prev = 0usize;
        for (i, &g) in groups.iter().enumerate() {
            assert!(
                g == prev || (g == prev + 1) || (i == 0 && g == 0),
                "group ids must be contiguous and non-decreasing, got {g} after {prev}"
            );
            prev = g;
            counts[g] += 1;
        }
        assert!(counts.iter().all(|c| *c > 0), "empty group in alignment");
        let xv = &self.nodes[x.0].values;
        let mut out = vec![F::zero(); w * n];
        for (i, &g) in groups.iter().enumerate() {
            for j in 0..n {
                out[g * n + j] += xv[i * n + j];
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let inv = F::from_f64(1.0 / c as f64);
            for j in 0..n {
                out[g * n + j] *= inv;
            }
        }
        let rg = self.rg(x);
        self.push(
            Op::GroupMeanRows {
                x,
                groups: groups.to_vec(),
                counts,
            },
            vec![w, n],
            out,
            rg,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node, seeding its gradient with `seed`.
    ///
    /// Panics if `loss` is not a single-element tensor.
    pub fn backward(&mut self, loss: NodeId, seed: F) {
        assert_eq!(
            self.nodes[loss.0].values.len(),
            1,
            "backward requires a scalar output, got shape {:?}",
            self.nodes[loss.0].shape
        );
        for node in &mut self.nodes {
            node.grad = vec![F::zero(); node.values.len()];
        }
        self.nodes[loss.0].grad[0] = seed;
        self.ran_backward = true;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Inputs always precede their consumers, so split at i.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            if g.iter().all(|v| *v == F::zero()) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = rows_cols_of(&before[a.0]);
                    let n = node.shape[1];
                    // dA += g · Bᵀ ; dB += Aᵀ · g
                    {
                        let bv = two_muts(before, a.0, b.0);
                        let (anode, bnode) = bv;
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                let grow = &g[i2 * n..(i2 + 1) * n];
                                let brow = &bnode.values[p * n..(p + 1) * n];
                                for (gj, bj) in grow.iter().zip(brow) {
                                    s += *gj * *bj;
                                }
                                anode.grad[i2 * k + p] += s;
                            }
                        }
                        for p in 0..k {
                            for i2 in 0..m {
                                let aip = anode.values[i2 * k + p];
                                if aip == F::zero() {
                                    continue;
                                }
                                let grow = &g[i2 * n..(i2 + 1) * n];
                                let brow = &mut bnode.grad[p * n..(p + 1) * n];
                                for (bj, gj) in brow.iter_mut().zip(grow) {
                                    *bj += aip * *gj;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let ag = &mut before[a.0].grad;
                    for i2 in 0..n {
                        for j in 0..m {
                            ag[j * n + i2] += g[i2 * m + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (dst, s) in before[a.0].grad.iter_mut().zip(g) {
                        *dst += *s;
                    }
                    for (dst, s) in before[b.0].grad.iter_mut().zip(g) {
                        *dst += *s;
                    }
                }
                Op::AddRow(a, bias) => {
                    let n = *node.shape.last().unwrap();
                    for (dst, s) in before[a.0].grad.iter_mut().zip(g) {
                        *dst += *s;
                    }
                    let bg = &mut before[bias.0].grad;
                    for (i2, s) in g.iter().enumerate() {
                        bg[i2 % n] += *s;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for (dst, s) in before[a.0].grad.iter_mut().zip(g) {
                        *dst += *s;
                    }
                    for (dst, s) in before[b.0].grad.iter_mut().zip(g) {
                        *dst -= *s;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if a == b {
                        let an = &mut before[a.0];
                        for i2 in 0..g.len() {
                            an.grad[i2] += g[i2] * an.values[i2] * F::from_f64(2.0);
                        }
                    } else {
                        let (anode, bnode) = two_muts(before, a.0, b.0);
                        for i2 in 0..g.len() {
                            anode.grad[i2] += g[i2] * bnode.values[i2];
                            bnode.grad[i2] += g[i2] * anode.values[i2];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let fc = F::from_f64(*c);
                    for (dst, s) in before[a.0].grad.iter_mut().zip(g) {
                        *dst += *s * fc;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.values;
                    let ag = &mut before[a.0].grad;
                    for i2 in 0..g.len() {
                        ag[i2] += g[i2] * y[i2] * (F::one() - y[i2]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.values;
                    let ag = &mut before[a.0].grad;
                    for i2 in 0..g.len() {
                        ag[i2] += g[i2] * (F::one() - y[i2] * y[i2]);
                    }
                }
                Op::Relu(a) => {
                    let an = &mut before[a.0];
                    for i2 in 0..g.len() {
                        if an.values[i2] > F::zero() {
                            an.grad[i2] += g[i2];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (m, n) = rows_cols_of(node);
                    let y = &node.values;
                    let ag = &mut before[a.0].grad;
                    for i2 in 0..m {
                        let yr = &y[i2 * n..(i2 + 1) * n];
                        let gr = &g[i2 * n..(i2 + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(a2, b2)| *a2 * *b2).sum();
                        let dst = &mut ag[i2 * n..(i2 + 1) * n];
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (m, n) = rows_cols_of(node);
                    let y = &node.values;
                    let ag = &mut before[a.0].grad;
                    for i2 in 0..m {
                        let yr = &y[i2 * n..(i2 + 1) * n];
                        let gr = &g[i2 * n..(i2 + 1) * n];
                        let gsum: F = gr.iter().copied().sum();
                        let dst = &mut ag[i2 * n..(i2 + 1) * n];
                        for j in 0..n {
                            dst[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let (m, n) = rows_cols_of(node);
                    let inv_n = F::from_f64(1.0 / n as f64);
                    let feps = F::from_f64(eps);
                    // Recompute per-row statistics from the input.
                    let xv = before[x.0].values.clone();
                    let gv = before[gain.0].values.clone();
                    for i2 in 0..m {
                        let row = &xv[i2 * n..(i2 + 1) * n];
                        let gr = &g[i2 * n..(i2 + 1) * n];
                        let mean = row.iter().copied().sum::<F>() * inv_n;
                        let var =
                            row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_n;
                        let inv_std = F::one() / (var + feps).sqrt();
                        let xhat: Vec<F> = row.iter().map(|v| (*v - mean) * inv_std).collect();
                        {
                            let dgain = &mut before[gain.0].grad;
                            for j in 0..n {
                                dgain[j] += gr[j] * xhat[j];
                            }
                        }
                        {
                            let dbias = &mut before[bias.0].grad;
                            for j in 0..n {
                                dbias[j] += gr[j];
                            }
                        }
                        let dxhat: Vec<F> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a2, b2)| *a2 * *b2)
                            .sum::<F>()
                            * inv_n;
                        let dx = &mut before[x.0].grad;
                        for j in 0..n {
                            dx[i2 * n + j] +=
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let d = node.shape[1];
                    let tg = &mut before[table.0].grad;
                    for (i2, &id) in ids.iter().enumerate() {
                        let dst = &mut tg[id as usize * d..(id as usize + 1) * d];
                        let src = &g[i2 * d..(i2 + 1) * d];
                        for (dj, sj) in dst.iter_mut().zip(src) {
                            *dj += *sj;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let rows = rows_cols_of(&before[p.0]).0;
                        let src = &g[offset * n..(offset + rows) * n];
                        for (dst, s) in before[p.0].grad.iter_mut().zip(src) {
                            *dst += *s;
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = rows_cols_of(&before[p.0]).1;
                        let pg = &mut before[p.0].grad;
                        for i2 in 0..m {
                            let src = &g[i2 * total + offset..i2 * total + offset + w];
                            let dst = &mut pg[i2 * w..(i2 + 1) * w];
                            for (dj, sj) in dst.iter_mut().zip(src) {
                                *dj += *sj;
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.shape[1];
                    let xg = &mut before[x.0].grad;
                    let dst = &mut xg[start * n..start * n + g.len()];
                    for (dj, sj) in dst.iter_mut().zip(g) {
                        *dj += *sj;
                    }
                }
                Op::PickPerRow { x, idx } => {
                    let n = rows_cols_of(&before[x.0]).1;
                    let xg = &mut before[x.0].grad;
                    for (i2, &j) in idx.iter().enumerate() {
                        xg[i2 * n + j] += g[i2];
                    }
                }
                Op::Sum(a) => {
                    for dst in before[a.0].grad.iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::Mean(a) => {
                    let s = g[0] * F::from_f64(1.0 / before[a.0].values.len() as f64);
                    for dst in before[a.0].grad.iter_mut() {
                        *dst += s;
                    }
                }
                Op::TopKPool { x, mode, picked } => {
                    let n = node.shape[1];
                    let kk = picked.len() / n;
                    let xg = &mut before[x.0].grad;
                    for j in 0..n {
                        match mode {
                            PoolMode::Max => {
                                xg[picked[j * kk] * n + j] += g[j];
                            }
                            PoolMode::MeanOfTopK => {
                                let s = g[j] * F::from_f64(1.0 / kk as f64);
                                for &r in &picked[j * kk..(j + 1) * kk] {
                                    xg[r * n + j] += s;
                                }
                            }
                        }
                    }
                }
                Op::GroupMeanRows { x, groups, counts } => {
                    let n = node.shape[1];
                    let xg = &mut before[x.0].grad;
                    for (i2, &grp) in groups.iter().enumerate() {
                        let s = F::from_f64(1.0 / counts[grp] as f64);
                        for j in 0..n {
                            xg[i2 * n + j] += g[grp * n + j] * s;
                        }
                    }
                }
            }
        }
    }
}

fn rows_cols_of<F: Scalar>(node: &Node<F>) -> (usize, usize) {
    match node.shape.len() {
        1 => (1, node.shape[0]),
        2 => (node.shape[0], node.shape[1]),
        _ => panic!("rank-{} tensor where matrix expected", node.shape.len()),
    }
}

/// Two distinct mutable references into the prefix slice.
fn two_muts<F: Scalar>(
    nodes: &mut [Node<F>],
    a: usize,
    b: usize,
) -> (&mut Node<F>, &mut Node<F>) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn matmul_into<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut mx = row[0];
    for v in row {
        mx = mx.maximum(*v);
    }
    let mut total = F::zero();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (*v - mx).exp();
        total += *o;
    }
    let inv = F::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
