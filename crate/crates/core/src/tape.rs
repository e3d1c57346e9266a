//! Minimal reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Tape`] is a flat arena of nodes built in topological order; calling
//! [`Tape::backward`] on a scalar root walks the arena once in reverse.
//! The op set is exactly what the diffusion transformer and its losses
//! need — nothing speculative. Multi-head attention is a single fused op
//! so the hot path stays compact; its backward is covered by the
//! finite-difference suites.
//!
//! Gradient flow is controlled per leaf: parameter leaves are created with
//! `requires_grad = true`, data and schedule constants with `false`, and
//! [`Tape::detach`] cuts a path (used to stop the VLB loss from training
//! the mean prediction).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Matrix};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = A * B^T, A `[m, k]`, B `[n, k]`.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Broadcast add: row `q` of `y` is added to rows `q*g..(q+1)*g` of `x`.
    AddRows { x: NodeId, y: NodeId },
    /// Broadcast multiply with the same grouping as `AddRows`.
    MulRows { x: NodeId, y: NodeId },
    AddScalar { x: NodeId, c: f64 },
    MulScalar { x: NodeId, c: f64 },
    /// Per-row normalization to zero mean / unit variance (no affine).
    LayerNorm { x: NodeId },
    /// Fused multi-head self-attention over per-group sequences.
    /// Input is the already-scaled qkv activation `[groups*seq, 3*dim]`.
    Attention { qkv: NodeId, heads: usize, seq: usize },
    GatherRows { table: NodeId, indices: Vec<usize> },
    Silu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    /// Mean over every element, result `[1, 1]`.
    MeanAll { x: NodeId },
    ColSlice { x: NodeId, start: usize, len: usize },
    ColConcat { parts: Vec<NodeId> },
    /// Prepend the shared rows `p` to every group of `x` (`x.rows = g*seq`).
    PrependRows { p: NodeId, x: NodeId, seq: usize },
    /// Keep the last `take` rows of every `group`-sized chunk.
    TakeLastRows { x: NodeId, group: usize, take: usize },
    Detach { x: NodeId },
}

struct Node {
    op: Op,
    value: Matrix,
    /// Saved forward context (layer-norm rstd, attention probabilities).
    aux: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Matrix, aux: Vec<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, aux, requires_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data[0]
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.clone();
        self.push(Op::Detach { x }, value, Vec::new(), false)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(am.cols, bm.cols, "matmul_nt inner dims");
        let mut out = Matrix::zeros(am.rows, bm.rows);
        matmul_nt_acc(&mut out.data, &am.data, &bm.data, am.rows, am.cols, bm.rows);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNT { a, b }, out, Vec::new(), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(am.same_shape(bm), "add shapes");
        let data = am.data.iter().zip(bm.data.iter()).map(|(x, y)| x + y).collect();
        let out = Matrix::from_vec(am.rows, am.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, out, Vec::new(), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(am.same_shape(bm), "sub shapes");
        let data = am.data.iter().zip(bm.data.iter()).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(am.rows, am.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub { a, b }, out, Vec::new(), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(am.same_shape(bm), "mul shapes");
        let data = am.data.iter().zip(bm.data.iter()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(am.rows, am.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul { a, b }, out, Vec::new(), rg)
    }

    fn group_of(x: &Matrix, y: &Matrix) -> usize {
        assert_eq!(x.cols, y.cols, "broadcast cols");
        assert!(y.rows > 0 && x.rows % y.rows == 0, "broadcast rows");
        x.rows / y.rows
    }

    pub fn add_rows(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xm, ym) = (&self.nodes[x].value, &self.nodes[y].value);
        let group = Self::group_of(xm, ym);
        let mut out = xm.clone();
        for r in 0..out.rows {
            let yrow = ym.row_slice(r / group);
            let orow = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (o, v) in orow.iter_mut().zip(yrow.iter()) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(Op::AddRows { x, y }, out, Vec::new(), rg)
    }

    pub fn mul_rows(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xm, ym) = (&self.nodes[x].value, &self.nodes[y].value);
        let group = Self::group_of(xm, ym);
        let mut out = xm.clone();
        for r in 0..out.rows {
            let yrow = ym.row_slice(r / group);
            let orow = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (o, v) in orow.iter_mut().zip(yrow.iter()) {
                *o *= v;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(Op::MulRows { x, y }, out, Vec::new(), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x].value.map(|v| v + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar { x, c }, out, Vec::new(), rg)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x].value.map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::MulScalar { x, c }, out, Vec::new(), rg)
    }

    /// Zero-mean unit-variance per row; affine terms are separate ops.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xm = &self.nodes[x].value;
        let (rows, cols) = (xm.rows, xm.cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut aux = vec![0.0; rows]; // per-row rstd
        for r in 0..rows {
            let row = xm.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / math::sqrt(var + LN_EPS);
            aux[r] = rstd;
            let orow = &mut out.data[r * cols..(r + 1) * cols];
            for (o, v) in orow.iter_mut().zip(row.iter()) {
                *o = (v - mean) * rstd;
            }
        }
        let rg = self.rg(x);
        self.push(Op::LayerNorm { x }, out, aux, rg)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(math::silu);
        let rg = self.rg(x);
        self.push(Op::Silu { x }, out, Vec::new(), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(math::gelu);
        let rg = self.rg(x);
        self.push(Op::Gelu { x }, out, Vec::new(), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(math::sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x }, out, Vec::new(), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(math::exp);
        let rg = self.rg(x);
        self.push(Op::Exp { x }, out, Vec::new(), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xm = &self.nodes[x].value;
        let mean = xm.data.iter().sum::<f64>() / xm.len() as f64;
        let rg = self.rg(x);
        self.push(Op::MeanAll { x }, Matrix::from_vec(1, 1, vec![mean]), Vec::new(), rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tm = &self.nodes[table].value;
        let cols = tm.cols;
        let mut out = Matrix::zeros(indices.len(), cols);
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < tm.rows, "gather index out of range");
            out.data[r * cols..(r + 1) * cols].copy_from_slice(tm.row_slice(idx));
        }
        let rg = self.rg(table);
        self.push(Op::GatherRows { table, indices: indices.to_vec() }, out, Vec::new(), rg)
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xm = &self.nodes[x].value;
        assert!(start + len <= xm.cols, "col_slice range");
        let mut out = Matrix::zeros(xm.rows, len);
        for r in 0..xm.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&xm.data[r * xm.cols + start..r * xm.cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(Op::ColSlice { x, start, len }, out, Vec::new(), rg)
    }

    pub fn col_concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = &self.nodes[p].value;
            assert_eq!(pm.rows, rows, "col_concat rows");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + pm.cols]
                    .copy_from_slice(pm.row_slice(r));
            }
            off += pm.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ColConcat { parts: parts.to_vec() }, out, Vec::new(), rg)
    }

    pub fn prepend_rows(&mut self, p: NodeId, x: NodeId, seq: usize) -> NodeId {
        let (pm, xm) = (&self.nodes[p].value, &self.nodes[x].value);
        assert_eq!(pm.cols, xm.cols, "prepend cols");
        assert!(seq > 0 && xm.rows % seq == 0, "prepend grouping");
        let groups = xm.rows / seq;
        let (np, cols) = (pm.rows, pm.cols);
        let mut out = Matrix::zeros(groups * (np + seq), cols);
        for g in 0..groups {
            let base = g * (np + seq);
            out.data[base * cols..(base + np) * cols].copy_from_slice(&pm.data);
            out.data[(base + np) * cols..(base + np + seq) * cols]
                .copy_from_slice(&xm.data[g * seq * cols..(g + 1) * seq * cols]);
        }
        let rg = self.rg(p) || self.rg(x);
        self.push(Op::PrependRows { p, x, seq }, out, Vec::new(), rg)
    }

    pub fn take_last_rows(&mut self, x: NodeId, group: usize, take: usize) -> NodeId {
        let xm = &self.nodes[x].value;
        assert!(group >= take && group > 0 && xm.rows % group == 0, "take_last grouping");
        let groups = xm.rows / group;
        let cols = xm.cols;
        let mut out = Matrix::zeros(groups * take, cols);
        for g in 0..groups {
            let src = (g * group + group - take) * cols;
            out.data[g * take * cols..(g + 1) * take * cols]
                .copy_from_slice(&xm.data[src..src + take * cols]);
        }
        let rg = self.rg(x);
        self.push(Op::TakeLastRows { x, group, take }, out, Vec::new(), rg)
    }

    /// Multi-head scaled dot-product self-attention within each group of
    /// `seq` rows. `qkv` is `[groups*seq, 3*dim]` laid out as q | k | v.
    pub fn attention(&mut self, qkv: NodeId, heads: usize, seq: usize) -> NodeId {
        let qm = &self.nodes[qkv].value;
        assert_eq!(qm.cols % 3, 0, "qkv cols");
        let dim = qm.cols / 3;
        assert_eq!(dim % heads, 0, "heads divide dim");
        assert!(seq > 0 && qm.rows % seq == 0, "attention grouping");
        let groups = qm.rows / seq;
        let hd = dim / heads;
        let scale = math::powf(hd as f64, -0.5);
        let cols3 = qm.cols;

        let mut out = Matrix::zeros(qm.rows, dim);
        let mut probs = vec![0.0; groups * heads * seq * seq];
        for g in 0..groups {
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                let pbase = (g * heads + h) * seq * seq;
                for s1 in 0..seq {
                    let r1 = (g * seq + s1) * cols3;
                    let q1 = &qm.data[r1 + qo..r1 + qo + hd];
                    // scores with streaming max for a stable softmax
                    let mut row = vec![0.0; seq];
                    let mut maxv = f64::NEG_INFINITY;
                    for s2 in 0..seq {
                        let r2 = (g * seq + s2) * cols3;
                        let k2 = &qm.data[r2 + ko..r2 + ko + hd];
                        let s = scale * crate::tensor::dot(q1, k2);
                        row[s2] = s;
                        if s > maxv {
                            maxv = s;
                        }
                    }
                    let mut denom = 0.0;
                    for s2 in 0..seq {
                        let e = math::exp(row[s2] - maxv);
                        row[s2] = e;
                        denom += e;
                    }
                    let orow = (g * seq + s1) * dim;
                    for s2 in 0..seq {
                        let p = row[s2] / denom;
                        probs[pbase + s1 * seq + s2] = p;
                        let r2 = (g * seq + s2) * cols3;
                        let v2 = &qm.data[r2 + vo..r2 + vo + hd];
                        for d in 0..hd {
                            out.data[orow + h * hd + d] += p * v2[d];
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        self.push(Op::Attention { qkv, heads, seq }, out, probs, rg)
    }

    /// Reverse pass from a scalar root. Gradients for every
    /// `requires_grad` node reachable from the root are accumulated and
    /// queryable through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads = core::mem::take(&mut self.grads);
        for g in grads.iter_mut() {
            *g = None;
        }
        grads[root] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("grad present");
            {
                let (before, _after) = grads.split_at_mut(i);
                self.propagate(i, &g, before);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::MatMulNT { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (am.rows, am.cols, bm.rows);
                if self.rg(*a) {
                    let da = Self::ensure(grads, *a, m * k);
                    matmul_nn_acc(da, g, &bm.data, m, n, k);
                }
                if self.rg(*b) {
                    let db = Self::ensure(grads, *b, n * k);
                    matmul_tn_acc(db, g, &am.data, n, m, k);
                }
            }
            Op::Add { a, b } => {
                for &x in &[*a, *b] {
                    if self.rg(x) {
                        let dx = Self::ensure(grads, x, g.len());
                        for (d, gv) in dx.iter_mut().zip(g.iter()) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    let da = Self::ensure(grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                if self.rg(*b) {
                    let db = Self::ensure(grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(g.iter()) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    let da = Self::ensure(grads, *a, g.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g.iter()).zip(bm.data.iter()) {
                        *d += gv * bv;
                    }
                }
                if self.rg(*b) {
                    let db = Self::ensure(grads, *b, g.len());
                    for ((d, gv), av) in db.iter_mut().zip(g.iter()).zip(am.data.iter()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRows { x, y } => {
                let (xm, ym) = (&self.nodes[*x].value, &self.nodes[*y].value);
                let group = xm.rows / ym.rows;
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                if self.rg(*y) {
                    let dy = Self::ensure(grads, *y, ym.len());
                    let cols = ym.cols;
                    for r in 0..xm.rows {
                        let q = r / group;
                        for c in 0..cols {
                            dy[q * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::MulRows { x, y } => {
                let (xm, ym) = (&self.nodes[*x].value, &self.nodes[*y].value);
                let group = xm.rows / ym.rows;
                let cols = ym.cols;
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for r in 0..xm.rows {
                        let yrow = ym.row_slice(r / group);
                        for c in 0..cols {
                            dx[r * cols + c] += g[r * cols + c] * yrow[c];
                        }
                    }
                }
                if self.rg(*y) {
                    let dy = Self::ensure(grads, *y, ym.len());
                    for r in 0..xm.rows {
                        let q = r / group;
                        for c in 0..cols {
                            dy[q * cols + c] += g[r * cols + c] * xm.data[r * cols + c];
                        }
                    }
                }
            }
            Op::AddScalar { x, .. } => {
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
            }
            Op::MulScalar { x, c } => {
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv * c;
                    }
                }
            }
            Op::LayerNorm { x } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let (rows, cols) = (xm.rows, xm.cols);
                    let xhat = &node.value;
                    let dx = Self::ensure(grads, *x, rows * cols);
                    for r in 0..rows {
                        let rstd = node.aux[r];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = xhat.row_slice(r);
                        let gmean = grow.iter().sum::<f64>() / cols as f64;
                        let ghmean = grow
                            .iter()
                            .zip(hrow.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        let drow = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            drow[c] += rstd * (grow[c] - gmean - hrow[c] * ghmean);
                        }
                    }
                }
            }
            Op::Silu { x } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g.iter()).zip(xm.data.iter()) {
                        *d += gv * math::silu_grad(*xv);
                    }
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g.iter()).zip(xm.data.iter()) {
                        *d += gv * math::gelu_grad(*xv);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), sv) in dx.iter_mut().zip(g.iter()).zip(node.value.data.iter()) {
                        *d += gv * sv * (1.0 - sv);
                    }
                }
            }
            Op::Exp { x } => {
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), ev) in dx.iter_mut().zip(g.iter()).zip(node.value.data.iter()) {
                        *d += gv * ev;
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let scale = g[0] / xm.len() as f64;
                    let dx = Self::ensure(grads, *x, xm.len());
                    for d in dx.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.rg(*table) {
                    let tm = &self.nodes[*table].value;
                    let cols = tm.cols;
                    let dt = Self::ensure(grads, *table, tm.len());
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dt[idx * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::ColSlice { x, start, len } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let dx = Self::ensure(grads, *x, xm.len());
                    for r in 0..xm.rows {
                        for c in 0..*len {
                            dx[r * xm.cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ColConcat { parts } => {
                let total = node.value.cols;
                let rows = node.value.rows;
                let mut off = 0;
                for &p in parts {
                    let pm = &self.nodes[p].value;
                    if self.rg(p) {
                        let dp = Self::ensure(grads, p, pm.len());
                        for r in 0..rows {
                            for c in 0..pm.cols {
                                dp[r * pm.cols + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += pm.cols;
                }
            }
            Op::PrependRows { p, x, seq } => {
                let (pm, xm) = (&self.nodes[*p].value, &self.nodes[*x].value);
                let groups = xm.rows / seq;
                let (np, cols) = (pm.rows, pm.cols);
                if self.rg(*p) {
                    let dp = Self::ensure(grads, *p, pm.len());
                    for grp in 0..groups {
                        let base = grp * (np + seq) * cols;
                        for e in 0..np * cols {
                            dp[e] += g[base + e];
                        }
                    }
                }
                if self.rg(*x) {
                    let dx = Self::ensure(grads, *x, xm.len());
                    for grp in 0..groups {
                        let src = (grp * (np + seq) + np) * cols;
                        let dst = grp * seq * cols;
                        for e in 0..seq * cols {
                            dx[dst + e] += g[src + e];
                        }
                    }
                }
            }
            Op::TakeLastRows { x, group, take } => {
                if self.rg(*x) {
                    let xm = &self.nodes[*x].value;
                    let cols = xm.cols;
                    let groups = xm.rows / group;
                    let dx = Self::ensure(grads, *x, xm.len());
                    for grp in 0..groups {
                        let src = grp * take * cols;
                        let dst = (grp * group + group - take) * cols;
                        for e in 0..take * cols {
                            dx[dst + e] += g[src + e];
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, seq } => {
                if self.rg(*qkv) {
                    let qm = &self.nodes[*qkv].value;
                    let cols3 = qm.cols;
                    let dim = cols3 / 3;
                    let hd = dim / heads;
                    let groups = qm.rows / seq;
                    let scale = math::powf(hd as f64, -0.5);
                    let probs = &node.aux;
                    let dqkv = Self::ensure(grads, *qkv, qm.len());
                    let mut dscore = vec![0.0; *seq];
                    for grp in 0..groups {
                        for h in 0..*heads {
                            let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                            let pbase = (grp * heads + h) * seq * seq;
                            for s1 in 0..*seq {
                                let gr = (grp * seq + s1) * dim + h * hd;
                                let go = &g[gr..gr + hd];
                                // dV and dP
                                let mut dp_dot_p = 0.0;
                                let mut dp = vec![0.0; *seq];
                                for s2 in 0..*seq {
                                    let p = probs[pbase + s1 * seq + s2];
                                    let r2 = (grp * seq + s2) * cols3;
                                    let v2 = &qm.data[r2 + vo..r2 + vo + hd];
                                    let mut d = 0.0;
                                    for (gv, vv) in go.iter().zip(v2.iter()) {
                                        d += gv * vv;
                                    }
                                    dp[s2] = d;
                                    dp_dot_p += d * p;
                                    // dV[s2] += p * go
                                    let dv = &mut dqkv[r2 + vo..r2 + vo + hd];
                                    for (dvv, gv) in dv.iter_mut().zip(go.iter()) {
                                        *dvv += p * gv;
                                    }
                                }
                                // softmax backward
                                for s2 in 0..*seq {
                                    let p = probs[pbase + s1 * seq + s2];
                                    dscore[s2] = p * (dp[s2] - dp_dot_p);
                                }
                                // dQ[s1] += scale * sum_s2 dscore[s2] * K[s2]
                                // dK[s2] += scale * dscore[s2] * Q[s1]
                                let r1 = (grp * seq + s1) * cols3;
                                let q1: Vec<f64> = qm.data[r1 + qo..r1 + qo + hd].to_vec();
                                for s2 in 0..*seq {
                                    let ds = scale * dscore[s2];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let r2 = (grp * seq + s2) * cols3;
                                    let k2: Vec<f64> = qm.data[r2 + ko..r2 + ko + hd].to_vec();
                                    let dq = &mut dqkv[r1 + qo..r1 + qo + hd];
                                    for (dqv, kv) in dq.iter_mut().zip(k2.iter()) {
                                        *dqv += ds * kv;
                                    }
                                    let dk = &mut dqkv[r2 + ko..r2 + ko + hd];
                                    for (dkv, qv) in dk.iter_mut().zip(q1.iter()) {
                                        *dkv += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Build the same graph twice: once for analytic gradients, then per
    /// perturbed input for central finite differences.
    fn check_grads_with(
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        inputs: &[Matrix],
        tol: f64,
    ) {
        let eval = |mats: &[Matrix]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = mats.iter().map(|m| t.leaf(m.clone(), true)).collect();
            let root = build(&mut t, &ids);
            t.scalar_value(root)
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let root = build(&mut tape, &ids);
        tape.backward(root);

        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(ids[which]).expect("grad exists").to_vec();
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data[e] += h;
                let mut minus = inputs.to_vec();
                minus[which].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[e];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "input {which} elem {e}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn linear_chain_grads() {
        let mut rng = Rng::new(1);
        let x = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let w = Matrix::gaussian(5, 4, 0.5, &mut rng);
        let b = Matrix::gaussian(1, 5, 0.5, &mut rng);
        check_grads_with(
            |t, ids| {
                let y = t.matmul_nt(ids[0], ids[1]);
                let y = t.add_rows(y, ids[2]);
                let y = t.gelu(y);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn broadcast_and_norm_grads() {
        let mut rng = Rng::new(2);
        let x = Matrix::gaussian(6, 4, 1.0, &mut rng); // 2 groups of 3 rows
        let scale = Matrix::gaussian(2, 4, 0.3, &mut rng);
        check_grads_with(
            |t, ids| {
                let n = t.layer_norm(ids[0]);
                let m = t.mul_rows(n, ids[1]);
                let s = t.silu(m);
                t.mean_all(s)
            },
            &[x, scale],
            1e-4,
        );
    }

    #[test]
    fn attention_grads() {
        let mut rng = Rng::new(3);
        // 2 groups, 3 tokens, dim 4, 2 heads
        let x = Matrix::gaussian(6, 4, 1.0, &mut rng);
        let wqkv = Matrix::gaussian(12, 4, 0.5, &mut rng);
        check_grads_with(
            |t, ids| {
                let qkv = t.matmul_nt(ids[0], ids[1]);
                let a = t.attention(qkv, 2, 3);
                let sq = t.mul(a, a);
                t.mean_all(sq)
            },
            &[x, wqkv],
            1e-4,
        );
    }

    #[test]
    fn slicing_concat_gather_grads() {
        let mut rng = Rng::new(4);
        let x = Matrix::gaussian(4, 6, 1.0, &mut rng);
        let table = Matrix::gaussian(5, 3, 1.0, &mut rng);
        check_grads_with(
            |t, ids| {
                let left = t.col_slice(ids[0], 0, 3);
                let right = t.col_slice(ids[0], 3, 3);
                let gathered = t.gather_rows(ids[1], &[0, 2, 2, 4]);
                let s = t.add(left, gathered);
                let c = t.col_concat(&[s, right]);
                let e = t.exp(c);
                t.mean_all(e)
            },
            &[x, table],
            1e-4,
        );
    }

    #[test]
    fn prompt_rows_grads() {
        let mut rng = Rng::new(5);
        let x = Matrix::gaussian(4, 3, 1.0, &mut rng); // 2 groups of seq 2
        let p = Matrix::gaussian(1, 3, 1.0, &mut rng);
        check_grads_with(
            |t, ids| {
                let with = t.prepend_rows(ids[1], ids[0], 2);
                let sig = t.sigmoid(with);
                let back = t.take_last_rows(sig, 3, 2);
                let sq = t.mul(back, back);
                t.mean_all(sq)
            },
            &[x, p],
            1e-4,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut rng = Rng::new(6);
        let x = Matrix::gaussian(2, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let id = tape.leaf(x, true);
        let d = tape.detach(id);
        let m = tape.mul(d, d);
        let live = tape.mul(id, id);
        let s = tape.add(m, live);
        let root = tape.mean_all(s);
        tape.backward(root);
        let g = tape.grad(id).unwrap();
        let xv = tape.value(id).clone();
        // only the live path contributes: d/dx mean(x^2 + detach(x)^2) = 2x/n
        for (gv, xv) in g.iter().zip(xv.data.iter()) {
            assert!((gv - 2.0 * xv / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::gaussian(4, 6, 2.0, &mut rng), false);
        let w = tape.leaf(Matrix::gaussian(18, 6, 0.7, &mut rng), false);
        let qkv = tape.matmul_nt(x, w);
        let id = tape.attention(qkv, 3, 2);
        // probabilities are stored in aux; check each softmax row
        let aux = &tape.nodes[id].aux;
        for row in aux.chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
