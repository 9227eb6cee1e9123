use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Fuse {
        weights: Var,
        logits: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding_lookup",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Attention { .. } => "causal_self_attention",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatCols(..) => "concat_scores",
            Op::SelectRows { .. } => "select_rows",
            Op::Fuse { .. } => "fuse_logits",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sum(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Softmax { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(parts) => parts.clone(),
            Op::SelectRows { x, .. } => vec![*x],
            Op::Fuse { weights, logits } => {
                let mut v = vec![*weights];
                v.extend(logits);
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    buffers_allocated: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of gradient buffers the backward pass allocated, including
    /// intermediate nodes. Nodes that do not require grad never get one.
    pub fn buffers_allocated(&self) -> usize {
        self.buffers_allocated
    }
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A graph supports exactly one [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphState("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(op.name().into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::Dimension(format!("bias of {} values for width {n}", b.numel())));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup of zero ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.any_grad(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if self.value(gain).numel() != d {
            return Err(Error::Dimension(format!("rmsnorm gain for width {d}")));
        }
        let (out, inv_rms) = kernels::rmsnorm(self.value(x).data(), self.value(gain).data(), rows);
        let rg = self.any_grad(&[x, gain]);
        self.push(Tensor::from_parts(vec![rows, d], out), Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Causal multi-head scaled dot-product attention over `[T, d]` inputs.
    pub fn causal_self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q)?;
        if self.dims2(k)? != (t, d) || self.dims2(v)? != (t, d) {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        let (out, probs) = kernels::causal_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            heads,
        );
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::Attention { q, k, v, heads, probs },
            rg,
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input".into()));
        }
        let mut out = vec![0.0; src.len()];
        let mut line = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, l) in line.iter_mut().enumerate() {
                    *l = src[(o * len + j) * inner + i];
                }
                kernels::softmax_in_place(&mut line);
                for (j, l) in line.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *l;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, len, inner },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[T, V]` logits, over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension(format!(
                "{t} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= vocab {
                return Err(Error::Vocab { id: target, vocab });
            }
            let row = lv.row(i);
            total += kernels::log_sum_exp(row) - row[target];
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            p.copy_from_slice(row);
            kernels::softmax_in_place(p);
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Concatenates `[T, c_i]` matrices along columns, e.g. S per-specialist
    /// `[T, 1]` score columns into one `[T, S]` matrix.
    pub fn concat_scores(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::Dimension(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::Dimension("select of zero rows".into()));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("row {r} of {n}")));
            }
            out.extend_from_slice(src.row(r));
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::SelectRows { x, rows: rows.to_vec() },
            rg,
        )
    }

    /// Per-row convex combination: `out[t] = sum_s weights[t, s] * logits[s][t]`.
    pub fn fuse_logits(&mut self, weights: Var, logits: &[Var]) -> Result<Var> {
        let (t, s) = self.dims2(weights)?;
        if s != logits.len() {
            return Err(Error::Dimension(format!("{s} weight columns for {} logit sets", logits.len())));
        }
        let (lt, v) = self.dims2(logits[0])?;
        for &l in logits {
            if self.dims2(l)? != (lt, v) {
                return Err(Error::Dimension("specialist logits differ in shape".into()));
            }
        }
        if lt != t {
            return Err(Error::Dimension(format!("{t} weight rows for {lt} logit rows")));
        }
        let w = self.value(weights).data();
        let mut out = vec![0.0; t * v];
        for (si, &l) in logits.iter().enumerate() {
            let ld = self.value(l).data();
            for r in 0..t {
                let ws = w[r * s + si];
                for (o, x) in out[r * v..(r + 1) * v].iter_mut().zip(&ld[r * v..(r + 1) * v]) {
                    *o += ws * x;
                }
            }
        }
        let mut all = vec![weights];
        all.extend_from_slice(logits);
        let rg = self.any_grad(&all);
        self.push(
            Tensor::from_parts(vec![t, v], out),
            Op::Fuse {
                weights,
                logits: logits.to_vec(),
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// leaf that requires grad. The graph cannot be used afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphState("backward called on a consumed graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut allocated = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
            allocated += 1;
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => {
                        allocated += 1;
                        *slot = Some(contrib);
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            buffers_allocated: allocated,
        })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape()[1];
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b).data(), true, &mut da, 0.0);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, g, false, &mut db, 0.0);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow(x, bias) => {
                out.push((*x, g.to_vec()));
                if want(*bias) {
                    let n = val(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Relu(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Embedding { table, ids } => {
                let (vocab, d) = val(*table).dims2().unwrap();
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((*table, dt));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let d = gv.len();
                if want(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(gv).zip(xr).map(|((g, w), x)| g * w * x).sum();
                        let coef = s * s * s * dot / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = s * gr[j] * gv[j] - coef * xr[j];
                        }
                    }
                    out.push((*x, dx));
                }
                if want(*gain) {
                    let mut dg = vec![0.0; d];
                    for (r, &s) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xv[r * d + j] * s;
                        }
                    }
                    out.push((*gain, dg));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (t, d) = val(*q).dims2().unwrap();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut inner = 0.0;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            inner += p[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            dvj.iter_mut().zip(gi).for_each(|(a, b)| *a += p[j] * b);
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = val(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut dl[i * vocab..(i + 1) * vocab];
                    row.iter_mut()
                        .zip(&probs[i * vocab..(i + 1) * vocab])
                        .for_each(|(d, p)| *d = p * scale);
                    row[target] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if want(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        out.push((p, dp));
                    }
                    off += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let (n, d) = val(*x).dims2().unwrap();
                let mut dx = vec![0.0; n * d];
                for (row, &r) in g.chunks_exact(d).zip(rows) {
                    dx[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((*x, dx));
            }
            Op::Fuse { weights, logits } => {
                let (t, s) = val(*weights).dims2().unwrap();
                let v = node.value.shape()[1];
                let w = val(*weights).data();
                if want(*weights) {
                    let mut dw = vec![0.0; t * s];
                    for (si, &l) in logits.iter().enumerate() {
                        let ld = val(l).data();
                        for r in 0..t {
                            dw[r * s + si] = g[r * v..(r + 1) * v]
                                .iter()
                                .zip(&ld[r * v..(r + 1) * v])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    out.push((*weights, dw));
                }
                for (si, &l) in logits.iter().enumerate() {
                    if !want(l) {
                        continue;
                    }
                    let mut dl = vec![0.0; t * v];
                    for r in 0..t {
                        let ws = w[r * s + si];
                        dl[r * v..(r + 1) * v]
                            .iter_mut()
                            .zip(&g[r * v..(r + 1) * v])
                            .for_each(|(a, b)| *a = ws * b);
                    }
                    out.push((l, dl));
                }
            }
        }
        debug_assert!(out.iter().all(|(v, _)| node.op.inputs().contains(v)));
        out
    }
}
