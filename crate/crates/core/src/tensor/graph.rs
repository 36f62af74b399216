//! Eager tape: every op computes its value immediately and records what its
//! adjoint needs. `backward` walks the tape once in reverse.

use std::borrow::Cow;

use super::kernels::{self, layernorm_parts, matmul_into, multi_head_attention, MatLayout};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    /// `y` broadcast over the leading axes of `x`.
    AddBroadcast(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BcLoss {
        pred: usize,
        target: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation graph. Leaves may borrow parameter tensors for `'p`.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf borrowing `t`; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(Cow::Borrowed(t), Op::Leaf, ng)
    }

    /// Owned leaf; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let ng = self.needs(&ids);
        Ok(self.push(
            Cow::Owned(y),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            ng,
        ))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(t), Op::Add(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(t), Op::Mul(a.0, b.0), ng))
    }

    /// `x + y` where `y.shape()` is a suffix of `x.shape()`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (sx, sy) = (tx.shape(), ty.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::Shape {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        let n = ty.numel();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(ty.data()) {
                *a += b;
            }
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        t.ensure_finite("add_broadcast")?;
        let ng = self.needs(&[x.0, y.0]);
        Ok(self.push(Cow::Owned(t), Op::AddBroadcast(x.0, y.0), ng))
    }

    fn map(&mut self, x: Var, op_name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| f(*v)).collect())?;
        t.ensure_finite(op_name)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(Cow::Owned(t), op, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, "scale", |v| v * c, Op::Scale(x.0, c))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "gelu", kernels::gelu, Op::Gelu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, "tanh", f64::tanh, Op::Tanh(x.0))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, xhat, rstd) =
            layernorm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Cow::Owned(y),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// See [`multi_head_attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (o, probs) =
            multi_head_attention(self.value(q), self.value(k), self.value(v), heads, causal)?;
        let ng = self.needs(&[q.0, k.0, v.0]);
        Ok(self.push(
            Cow::Owned(o),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` (`[V, D]`) and reshapes them to `shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.shape()[0], t.last_dim());
        if t.shape().len() != 2 || ids.iter().any(|&i| i >= v) {
            return Err(TensorError::InvalidArgument(format!(
                "embedding ids out of range for table {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?.reshape(shape)?;
        let ng = self.needs(&[table.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(Cow::Owned(out), Op::Concat { parts: ids, axis }, ng))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_grad(false).reshape(shape)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(Cow::Owned(out), Op::Reshape(x.0), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(&[x.0]);
        let t = Tensor::scalar(s);
        t.ensure_finite("sum")?;
        Ok(self.push(Cow::Owned(t), Op::Sum(x.0), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let ng = self.needs(&[x.0]);
        let t = Tensor::scalar(m);
        t.ensure_finite("mean")?;
        Ok(self.push(Cow::Owned(t), Op::Mean(x.0), ng))
    }

    /// Mean softmax cross-entropy of `logits` (`[N, V]`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        if t.rows() != targets.len() || targets.iter().any(|&c| c >= v) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss += z.ln() + max - row[target];
        }
        let out = Tensor::scalar(loss / targets.len() as f64);
        out.ensure_finite("cross_entropy")?;
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `mean|p - t| + mean((p - t)^2)` with `target` held constant.
    pub fn bc_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::Shape {
                op: "bc_loss",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = p.numel() as f64;
        let (mut l1, mut l2) = (0.0, 0.0);
        for (a, b) in p.data().iter().zip(target.data()) {
            let d = a - b;
            l1 += d.abs();
            l2 += d * d;
        }
        let out = Tensor::scalar(l1 / n + l2 / n);
        out.ensure_finite("bc_loss")?;
        let ng = self.needs(&[pred.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::BcLoss {
                pred: pred.0,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    pub fn backward(self, loss: Var) -> Result<Gradients> {
        backward(self, loss)
    }
}

/// Per-node gradients produced by [`backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut [f64]> {
    if !nodes[i].needs_grad {
        return None;
    }
    let g = &mut grads[i];
    if g.is_none() {
        *g = Some(vec![0.0; nodes[i].value.numel()]);
    }
    g.as_deref_mut()
}

/// Reverse pass from a scalar `loss`. Consumes the graph.
pub fn backward(graph: Graph<'_>, loss: Var) -> Result<Gradients> {
    let nodes = graph.nodes;
    let shape = nodes[loss.0].value.shape();
    if shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarLoss(shape.to_vec()));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[loss.0] = Some(vec![1.0]);

    for i in (0..=loss.0).rev() {
        let Some(gy) = grads[i].take() else { continue };
        let node = &nodes[i];
        if !node.needs_grad {
            continue;
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {
                grads[i] = Some(gy);
                continue;
            }
            Op::Linear { x, w, b } => {
                let (wi, wo) = (nodes[*w].value.shape()[0], nodes[*w].value.shape()[1]);
                let m = y.rows();
                if let Some(gx) = slot(&mut grads, &nodes, *x) {
                    matmul_into(
                        &gy,
                        MatLayout::row_major(m, wo),
                        nodes[*w].value.data(),
                        MatLayout::row_major(wi, wo).t(),
                        gx,
                        MatLayout::row_major(m, wi),
                        1.0,
                    );
                }
                if let Some(gw) = slot(&mut grads, &nodes, *w) {
                    matmul_into(
                        nodes[*x].value.data(),
                        MatLayout::row_major(m, wi).t(),
                        &gy,
                        MatLayout::row_major(m, wo),
                        gw,
                        MatLayout::row_major(wi, wo),
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for row in gy.chunks_exact(wo) {
                            for (g, r) in gb.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if let Some(g) = slot(&mut grads, &nodes, j) {
                        for (g, d) in g.iter_mut().zip(&gy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::AddBroadcast(x, yb) => {
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for (g, d) in g.iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
                let n = nodes[*yb].value.numel();
                if let Some(g) = slot(&mut grads, &nodes, *yb) {
                    for chunk in gy.chunks_exact(n) {
                        for (g, d) in g.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(g) = slot(&mut grads, &nodes, *a) {
                    for ((g, d), o) in g.iter_mut().zip(&gy).zip(vb) {
                        *g += d * o;
                    }
                }
                if let Some(g) = slot(&mut grads, &nodes, *b) {
                    for ((g, d), o) in g.iter_mut().zip(&gy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for (g, d) in g.iter_mut().zip(&gy) {
                        *g += d * c;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = nodes[*x].value.data();
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for ((g, d), xv) in g.iter_mut().zip(&gy).zip(vx) {
                        *g += d * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for ((g, d), t) in g.iter_mut().zip(&gy).zip(y.data()) {
                        *g += d * (1.0 - t * t);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.last_dim();
                let gam = nodes[*gamma].value.data();
                if let Some(gg) = slot(&mut grads, &nodes, *gamma) {
                    for (row_g, row_x) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                }
                if let Some(gb) = slot(&mut grads, &nodes, *beta) {
                    for row_g in gy.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += row_g[j];
                        }
                    }
                }
                if let Some(gx) = slot(&mut grads, &nodes, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (row_g, row_x)) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * row_x[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - m1 - row_x[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                attention_backward(&nodes, &mut grads, &gy, (*q, *k, *v), *heads, probs);
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.last_dim();
                if let Some(g) = slot(&mut grads, &nodes, *table) {
                    for (row, &id) in gy.chunks_exact(d).zip(ids) {
                        for (g, r) in g[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis];
                    if let Some(g) = slot(&mut grads, &nodes, p) {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..][..len * inner];
                            for (g, s) in g[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *g += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = nodes[*x].value.shape().to_vec();
                let (outer, inner) = outer_inner(&xs, *axis);
                let len = y.shape()[*axis];
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for o in 0..outer {
                        let dst = &mut g[(o * xs[*axis] + start) * inner..][..len * inner];
                        for (g, s) in dst.iter_mut().zip(&gy[o * len * inner..][..len * inner]) {
                            *g += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for (g, d) in g.iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for g in g.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.numel() as f64;
                if let Some(g) = slot(&mut grads, &nodes, *x) {
                    for g in g.iter_mut() {
                        *g += gy[0] / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[*logits].value.last_dim();
                let scale = gy[0] / targets.len() as f64;
                if let Some(g) = slot(&mut grads, &nodes, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::BcLoss { pred, target } => {
                let p = nodes[*pred].value.data();
                let n = p.len() as f64;
                if let Some(g) = slot(&mut grads, &nodes, *pred) {
                    for ((g, a), b) in g.iter_mut().zip(p).zip(target) {
                        let d = a - b;
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *g += gy[0] * (sign + 2.0 * d) / n;
                    }
                }
            }
        }
    }

    let grads = grads
        .into_iter()
        .zip(&nodes)
        .map(|(g, n)| match (g, &n.op) {
            (Some(g), Op::Leaf) => Some(
                Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape matches value"),
            ),
            _ => None,
        })
        .collect();
    Ok(Gradients { grads })
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    probs: &[f64],
) {
    let qs = nodes[q].value.shape();
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = nodes[k].value.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; b * tq * d];
    let mut dk = vec![0.0; b * tk * d];
    let mut dv = vec![0.0; b * tk * d];
    let mut dp = vec![0.0; tq * tk];
    let (qd, kd, vd) = (
        nodes[q].value.data(),
        nodes[k].value.data(),
        nodes[v].value.data(),
    );
    for bi in 0..b {
        for h in 0..heads {
            let p = &probs[(bi * heads + h) * tq * tk..][..tq * tk];
            let qo = bi * tq * d + h * dh;
            let ko = bi * tk * d + h * dh;
            // dV = Pᵀ dO
            matmul_into(
                p,
                MatLayout::row_major(tq, tk).t(),
                &gy[qo..],
                MatLayout::strided(tq, dh, d),
                &mut dv[ko..],
                MatLayout::strided(tk, dh, d),
                0.0,
            );
            // dP = dO Vᵀ
            matmul_into(
                &gy[qo..],
                MatLayout::strided(tq, dh, d),
                &vd[ko..],
                MatLayout::strided(tk, dh, d).t(),
                &mut dp,
                MatLayout::row_major(tq, tk),
                0.0,
            );
            // dS = P ⊙ (dP - rowsum(P ⊙ dP)), folded with the score scale.
            for (prow, drow) in p.chunks_exact(tk).zip(dp.chunks_exact_mut(tk)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dv_, pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            matmul_into(
                &dp,
                MatLayout::row_major(tq, tk),
                &kd[ko..],
                MatLayout::strided(tk, dh, d),
                &mut dq[qo..],
                MatLayout::strided(tq, dh, d),
                0.0,
            );
            matmul_into(
                &dp,
                MatLayout::row_major(tq, tk).t(),
                &qd[qo..],
                MatLayout::strided(tq, dh, d),
                &mut dk[ko..],
                MatLayout::strided(tk, dh, d),
                0.0,
            );
        }
    }
    for (idx, contrib) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(g) = slot(grads, nodes, idx) {
            for (g, c) in g.iter_mut().zip(&contrib) {
                *g += c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
            .unwrap()
            .with_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.sum(xv).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.get(xv).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn linear_adjoint_is_x_transpose_ones() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng).with_grad(true);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(&x), g.leaf(&w));
        let y = g.linear(xv, wv, None).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let gw = grads.get(wv).unwrap();
        for i in 0..2 {
            let col_sum: f64 = (0..3).map(|r| x.data()[r * 2 + i]).sum();
            for o in 0..4 {
                assert!((gw.data()[i * 4 + o] - col_sum).abs() < 1e-12);
            }
        }
        assert!(grads.get(xv).is_none(), "constant input gets no gradient");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::zeros(&[2]).with_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(matches!(g.backward(xv), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_an_error_not_a_value() {
        let x = Tensor::from_vec(vec![f64::MAX, f64::MAX]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(matches!(g.add(xv, xv), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(&a), g.leaf(&b));
        let c = g.concat(&[av, bv], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 4]);
        let s = g.slice(c, 1, 3, 1).unwrap();
        assert_eq!(g.value(s).data(), b.data());
        let s = g.slice(c, 1, 0, 3).unwrap();
        assert_eq!(g.value(s).data(), a.data());
    }
}
