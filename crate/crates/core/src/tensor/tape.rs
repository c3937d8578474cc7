// Reverse-mode differentiation by operation recording.
//
// Every op pushes a node holding its forward value plus whatever the
// backward rule needs. `Tape::backward` walks the nodes in reverse and
// accumulates gradients; only leaves created with `Tape::param` are
// reported.

use std::cell::RefCell;
use std::rc::Rc;

use super::{
    add, add_row, gelu, gelu_grad_scalar, layer_norm_stats, log_softmax, matmul, matmul_nt,
    matmul_tn, mul, softmax, Float, Result, Tensor, TensorError,
};

/// Which divergence a [`Var::divergence`] node computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceKind {
    /// `Σ_v S_v (ln S_v − ln T_v)`
    Reverse,
    /// `Σ_v T_v (ln T_v − ln S_v)`
    Forward,
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: usize,
        // d loss / d logits, already divided by the position count
        grad: Vec<F>,
    },
    Divergence {
        logits: usize,
        grad: Vec<F>,
    },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    trainable: bool,
}

/// Records operations for one forward/backward pass.
///
/// A tape is confined to a single thread; forward values are shared through
/// `Rc` so reading a [`Var`] never copies.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Float> Copy for Var<'_, F> {}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of trainable leaves, keyed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// A non-trainable leaf.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<F>, trainable: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        // Saved state is only needed when a gradient will flow through.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            trainable: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape(), F::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.trainable {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.trainable {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    id: usize,
    contribution: Tensor<F>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e = *e + *c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn wants<F: Float>(nodes: &[Node<F>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backward_node<F: Float>(
    nodes: &[Node<F>],
    node: &Node<F>,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if wants(nodes, a) {
                let da = matmul_nt(g, &nodes[b].value)?;
                accumulate(nodes, grads, a, da);
            }
            if wants(nodes, b) {
                let db = matmul_tn(&nodes[a].value, g)?;
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::MatMulNT(a, b) => {
            // c = a · bᵀ  →  da = g · b,  db = gᵀ · a
            if wants(nodes, a) {
                let da = matmul(g, &nodes[b].value)?;
                accumulate(nodes, grads, a, da);
            }
            if wants(nodes, b) {
                let db = matmul_tn(g, &nodes[a].value)?;
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        &Op::Mul(a, b) => {
            if wants(nodes, a) {
                accumulate(nodes, grads, a, mul(g, &nodes[b].value)?);
            }
            if wants(nodes, b) {
                accumulate(nodes, grads, b, mul(g, &nodes[a].value)?);
            }
        }
        &Op::Scale(a, c) => {
            let d = g.data().iter().map(|&v| v * c).collect();
            accumulate(nodes, grads, a, Tensor::new(g.shape().to_vec(), d)?);
        }
        &Op::AddRow(x, bias) => {
            accumulate(nodes, grads, x, g.clone());
            if wants(nodes, bias) {
                let cols = nodes[bias].value.numel();
                let mut db = vec![F::zero(); cols];
                for row in g.data().chunks_exact(cols) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                accumulate(
                    nodes,
                    grads,
                    bias,
                    Tensor::new(nodes[bias].value.shape().to_vec(), db)?,
                );
            }
        }
        &Op::Sum(a) => {
            let shape = nodes[a].value.shape();
            accumulate(nodes, grads, a, Tensor::full(shape, g.data()[0]));
        }
        &Op::Mean(a) => {
            let input = &nodes[a].value;
            let v = g.data()[0] / F::of(input.numel() as f64);
            accumulate(nodes, grads, a, Tensor::full(input.shape(), v));
        }
        &Op::Gelu(a) => {
            let x = &nodes[a].value;
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                .collect();
            accumulate(nodes, grads, a, Tensor::new(x.shape().to_vec(), d)?);
        }
        &Op::Softmax(a) => {
            let y = &node.value;
            let cols = y.last_dim();
            let mut d = vec![F::zero(); y.numel()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(cols)
                .zip(y.data().chunks_exact(cols))
                .zip(g.data().chunks_exact(cols))
            {
                let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = p * (q - dot);
                }
            }
            accumulate(nodes, grads, a, Tensor::new(y.shape().to_vec(), d)?);
        }
        &Op::LogSoftmax(a) => {
            let y = &node.value;
            let cols = y.last_dim();
            let mut d = vec![F::zero(); y.numel()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(cols)
                .zip(y.data().chunks_exact(cols))
                .zip(g.data().chunks_exact(cols))
            {
                let total: F = gr.iter().copied().sum();
                for ((o, &ly), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = q - ly.exp() * total;
                }
            }
            accumulate(nodes, grads, a, Tensor::new(y.shape().to_vec(), d)?);
        }
        &Op::Reshape(a) => {
            let shape = nodes[a].value.shape().to_vec();
            accumulate(nodes, grads, a, g.clone().reshape(&shape)?);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let (rows, cols) = xv.as_rows();
            let n = F::of(cols as f64);
            let mut dgamma = vec![F::zero(); cols];
            let mut dbeta = vec![F::zero(); cols];
            let mut dx = vec![F::zero(); rows * cols];
            let mut dxhat = vec![F::zero(); cols];
            for r in 0..rows {
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let xh = &normalized[r * cols..(r + 1) * cols];
                let mut mean_d = F::zero();
                let mut mean_dx = F::zero();
                for c in 0..cols {
                    dgamma[c] = dgamma[c] + gr[c] * xh[c];
                    dbeta[c] = dbeta[c] + gr[c];
                    dxhat[c] = gr[c] * gv.data()[c];
                    mean_d = mean_d + dxhat[c];
                    mean_dx = mean_dx + dxhat[c] * xh[c];
                }
                mean_d = mean_d / n;
                mean_dx = mean_dx / n;
                for c in 0..cols {
                    dx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            accumulate(
                nodes,
                grads,
                *gamma,
                Tensor::new(gv.shape().to_vec(), dgamma)?,
            );
            let bshape = nodes[*beta].value.shape().to_vec();
            accumulate(nodes, grads, *beta, Tensor::new(bshape, dbeta)?);
        }
        Op::Embedding { table, ids } => {
            if wants(nodes, *table) {
                let tv = &nodes[*table].value;
                let cols = tv.last_dim();
                let mut dt = vec![F::zero(); tv.numel()];
                for (row, &id) in g.data().chunks_exact(cols).zip(ids) {
                    for (d, &v) in dt[id * cols..(id + 1) * cols].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                accumulate(nodes, grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            probs,
        } => {
            let (dq, dk, dv) = attention_backward(
                &nodes[*q].value,
                &nodes[*k].value,
                &nodes[*v].value,
                probs,
                g,
                *dims,
            )?;
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
        Op::CrossEntropy { logits, grad } | Op::Divergence { logits, grad } => {
            let scale = g.data()[0];
            let d = grad.iter().map(|&v| v * scale).collect();
            let shape = nodes[*logits].value.shape().to_vec();
            accumulate(nodes, grads, *logits, Tensor::new(shape, d)?);
        }
    }
    Ok(())
}

#[allow(clippy::should_implement_trait)]
impl<'t, F: Float> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let out = matmul(&self.value(), &other.value())?;
        Ok(self
            .tape
            .push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let out = matmul_nt(&self.value(), &other.value())?;
        Ok(self
            .tape
            .push(out, Op::MatMulNT(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let out = add(&self.value(), &other.value())?;
        Ok(self
            .tape
            .push(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let out = mul(&self.value(), &other.value())?;
        Ok(self
            .tape
            .push(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: F) -> Result<Var<'t, F>> {
        let v = self.value();
        let data = v.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?.ensure_finite("scale")?;
        Ok(self.tape.push(out, Op::Scale(self.id, c), &[self.id]))
    }

    /// Broadcast-add a bias vector to every row.
    pub fn add_row(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let out = add_row(&self.value(), &bias.value())?;
        Ok(self
            .tape
            .push(out, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let total: F = self.value().data().iter().copied().sum();
        let out = Tensor::scalar(total).ensure_finite("sum")?;
        Ok(self.tape.push(out, Op::Sum(self.id), &[self.id]))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let v = self.value();
        let total: F = v.data().iter().copied().sum();
        let out = Tensor::scalar(total / F::of(v.numel() as f64)).ensure_finite("mean")?;
        Ok(self.tape.push(out, Op::Mean(self.id), &[self.id]))
    }

    pub fn gelu(self) -> Result<Var<'t, F>> {
        let out = gelu(&self.value())?;
        Ok(self.tape.push(out, Op::Gelu(self.id), &[self.id]))
    }

    pub fn softmax(self) -> Result<Var<'t, F>> {
        let out = softmax(&self.value())?;
        Ok(self.tape.push(out, Op::Softmax(self.id), &[self.id]))
    }

    pub fn log_softmax(self) -> Result<Var<'t, F>> {
        let out = log_softmax(&self.value())?;
        Ok(self.tape.push(out, Op::LogSoftmax(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let (out, stats) = layer_norm_stats(&self.value(), &gamma.value(), &beta.value(), eps)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                normalized: stats.normalized,
                inv_std: stats.inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Row gather from an embedding table `[rows, dim]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, F>> {
        let table = self.value();
        let (rows, cols) = table.dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                detail: "no ids to gather".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&table.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.tape.push(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, heads·head_dim]` with head `h` occupying
    /// columns `h·head_dim .. (h+1)·head_dim`. Position `i` attends to `j ≤ i`.
    pub fn causal_attention(
        self,
        k: Var<'t, F>,
        v: Var<'t, F>,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var<'t, F>> {
        let dims = AttnDims {
            batch,
            seq,
            heads,
            head_dim,
        };
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let expected = vec![batch * seq, heads * head_dim];
        for t in [&qv, &kv, &vv] {
            if t.shape() != expected.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_attention",
                    lhs: t.shape().to_vec(),
                    rhs: expected,
                });
            }
        }
        let (out, probs) = attention_forward(&qv, &kv, &vv, dims)?;
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                dims,
                probs,
            },
            &[self.id, k.id, v.id],
        ))
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask`
    /// is set. `self` holds logits with the vocabulary on the last axis.
    pub fn cross_entropy(self, targets: &[usize], mask: &[bool]) -> Result<Var<'t, F>> {
        let logits = self.value();
        let (rows, vocab) = logits.as_rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                detail: format!(
                    "{rows} logit rows but {} targets and {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask {
                op: "cross_entropy",
            });
        }
        let inv = 1.0 / count as f64;
        let mut grad = vec![F::zero(); logits.numel()];
        let mut total = 0.0f64;
        let mut probs = vec![0.0f64; vocab];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            let row = &logits.data()[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row, 1.0, &mut probs);
            total += lse - row[t].f64();
            for (c, &p) in probs.iter().enumerate() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                grad[r * vocab + c] = F::of((p - onehot) * inv);
            }
        }
        let out = Tensor::scalar(F::of(total * inv)).ensure_finite("cross_entropy")?;
        Ok(self.tape.push(
            out,
            Op::CrossEntropy {
                logits: self.id,
                grad,
            },
            &[self.id],
        ))
    }

    /// KL divergence between the student distribution `softmax(self/τ)` and
    /// the teacher distribution `softmax(teacher/τ)`, averaged over masked
    /// positions. The teacher is a plain tensor, so no gradient reaches it.
    pub fn divergence(
        self,
        teacher_logits: &Tensor<F>,
        mask: &[bool],
        temperature: F,
        kind: DivergenceKind,
    ) -> Result<Var<'t, F>> {
        let student = self.value();
        if student.shape() != teacher_logits.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "divergence",
                lhs: student.shape().to_vec(),
                rhs: teacher_logits.shape().to_vec(),
            });
        }
        let (rows, vocab) = student.as_rows();
        if mask.len() != rows {
            return Err(TensorError::InvalidShape {
                op: "divergence",
                detail: format!("{rows} rows but {} mask entries", mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: "divergence" });
        }
        let tau = temperature.f64();
        let inv = 1.0 / count as f64;
        let mut grad = vec![F::zero(); student.numel()];
        let mut total = 0.0f64;
        let mut s = vec![0.0f64; vocab];
        let mut t = vec![0.0f64; vocab];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let zs = &student.data()[r * vocab..(r + 1) * vocab];
            let zt = &teacher_logits.data()[r * vocab..(r + 1) * vocab];
            let lse_s = log_sum_exp(zs, tau, &mut s);
            let lse_t = log_sum_exp(zt, tau, &mut t);
            let g = &mut grad[r * vocab..(r + 1) * vocab];
            match kind {
                DivergenceKind::Reverse => {
                    let mut row_kl = 0.0;
                    let mut diffs = vec![0.0f64; vocab];
                    for v in 0..vocab {
                        let ls = zs[v].f64() / tau - lse_s;
                        let lt = zt[v].f64() / tau - lse_t;
                        diffs[v] = ls - lt;
                        row_kl += s[v] * diffs[v];
                    }
                    total += row_kl;
                    for v in 0..vocab {
                        g[v] = F::of(s[v] * (diffs[v] - row_kl) / tau * inv);
                    }
                }
                DivergenceKind::Forward => {
                    let mut row_kl = 0.0;
                    for v in 0..vocab {
                        let ls = zs[v].f64() / tau - lse_s;
                        let lt = zt[v].f64() / tau - lse_t;
                        row_kl += t[v] * (lt - ls);
                        g[v] = F::of((s[v] - t[v]) / tau * inv);
                    }
                    total += row_kl;
                }
            }
        }
        let op = match kind {
            DivergenceKind::Reverse => "reverse_kl",
            DivergenceKind::Forward => "forward_kl",
        };
        let out = Tensor::scalar(F::of(total * inv)).ensure_finite(op)?;
        Ok(self.tape.push(
            out,
            Op::Divergence {
                logits: self.id,
                grad,
            },
            &[self.id],
        ))
    }
}

/// Writes `softmax(row/τ)` into `probs` (in f64) and returns `logsumexp(row/τ)`.
fn log_sum_exp<F: Float>(row: &[F], tau: f64, probs: &mut [f64]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.f64() / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, v) in probs.iter_mut().zip(row) {
        *p = (v.f64() / tau - max).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    max + total.ln()
}

fn attention_forward<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    d: AttnDims,
) -> Result<(Tensor<F>, Vec<F>)> {
    let inner = d.heads * d.head_dim;
    let scale = F::one() / F::of(d.head_dim as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![F::zero(); d.batch * d.seq * inner];
    let mut probs = vec![F::zero(); d.batch * d.heads * d.seq * d.seq];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            let pbase = (b * d.heads + h) * d.seq * d.seq;
            for i in 0..d.seq {
                let qi = &qd[(b * d.seq + i) * inner + off..][..d.head_dim];
                let prow = &mut probs[pbase + i * d.seq..pbase + (i + 1) * d.seq];
                for j in 0..=i {
                    let kj = &kd[(b * d.seq + j) * inner + off..][..d.head_dim];
                    let dot: F = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                    prow[j] = dot * scale;
                }
                super::softmax_in_place(&mut prow[..=i]);
                let orow = &mut out[(b * d.seq + i) * inner + off..][..d.head_dim];
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &vd[(b * d.seq + j) * inner + off..][..d.head_dim];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
    }
    let out = Tensor::new(q.shape().to_vec(), out)?.ensure_finite("causal_attention")?;
    Ok((out, probs))
}

fn attention_backward<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &[F],
    g: &Tensor<F>,
    d: AttnDims,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let inner = d.heads * d.head_dim;
    let scale = F::one() / F::of(d.head_dim as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![F::zero(); qd.len()];
    let mut dk = vec![F::zero(); kd.len()];
    let mut dv = vec![F::zero(); vd.len()];
    let mut dp = vec![F::zero(); d.seq];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            let pbase = (b * d.heads + h) * d.seq * d.seq;
            let at = |i: usize| (b * d.seq + i) * inner + off;
            for i in 0..d.seq {
                let prow = &probs[pbase + i * d.seq..][..=i];
                let gi = &gd[at(i)..][..d.head_dim];
                let mut weighted = F::zero();
                for j in 0..=i {
                    let vj = &vd[at(j)..][..d.head_dim];
                    dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    weighted = weighted + prow[j] * dp[j];
                    let dvj = &mut dv[at(j)..][..d.head_dim];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o = *o + prow[j] * x;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let (qi, kj) = (at(i), at(j));
                    for c in 0..d.head_dim {
                        dq[qi + c] = dq[qi + c] + ds * kd[kj + c];
                        dk[kj + c] = dk[kj + c] + ds * qd[qi + c];
                    }
                }
            }
        }
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), dq)?,
        Tensor::new(shape.clone(), dk)?,
        Tensor::new(shape, dv)?,
    ))
}
