use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{self, rm, rm_t};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: NodeId,
}

impl Var {
    pub fn id(self) -> NodeId {
        self.id
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    Gelu(Var),
    Exp(Var),
    Clamp { x: Var, lo: S, hi: S },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmaxPick { x: Var, targets: Vec<usize> },
    CrossEntropy { x: Var, targets: Vec<usize> },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are only ever pushed, so every
/// node's parents precede it and the node order is a topological order.
///
/// A tape is confined to one thread (it is `!Sync`); frozen parameters are
/// shared between tapes through `Arc<Tensor>`.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    frozen: RefCell<HashSet<NodeId>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<S: Scalar> {
    map: HashMap<NodeId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.map.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.map.remove(&v.id)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.map.keys().copied()
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            frozen: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.frozen.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let finite_inputs = self.parents(&op).iter().all(|p| self.value(*p).is_finite());
            debug_assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var { id: nodes.len() - 1 }
    }

    fn push_op(&self, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.parents(&op).iter().any(|p| self.requires_grad(*p));
        self.push(value, op, rg)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<S>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var { id: nodes.len() - 1 }
    }

    /// Frozen leaf: member of the frozen set, never receives a gradient.
    pub fn frozen(&self, value: Arc<Tensor<S>>) -> Var {
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                op: Op::Leaf,
                requires_grad: false,
            });
            Var { id: nodes.len() - 1 }
        };
        self.frozen.borrow_mut().insert(v.id);
        v
    }

    /// Input data that is neither trained nor frozen (tokens, targets, ...).
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn is_frozen(&self, v: Var) -> bool {
        self.frozen.borrow().contains(&v.id)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Parent ids of a node, in operand order.
    pub fn parent_ids(&self, v: Var) -> Vec<NodeId> {
        self.parents(&self.nodes.borrow()[v.id].op)
            .into_iter()
            .map(|p| p.id)
            .collect()
    }

    fn parents(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Minimum(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a) => vec![*a],
            Op::Clamp { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::LogSoftmaxPick { x, .. }
            | Op::CrossEntropy { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", &av)?;
        let (k2, n) = as_matrix("matmul", &bv)?;
        if k != k2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(m, k, n, av.data(), rm(k), bv.data(), rm(n), &mut out, false);
        Ok(self.push_op(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = as_matrix("transpose2d", &av)?;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(t, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(t, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(t, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push_op(t, Op::Minimum(a, b)))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push_op(t, Op::Scale(a, c))
    }

    /// Adds `bias` (length `cols`) to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.numel() != xv.cols() {
            return Err(shape_err("add_row", &xv, &bv));
        }
        let mut data = xv.data().to_vec();
        kernels::add_row_bias(&mut data, bv.data());
        Ok(self.push_op(Tensor::from_parts(xv.shape().to_vec(), data), Op::AddRow(x, bias)))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.push_op(t, Op::Gelu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push_op(t, Op::Exp(a))
    }

    /// Clamp into `[lo, hi]`; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&self, x: Var, lo: S, hi: S) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push_op(t, Op::Clamp { x, lo, hi })
    }

    /// Layer norm over the last dimension followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c || gv.rank() != 1 || bv.rank() != 1 {
            return Err(shape_err("layer_norm_lastdim", &xv, &gv));
        }
        let rows = xv.rows();
        let mut out = vec![S::zero(); xv.numel()];
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = r * c..(r + 1) * c;
            inv_std.push(kernels::layer_norm_row(
                &xv.data()[s.clone()],
                gv.data(),
                bv.data(),
                eps,
                &mut out[s.clone()],
                &mut xhat[s],
            ));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- shape ops ------------------------------------------------------

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = as_matrix("embedding_gather", &tv)?;
        if ids.is_empty() {
            return Err(Error::contract("embedding_gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rank() != 2 || pv.cols() != d {
                return Err(shape_err("concat_rows", &self.value(*first), &pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        Ok(self.push_op(Tensor::from_parts(vec![rows, d], out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix("slice_rows", &xv)?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                what: "slice_rows end",
                index: start + len,
                bound: r,
            });
        }
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push_op(Tensor::from_parts(vec![len, c], out), Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix("slice_cols", &xv)?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "slice_cols end",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        Ok(self.push_op(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let r = vals[0].rows();
        for v in &vals {
            if v.rank() != 2 || v.rows() != r {
                return Err(shape_err("concat_cols", &self.value(*first), v));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec())))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum_all());
        self.push_op(t, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = S::from_usize(av.numel()).unwrap();
        let t = Tensor::scalar(av.sum_all() / n);
        self.push_op(t, Op::Mean(a))
    }

    // ---- probability ----------------------------------------------------

    pub fn softmax_lastdim(&self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last dimension of a matrix where row `i` may only see
    /// columns `j <= i + offset`.
    pub fn softmax_causal(&self, x: Var, offset: usize) -> Var {
        self.softmax_masked(x, Some(offset))
    }

    fn softmax_masked(&self, x: Var, causal: Option<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let valid = causal.map(|o| (i + o + 1).min(c)).unwrap_or(c);
            kernels::softmax_row(row, valid);
        }
        self.push_op(Tensor::from_parts(xv.shape().to_vec(), out), Op::Softmax(x))
    }

    /// Per-row `log softmax(x)[t, targets[t]]`, shape `[T]`.
    pub fn log_softmax_pick(&self, x: Var, targets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (t, v) = as_matrix("log_softmax_pick", &xv)?;
        check_targets(targets, t, v)?;
        let out = (0..t)
            .map(|i| xv.at(i, targets[i]) - kernels::log_sum_exp(xv.row(i)))
            .collect();
        Ok(self.push_op(
            Tensor::from_parts(vec![t], out),
            Op::LogSoftmaxPick {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let xv = self.value(logits);
        let (t, v) = as_matrix("cross_entropy_from_logits", &xv)?;
        check_targets(targets, t, v)?;
        let total: S = (0..t)
            .map(|i| kernels::log_sum_exp(xv.row(i)) - xv.at(i, targets[i]))
            .sum();
        let loss = total / S::from_usize(t).unwrap();
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: logits,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse accumulation from a scalar `loss`. Returns gradients for every
    /// trainable leaf that influences the loss; frozen leaves and constants
    /// never appear.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        let frozen = self.frozen.borrow();
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                if !frozen.contains(&id) {
                    out.insert(id, g);
                }
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { map: out })
    }
}

fn check_targets(targets: &[usize], t: usize, v: usize) -> Result<()> {
    if targets.len() != t {
        return Err(Error::Shape {
            op: "targets",
            lhs: vec![t],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
        return Err(Error::Index {
            what: "target vocabulary",
            index: bad,
            bound: v,
        });
    }
    Ok(())
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    g: impl FnOnce() -> Tensor<S>,
) {
    if !nodes[v.id].requires_grad {
        return;
    }
    let g = g();
    match &mut grads[v.id] {
        Some(acc) => acc.add_assign_tensor(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let val = |v: Var| -> &Tensor<S> { &nodes[v.id].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            accumulate(nodes, grads, *a, || {
                // dA = dC · Bᵀ
                let mut out = vec![S::zero(); m * k];
                kernels::gemm(m, n, k, g.data(), rm(n), bv.data(), rm_t(n), &mut out, false);
                Tensor::from_parts(vec![m, k], out)
            });
            accumulate(nodes, grads, *b, || {
                // dB = Aᵀ · dC
                let mut out = vec![S::zero(); k * n];
                kernels::gemm(k, m, n, av.data(), rm_t(k), g.data(), rm(n), &mut out, false);
                Tensor::from_parts(vec![k, n], out)
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.clone());
            accumulate(nodes, grads, *b, || g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.clone());
            accumulate(nodes, grads, *b, || g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, || zip(g, bv, |gi, bi| gi * bi));
            accumulate(nodes, grads, *b, || zip(g, av, |gi, ai| gi * ai));
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
            accumulate(nodes, grads, *a, || mask(g, &pick_a, true));
            accumulate(nodes, grads, *b, || mask(g, &pick_a, false));
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, || g.map(|x| x * *c)),
        Op::AddRow(x, bias) => {
            accumulate(nodes, grads, *x, || g.clone());
            accumulate(nodes, grads, *bias, || {
                let c = g.cols();
                let mut out = vec![S::zero(); c];
                for row in g.data().chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += *v;
                    }
                }
                Tensor::from_parts(vec![c], out)
            });
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || zip(g, av, |gi, xi| gi * kernels::gelu_grad(xi)));
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, || zip(g, y, |gi, yi| gi * yi)),
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, || {
                zip(g, xv, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { S::zero() })
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let c = gv.numel();
            let n = S::from_usize(c).unwrap();
            accumulate(nodes, grads, *x, || {
                let mut out = vec![S::zero(); g.numel()];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let s = r * c..(r + 1) * c;
                    let gr = &g.data()[s.clone()];
                    let xh = &xhat[s.clone()];
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        out[s.start + j] = istd / n * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), out)
            });
            accumulate(nodes, grads, *gain, || {
                let mut out = vec![S::zero(); c];
                for (row, xr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        out[j] += row[j] * xr[j];
                    }
                }
                Tensor::from_parts(vec![c], out)
            });
            accumulate(nodes, grads, *bias, || {
                let mut out = vec![S::zero(); c];
                for row in g.data().chunks(c) {
                    for j in 0..c {
                        out[j] += row[j];
                    }
                }
                Tensor::from_parts(vec![c], out)
            });
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            accumulate(nodes, grads, *table, || {
                let d = tv.cols();
                let mut out = Tensor::zeros(tv.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * d..(i + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += *v;
                    }
                }
                out
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let len = pv.numel();
                let o = offset;
                accumulate(nodes, grads, *p, || {
                    Tensor::from_parts(pv.shape().to_vec(), g.data()[o..o + len].to_vec())
                });
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, || {
                let mut out = Tensor::zeros(xv.shape());
                let c = xv.cols();
                out.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                out
            });
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut offset = 0;
            for p in parts {
                let pc = val(*p).cols();
                let o = offset;
                accumulate(nodes, grads, *p, || {
                    let mut out = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        out.extend_from_slice(&g.data()[i * total + o..i * total + o + pc]);
                    }
                    Tensor::from_parts(vec![rows, pc], out)
                });
                offset += pc;
            }
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, || {
                let mut out = Tensor::zeros(xv.shape());
                let c = xv.cols();
                let len = g.cols();
                for i in 0..g.rows() {
                    out.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                out
            });
        }
        Op::Transpose(a) => {
            accumulate(nodes, grads, *a, || {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                Tensor::from_parts(vec![c, r], out)
            });
        }
        Op::Sum(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || Tensor::full(av.shape(), g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let n = S::from_usize(av.numel()).unwrap();
            accumulate(nodes, grads, *a, || Tensor::full(av.shape(), g.item() / n));
        }
        Op::Softmax(a) => {
            accumulate(nodes, grads, *a, || {
                let c = y.cols();
                let mut out = vec![S::zero(); y.numel()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Tensor::from_parts(y.shape().to_vec(), out)
            });
        }
        Op::LogSoftmaxPick { x, targets } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, || {
                softmax_minus_onehot(xv, targets, |t| g.data()[t])
            });
        }
        Op::CrossEntropy { x, targets } => {
            let xv = val(*x);
            let scale = g.item() / S::from_usize(targets.len()).unwrap();
            accumulate(nodes, grads, *x, || {
                // d(-logp)/dx = softmax - onehot
                softmax_minus_onehot(xv, targets, |_| -scale)
            });
        }
    }
}

/// Row `t` receives `w(t) * (onehot(target_t) - softmax(x_t))`.
fn softmax_minus_onehot<S: Scalar>(
    x: &Tensor<S>,
    targets: &[usize],
    w: impl Fn(usize) -> S,
) -> Tensor<S> {
    let v = x.cols();
    let mut out = x.data().to_vec();
    for (t, row) in out.chunks_mut(v).enumerate() {
        kernels::softmax_row(row, v);
        let wt = w(t);
        for (j, p) in row.iter_mut().enumerate() {
            let onehot = if j == targets[t] { S::one() } else { S::zero() };
            *p = wt * (onehot - *p);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn mask<S: Scalar>(g: &Tensor<S>, pick: &[bool], keep_when: bool) -> Tensor<S> {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(pick)
            .map(|(&x, &p)| if p == keep_when { x } else { S::zero() })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        assert_eq!(tape.value(tape.matmul(a, b).unwrap()).item(), 6.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(tape.value(tape.softmax_lastdim(x)).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[1, 2], &[0.0, 2f64.ln()]));
        let p = tape.value(tape.softmax_lastdim(x));
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.value(tape.cross_entropy(x, &[0]).unwrap()).item();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let x = tape.constant(t(&[1, 3], &[30.0, 0.0, 0.0]));
        assert!(tape.value(tape.cross_entropy(x, &[0]).unwrap()).item() < 1e-9);

        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(Error::Index { index: 3, .. })
        ));
    }

    #[test]
    fn shape_op_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::from_parts(vec![3, 2], (0..6).map(f64::from).collect()));
        let b = tape.constant(Tensor::<f64>::from_parts(vec![8, 2], (6..22).map(f64::from).collect()));
        let c = tape.value(tape.concat_rows(&[a, b]).unwrap());
        assert_eq!(c.shape(), &[11, 2]);
        assert_eq!(c.data(), (0..22).map(f64::from).collect::<Vec<_>>().as_slice());

        let row = tape.constant(t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let g = tape.constant(Tensor::ones(&[4]));
        let z = tape.constant(Tensor::zeros(&[4]));
        let n = tape.value(tape.layer_norm(row, g, z, 1e-5).unwrap());
        assert!(n.data().iter().all(|&v| v == 0.0));

        let table = tape.constant(Tensor::<f64>::from_parts(vec![10, 4], (0..40).map(f64::from).collect()));
        let e = tape.value(tape.gather(table, &[3, 3]).unwrap());
        assert_eq!(e.row(0), &[12.0, 13.0, 14.0, 15.0]);
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn backward_trivial_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64));
        let y = tape.leaf(Tensor::scalar(3.0f64));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.frozen(Arc::new(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])));
        let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.contains(x));
        assert!(!g.contains(w));
        assert!(tape.is_frozen(w));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn parents_precede_children() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.transpose(a).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax_lastdim(c);
        let e = tape.sum(d);
        for v in [b, c, d, e] {
            assert!(tape.parent_ids(v).iter().all(|&p| p < v.id()));
        }
    }
}
