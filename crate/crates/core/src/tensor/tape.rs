use std::cell::RefCell;

use super::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    GatherRows {
        table: usize,
        index: Vec<usize>,
    },
    Sigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Softplus {
        x: usize,
    },
    Softmax {
        x: usize,
        temperature: f64,
    },
    LogSoftmax {
        x: usize,
        temperature: f64,
    },
    Sum {
        x: usize,
        axis: Option<usize>,
    },
    Mean {
        x: usize,
        axis: Option<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    RowScale {
        x: usize,
        weight: usize,
    },
    SegmentSum {
        x: usize,
        segments: Vec<(usize, usize)>,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
    live_bytes: usize,
}

/// Records differentiable operations for one forward/backward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, when `var` is a grad-requiring leaf
    /// reachable from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the right shape.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

/// Operation catalog for [`Tape::apply`].
#[derive(Debug, Clone)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    GatherRows(Vec<usize>),
    Sigmoid,
    Softmax { temperature: f64 },
    LogSoftmax { temperature: f64 },
    Log,
    Exp,
    Mean(Option<usize>),
    Sum(Option<usize>),
    LayerNorm { eps: f64 },
    Attention { heads: usize, mask: Tensor },
    Relu,
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    AddBias,
    Scale(f64),
    RowScale,
    SegmentSum(Vec<(usize, usize)>),
    Softplus,
    L2NormalizeRows,
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::AddBias
            | OpKind::RowScale => 2,
            OpKind::LayerNorm { .. } | OpKind::Attention { .. } => 3,
            OpKind::Concat(_) => usize::MAX,
            _ => 1,
        }
    }
}

/// Additive causal mask `[n, n]`: 0 on and below the diagonal, -inf above.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(a) => {
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(a);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by recorded values.
    pub fn bytes_in_use(&self) -> usize {
        self.inner.borrow().live_bytes
    }

    /// Records a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf that receives gradient.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.live_bytes += value.byte_size();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn check(&self, vars: &[Var<'_>]) -> Result<()> {
        for v in vars {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::Contract("variables belong to different tapes".into()));
            }
        }
        Ok(())
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    /// Dispatches one catalog operation.
    pub fn apply<'t>(&'t self, kind: &OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        self.check(inputs)?;
        let arity = kind.arity();
        if arity != usize::MAX && inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{:?} takes {} inputs, got {}",
                kind,
                arity,
                inputs.len()
            )));
        }
        let x = inputs.first().copied().ok_or_else(|| Error::Contract("no inputs".into()))?;
        match kind {
            OpKind::Add => x.add(inputs[1]),
            OpKind::Sub => x.sub(inputs[1]),
            OpKind::Mul => x.mul(inputs[1]),
            OpKind::MatMul => x.matmul(inputs[1]),
            OpKind::GatherRows(idx) => x.gather_rows(idx),
            OpKind::Sigmoid => Ok(x.sigmoid()),
            OpKind::Softmax { temperature } => x.softmax(*temperature),
            OpKind::LogSoftmax { temperature } => x.log_softmax(*temperature),
            OpKind::Log => Ok(x.log()),
            OpKind::Exp => Ok(x.exp()),
            OpKind::Mean(axis) => x.mean(*axis),
            OpKind::Sum(axis) => x.sum(*axis),
            OpKind::LayerNorm { eps } => x.layer_norm(inputs[1], inputs[2], *eps),
            OpKind::Attention { heads, mask } => x.attention(inputs[1], inputs[2], *heads, mask),
            OpKind::Relu => Ok(x.relu()),
            OpKind::Concat(axis) => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => x.slice(*axis, *start, *end),
            OpKind::Transpose => x.transpose(),
            OpKind::AddBias => x.add_bias(inputs[1]),
            OpKind::Scale(f) => Ok(x.scale(*f)),
            OpKind::RowScale => x.row_scale(inputs[1]),
            OpKind::SegmentSum(segs) => x.segment_sum(segs),
            OpKind::Softplus => Ok(x.softplus()),
            OpKind::L2NormalizeRows => Ok(x.l2_normalize_rows()),
            OpKind::Reshape(shape) => x.reshape(shape),
        }
    }

    /// Concatenates along `axis`; all other dims must match.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.check(inputs)?;
        if inputs.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let (value, ids) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[inputs[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(shape_err("concat", format!("axis {} for shape {:?}", axis, first)));
            }
            let mut total = 0;
            for v in inputs {
                let s = inner.nodes[v.id].value.shape();
                if s.len() != first.len()
                    || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
                {
                    return Err(shape_err("concat", format!("{:?} vs {:?}", first, s)));
                }
                total += s[axis];
            }
            let mut out_shape = first.clone();
            out_shape[axis] = total;
            let (outer, _, inner_sz) = axis_split(&out_shape, axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &inner.nodes[v.id].value;
                    let len = t.shape()[axis] * inner_sz;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            (
                Tensor::new(out_shape, data)?,
                inputs.iter().map(|v| v.id).collect::<Vec<_>>(),
            )
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse recording order. The tape is
    /// consumed afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(&[loss])?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if loss_node_requires(nodes, loss.id) {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            backprop_node(nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn loss_node_requires(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            let d = nodes[*bias].value.numel();
            if let Some(gb) = acc(nodes, grads, *bias) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(x, d)| *x += factor * d);
            }
        }
        Op::MatMul { a, b } => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            if let Some(ga) = acc(nodes, grads, *a) {
                // ga[m,k] += g[m,n] · b^T
                gemm(m, n, k, g, n, 1, bt.data(), 1, n, ga, true);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // gb[k,n] += a^T · g
                gemm(k, m, n, at.data(), 1, k, g, n, 1, gb, true);
            }
        }
        Op::Transpose { x } => {
            let s = nodes[*x].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::GatherRows { table, index } => {
            let d = nodes[*table].value.last_dim();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut gt[src * d..(src + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Relu { x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Exp { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
        }
        Op::Log { x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
        }
        Op::Softplus { x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(xv[i]);
                }
            }
        }
        Op::Softmax { x, temperature } => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((yr, gr), xr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        xr[i] += yr[i] * (gr[i] - dot) / temperature;
                    }
                }
            }
        }
        Op::LogSoftmax { x, temperature } => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((yr, gr), xr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let gsum: f64 = gr.iter().sum();
                    for i in 0..d {
                        xr[i] += (gr[i] - yr[i].exp() * gsum) / temperature;
                    }
                }
            }
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let xs = nodes[*x].value.shape();
            let numel = nodes[*x].value.numel();
            let mean = matches!(node.op, Op::Mean { .. });
            if let Some(gx) = acc(nodes, grads, *x) {
                match axis {
                    None => {
                        let f = if mean { g[0] / numel as f64 } else { g[0] };
                        gx.iter_mut().for_each(|v| *v += f);
                    }
                    Some(a) => {
                        let (outer, len, inner) = axis_split(xs, *a);
                        let f = if mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    gx[(o * len + l) * inner + i] += g[o * inner + i] * f;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = node.value.last_dim();
            let gam = nodes[*gamma].value.data();
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        gg[i] += gr[i] * hr[i];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(x, d)| *x += d);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, ((gr, hr), xr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    for i in 0..d {
                        dxhat[i] = gr[i] * gam[i];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    let df = d as f64;
                    for i in 0..d {
                        xr[i] += inv / df * (df * dxhat[i] - s1 - hr[i] * s2);
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
        } => attention_backward(nodes, *q, *k, *v, *heads, probs, g, grads),
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, _, inner_sz) = axis_split(out_shape, *axis);
            let out_row = out_shape[*axis] * inner_sz;
            let mut offset = 0;
            for &id in inputs {
                let len = nodes[id].value.shape()[*axis] * inner_sz;
                if let Some(gx) = acc(nodes, grads, id) {
                    for o in 0..outer {
                        let src = &g[o * out_row + offset..o * out_row + offset + len];
                        gx[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, d)| *x += d);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner_sz) = axis_split(xs, *axis);
            let out_len = node.value.shape()[*axis];
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = (o * len + start) * inner_sz;
                    let src = o * out_len * inner_sz;
                    gx[dst..dst + out_len * inner_sz]
                        .iter_mut()
                        .zip(&g[src..src + out_len * inner_sz])
                        .for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::RowScale { x, weight } => {
            let xv = &nodes[*x].value;
            let wv = nodes[*weight].value.data();
            let d = xv.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (xr, gr)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    xr.iter_mut().zip(gr).for_each(|(x, d)| *x += d * wv[r]);
                }
            }
            if let Some(gw) = acc(nodes, grads, *weight) {
                for (r, (xr, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                    gw[r] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::SegmentSum { x, segments } => {
            let d = nodes[*x].value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (s, &(lo, hi)) in segments.iter().enumerate() {
                    let gr = &g[s * d..(s + 1) * d];
                    for r in lo..hi {
                        gx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, d)| *x += d);
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, ((yr, gr), xr)) in y
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        xr[i] += (gr[i] - yr[i] * dot) / norms[r];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    probs: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let n = nodes[q].value.shape()[0];
    let d = nodes[q].value.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let prow = &p[i * n..(i + 1) * n];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..n {
                let pij = prow[j];
                if pij == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &vv[j * d + off..j * d + off + dh];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for t in 0..dh {
                    dvj[t] += pij * gi[t];
                    s += gi[t] * vj[t];
                }
                dp[j] = s;
                dot += pij * s;
            }
            for j in 0..n {
                let pij = prow[j];
                if pij == 0.0 {
                    continue;
                }
                let ds = pij * (dp[j] - dot) * scale;
                let qi = &qv[i * d + off..i * d + off + dh];
                let kj = &kv[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    dq[i * d + off + t] += ds * kj[t];
                    dk[j * d + off + t] += ds * qi[t];
                }
            }
        }
    }
    for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gx) = acc(nodes, grads, id) {
            gx.iter_mut().zip(&buf).for_each(|(x, d)| *x += d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Per-head post-softmax weights `[heads, n, n]` of an attention output.
    pub fn attention_probs(&self) -> Option<(usize, Vec<f64>)> {
        match &self.tape.inner.borrow().nodes[self.id].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs.clone())),
            _ => None,
        }
    }

    /// Copy of this value with no gradient linkage.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            let data = node.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(node.value.shape().to_vec(), data).expect("same shape"),
                node.requires_grad,
            )
        };
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.tape.check(&[other])?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if a.shape() != b.shape() {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(&[bias])?;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let b = &inner.nodes[bias.id].value;
            if b.numel() != x.last_dim() || b.rank() > 1 && b.rows() != 1 {
                return Err(shape_err(
                    "add_bias",
                    format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                ));
            }
            let d = b.numel();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(v, c)| *v += c);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.tape.rg(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddBias { x: self.id, bias: bias.id }, rg))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale { x: self.id, factor }, |v| v * factor)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(&[other])?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, false);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id }, rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            if x.rank() != 2 {
                return Err(shape_err("transpose", format!("rank {}", x.rank())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose { x: self.id }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape { x: self.id }, rg))
    }

    /// Selects rows of a `[rows, d]` table.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner.nodes[self.id].value;
            if t.rank() != 2 {
                return Err(shape_err("gather_rows", format!("table shape {:?}", t.shape())));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(index.len() * d);
            for &i in index {
                if i >= rows {
                    return Err(Error::Bounds {
                        what: "gather_rows table",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![index.len(), d], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::GatherRows {
                table: self.id,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid { x: self.id }, sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu { x: self.id }, |v| v.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp { x: self.id }, f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log { x: self.id }, f64::ln)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus { x: self.id }, softplus)
    }

    fn row_softmax(self, temperature: f64, log: bool) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {}", temperature)));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let d = x.last_dim();
            let mut data = vec![0.0; x.numel()];
            for (xr, yr) in x.data().chunks(d).zip(data.chunks_mut(d)) {
                let max = xr
                    .iter()
                    .map(|v| v / temperature)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..d {
                    let e = (xr[i] / temperature - max).exp();
                    yr[i] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for i in 0..d {
                        yr[i] = xr[i] / temperature - max - lse;
                    }
                } else {
                    yr.iter_mut().for_each(|v| *v /= sum);
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.requires_grad();
        let op = if log {
            Op::LogSoftmax { x: self.id, temperature }
        } else {
            Op::Softmax { x: self.id, temperature }
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(self, temperature: f64) -> Result<Var<'t>> {
        self.row_softmax(temperature, false)
    }

    /// Log-softmax over the last axis of `x / temperature`.
    pub fn log_softmax(self, temperature: f64) -> Result<Var<'t>> {
        self.row_softmax(temperature, true)
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    let v = if mean { s / x.numel() as f64 } else { s };
                    Tensor::scalar(v)
                }
                Some(a) => {
                    if a >= x.rank() {
                        return Err(shape_err("reduce", format!("axis {} of {:?}", a, x.shape())));
                    }
                    let (outer, len, inner_sz) = axis_split(x.shape(), a);
                    let mut data = vec![0.0; outer * inner_sz];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner_sz {
                                data[o * inner_sz + i] += x.data()[(o * len + l) * inner_sz + i];
                            }
                        }
                    }
                    if mean {
                        data.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    Tensor::new(reduced_shape(x.shape(), axis), data)?
                }
            }
        };
        let rg = self.requires_grad();
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Sum over one axis, or everything when `axis` is `None`.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    /// Layer normalization over the last axis with affine scale and shift.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.check(&[gamma, beta])?;
        let (value, xhat, inv_std) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let gv = &inner.nodes[gamma.id].value;
            let bv = &inner.nodes[beta.id].value;
            let d = x.last_dim();
            if gv.numel() != d || bv.numel() != d {
                return Err(shape_err(
                    "layer_norm",
                    format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gv.shape(), bv.shape()),
                ));
            }
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for (r, xr) in x.data().chunks(d).enumerate() {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for i in 0..d {
                    let h = (xr[i] - mean) * inv;
                    xhat[r * d + i] = h;
                    out[r * d + i] = h * gv.data()[i] + bv.data()[i];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self`, `keys`, `values` are `[n, d]` with `d` split into `heads`
    /// contiguous slices. `mask` is an additive `[n, n]` mask; `-inf` entries
    /// get exactly zero weight. Every row needs at least one finite entry.
    pub fn attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        heads: usize,
        mask: &Tensor,
    ) -> Result<Var<'t>> {
        self.tape.check(&[keys, values])?;
        let (value, probs) = {
            let inner = self.tape.inner.borrow();
            let q = &inner.nodes[self.id].value;
            let k = &inner.nodes[keys.id].value;
            let v = &inner.nodes[values.id].value;
            if q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape() {
                return Err(shape_err(
                    "attention",
                    format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
                ));
            }
            let (n, d) = (q.shape()[0], q.shape()[1]);
            if heads == 0 || d % heads != 0 {
                return Err(shape_err("attention", format!("d {} not divisible by {} heads", d, heads)));
            }
            if mask.shape() != [n, n] {
                return Err(shape_err("attention", format!("mask {:?} for length {}", mask.shape(), n)));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd, md) = (q.data(), k.data(), v.data(), mask.data());
            let mut probs = vec![0.0; heads * n * n];
            let mut out = vec![0.0; n * d];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let prow = &mut probs[h * n * n + i * n..h * n * n + (i + 1) * n];
                    let qi = &qd[i * d + off..i * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        let m = md[i * n + j];
                        if m == f64::NEG_INFINITY {
                            prow[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &kd[j * d + off..j * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + m;
                        prow[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::Numeric(format!("attention row {} fully masked", i)));
                    }
                    let mut sum = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = if *pj == f64::NEG_INFINITY { 0.0 } else { (*pj - max).exp() };
                        sum += *pj;
                    }
                    prow.iter_mut().for_each(|p| *p /= sum);
                    let oi = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[j * d + off..j * d + off + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
            (Tensor::new(vec![n, d], out)?, probs)
        };
        let rg = self.tape.rg(&[self.id, keys.id, values.id]);
        self.tape.inner.borrow_mut().live_bytes += probs.len() * 8;
        Ok(self.tape.push(
            value,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            if axis >= x.rank() || start > end || end > x.shape()[axis] {
                return Err(shape_err(
                    "slice",
                    format!("[{}, {}) on axis {} of {:?}", start, end, axis, x.shape()),
                ));
            }
            let (outer, len, inner_sz) = axis_split(x.shape(), axis);
            let mut data = Vec::with_capacity(outer * (end - start) * inner_sz);
            for o in 0..outer {
                data.extend_from_slice(
                    &x.data()[(o * len + start) * inner_sz..(o * len + end) * inner_sz],
                );
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Multiplies row `r` of `[n, d]` by `weight[r]` (weight shaped `[n, 1]` or `[n]`).
    pub fn row_scale(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(&[weight])?;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let w = &inner.nodes[weight.id].value;
            if w.numel() != x.rows() {
                return Err(shape_err(
                    "row_scale",
                    format!("weight {:?} for input {:?}", w.shape(), x.shape()),
                ));
            }
            let d = x.last_dim();
            let mut data = x.data().to_vec();
            for (row, &f) in data.chunks_mut(d).zip(w.data()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.tape.rg(&[self.id, weight.id]);
        Ok(self.tape.push(
            value,
            Op::RowScale {
                x: self.id,
                weight: weight.id,
            },
            rg,
        ))
    }

    /// Row `s` of the output is the sum of input rows `segments[s].0 .. segments[s].1`.
    /// Empty segments give zero rows; segments may overlap.
    pub fn segment_sum(self, segments: &[(usize, usize)]) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let rows = x.rows();
            let d = x.last_dim();
            let mut data = vec![0.0; segments.len() * d];
            for (s, &(lo, hi)) in segments.iter().enumerate() {
                if lo > hi || hi > rows {
                    return Err(Error::Bounds {
                        what: "segment_sum rows",
                        index: hi,
                        len: rows,
                    });
                }
                let dst = &mut data[s * d..(s + 1) * d];
                for r in lo..hi {
                    dst.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
                }
            }
            Tensor::new(vec![segments.len(), d], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::SegmentSum {
                x: self.id,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(self) -> Var<'t> {
        let (value, norms) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let d = x.last_dim();
            let mut data = x.data().to_vec();
            let mut norms = Vec::with_capacity(x.rows());
            for row in data.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            (Tensor::new(x.shape().to_vec(), data).expect("same shape"), norms)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::L2NormalizeRows { x: self.id, norms }, rg)
    }
}
