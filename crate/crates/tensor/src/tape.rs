//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in creation order, so the node vector is
//! already a topological order and the backward sweep is a single reverse pass.

use std::cell::{Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// `x[.., D] + b[D]`
    BiasAdd(NodeId, NodeId),
    /// `x[.., D] * g[D]`
    ChannelScale(NodeId, NodeId),
    /// `x[R, D] * s[R]`
    RowScale(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: NodeId,
        outer: usize,
        src_chunk: usize,
        offset: usize,
    },
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Silu(NodeId),
    Sum(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Normalize {
        x: NodeId,
        d: usize,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    CausalConv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::ChannelScale(..) => "channel_scale",
            Op::RowScale(..) => "row_scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::Silu(..) => "silu",
            Op::Sum(..) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::Normalize { .. } => "normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::CausalConv3d { .. } => "causal_conv3d",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        let shape = self.shapes[id].as_ref()?;
        Some(Tensor::new(shape.clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of a leaf, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents(&op).into_iter().any(|p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| TensorError::Dimension("concat of zero tensors".into()))?
            .shape();
        if axis >= first.len() {
            return Err(TensorError::Dimension(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(vars.len());
        for v in vars {
            let s = v.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::shape("concat", &first, &s));
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis] * inner);
        }
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (v, &c) in vars.iter().zip(&chunks) {
                    data.extend_from_slice(&nodes[v.id].value.data()[o * c..(o + 1) * c]);
                }
            }
        }
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                outer,
                chunks,
            },
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes
            .iter()
            .zip(&grads)
            .map(|(node, g)| g.as_ref().map(|_| node.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::BiasAdd(a, b)
        | Op::ChannelScale(a, b)
        | Op::RowScale(a, b)
        | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Silu(a)
        | Op::Sum(a) => vec![*a],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Narrow { x, .. }
        | Op::Gather { x, .. }
        | Op::Softmax { x, .. }
        | Op::Normalize { x, .. } => vec![*x],
        Op::Conv2d { x, w, b, .. } | Op::CausalConv3d { x, w, b, .. } => {
            let mut p = vec![*x, *w];
            p.extend(b.iter().copied());
            p
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: NodeId| nodes[i].value.data();
    let shape = |i: NodeId| nodes[i].value.shape();
    let want = |i: NodeId| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if want(*b) {
                accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if want(*a) {
                let c = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                accumulate(nodes, grads, *a, c);
            }
            if want(*b) {
                let c = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(nodes, grads, *b, c);
            }
        }
        Op::Scale(a, s) => {
            accumulate(nodes, grads, *a, g.iter().map(|v| v * s).collect());
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::BiasAdd(x, b) => {
            accumulate(nodes, grads, *x, g.to_vec());
            if want(*b) {
                let d = val(*b).len();
                let mut gb = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::ChannelScale(x, s) => {
            let sv = val(*s);
            let d = sv.len();
            if want(*x) {
                let c = g
                    .chunks_exact(d)
                    .flat_map(|row| row.iter().zip(sv).map(|(g, s)| g * s))
                    .collect();
                accumulate(nodes, grads, *x, c);
            }
            if want(*s) {
                let mut gs = vec![0.0; d];
                for (row, xrow) in g.chunks_exact(d).zip(val(*x).chunks_exact(d)) {
                    for ((acc, g), x) in gs.iter_mut().zip(row).zip(xrow) {
                        *acc += g * x;
                    }
                }
                accumulate(nodes, grads, *s, gs);
            }
        }
        Op::RowScale(x, s) => {
            let sv = val(*s);
            let d = g.len() / sv.len();
            if want(*x) {
                let c = g
                    .chunks_exact(d)
                    .zip(sv)
                    .flat_map(|(row, s)| row.iter().map(move |g| g * s))
                    .collect();
                accumulate(nodes, grads, *x, c);
            }
            if want(*s) {
                let gs = g
                    .chunks_exact(d)
                    .zip(val(*x).chunks_exact(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, x)| g * x).sum())
                    .collect();
                accumulate(nodes, grads, *s, gs);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if want(*a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(g, val(*b), m, n, k));
            }
            if want(*b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(val(*a), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (shape(*a)[0], shape(*a)[1]);
            accumulate(nodes, grads, *a, kernels::transpose(g, c, r));
        }
        Op::Concat {
            inputs,
            outer,
            chunks,
        } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&inp, &c) in inputs.iter().zip(chunks) {
                if want(inp) {
                    let mut gi = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        gi.extend_from_slice(&g[o * total + offset..o * total + offset + c]);
                    }
                    accumulate(nodes, grads, inp, gi);
                }
                offset += c;
            }
        }
        Op::Narrow {
            x,
            outer,
            src_chunk,
            offset,
        } => {
            let c = g.len() / outer;
            let mut gx = vec![0.0; outer * src_chunk];
            for o in 0..*outer {
                gx[o * src_chunk + offset..o * src_chunk + offset + c]
                    .copy_from_slice(&g[o * c..(o + 1) * c]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gather { x, index } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (gv, &i) in g.iter().zip(index) {
                gx[i] += gv;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Silu(x) => {
            let c = g
                .iter()
                .zip(val(*x))
                .map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(nodes, grads, *x, c);
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]);
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = nodes[id].value.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..*len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Normalize { x, d, rstd } => {
            let y = nodes[id].value.data();
            let d = *d;
            let mut gx = vec![0.0; y.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mean_g: f64 = gr.iter().sum::<f64>() / d as f64;
                let mean_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = rs * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let geom = kernels::Conv2dGeom::new(shape(*x), shape(*w), *stride, *pad)
                .expect("validated in forward");
            if want(*x) {
                accumulate(nodes, grads, *x, geom.backward_input(g, val(*w)));
            }
            if want(*w) {
                accumulate(nodes, grads, *w, geom.backward_weight(g, val(*x)));
            }
            if let Some(b) = b {
                if want(*b) {
                    accumulate(nodes, grads, *b, kernels::channel_sums(g, geom.out_c));
                }
            }
        }
        Op::CausalConv3d { x, w, b, stride } => {
            let geom = kernels::CausalConv3dGeom::new(shape(*x), shape(*w), *stride)
                .expect("validated in forward");
            if want(*x) {
                accumulate(nodes, grads, *x, geom.backward_input(g, val(*w)));
            }
            if want(*w) {
                accumulate(nodes, grads, *w, geom.backward_weight(g, val(*x)));
            }
            if let Some(b) = b {
                if want(*b) {
                    accumulate(nodes, grads, *b, kernels::channel_sums(g, geom.out_c));
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.value(self.id).numel()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::shape(op, &a, &b));
        }
        Ok(())
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Var<'t>> {
        self.same_shape(other, op)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            a.zip_with(&b, f)?
        };
        self.tape.push(value, mk(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|v| v * s);
        self.tape.push(value, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|v| v + s);
        self.tape.push(value, Op::AddScalar(self.id))
    }

    fn trailing(&self, other: &Var<'t>, op: &'static str) -> Result<usize> {
        let (xs, bs) = (self.shape(), other.shape());
        let d = *xs.last().unwrap_or(&0);
        if bs.iter().product::<usize>() != d {
            return Err(TensorError::shape(op, &xs, &bs));
        }
        Ok(d)
    }

    /// Adds `b[D]` to every row of `x[.., D]`.
    pub fn bias_add(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let d = self.trailing(b, "bias_add")?;
        let mut value = self.value();
        {
            let bv = self.tape.value(b.id);
            for row in value.data_mut().chunks_exact_mut(d) {
                for (x, b) in row.iter_mut().zip(bv.data()) {
                    *x += b;
                }
            }
        }
        self.tape.push(value, Op::BiasAdd(self.id, b.id))
    }

    /// Multiplies every row of `x[.., D]` by `g[D]`.
    pub fn channel_scale(&self, g: &Var<'t>) -> Result<Var<'t>> {
        let d = self.trailing(g, "channel_scale")?;
        let mut value = self.value();
        {
            let gv = self.tape.value(g.id);
            for row in value.data_mut().chunks_exact_mut(d) {
                for (x, g) in row.iter_mut().zip(gv.data()) {
                    *x *= g;
                }
            }
        }
        self.tape.push(value, Op::ChannelScale(self.id, g.id))
    }

    /// Multiplies row `i` of `x[R, D]` by `s[i]`.
    pub fn row_scale(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let xs = self.shape();
        let ss = s.shape();
        let rows = ss.iter().product::<usize>();
        if xs.len() != 2 || xs[0] != rows {
            return Err(TensorError::shape("row_scale", &xs, &ss));
        }
        let mut value = self.value();
        {
            let sv = self.tape.value(s.id);
            for (row, s) in value.data_mut().chunks_exact_mut(xs[1]).zip(sv.data()) {
                for x in row {
                    *x *= s;
                }
            }
        }
        self.tape.push(value, Op::RowScale(self.id, s.id))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::shape("matmul", &a, &b));
        }
        let data = {
            let av = self.tape.value(self.id);
            let bv = self.tape.value(other.id);
            kernels::matmul(av.data(), bv.data(), a[0], a[1], b[1])
        };
        self.tape.push(
            Tensor::new(vec![a[0], b[1]], data)?,
            Op::MatMul(self.id, other.id),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "transpose needs rank 2, got {s:?}"
            )));
        }
        let data = kernels::transpose(self.tape.value(self.id).data(), s[0], s[1]);
        self.tape
            .push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        self.tape.push(value, Op::Reshape(self.id))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::Dimension(format!(
                "narrow({axis}, {start}, {len}) out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src_chunk = s[axis] * inner;
        let offset = start * inner;
        let c = len * inner;
        let mut data = Vec::with_capacity(outer * c);
        {
            let v = self.tape.value(self.id);
            for o in 0..outer {
                data.extend_from_slice(
                    &v.data()[o * src_chunk + offset..o * src_chunk + offset + c],
                );
            }
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        self.tape.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow {
                x: self.id,
                outer,
                src_chunk,
                offset,
            },
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Dimension(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let data = {
            let v = self.tape.value(self.id);
            index.iter().map(|&i| v.data()[i]).collect()
        };
        self.tape.push(
            Tensor::new(shape.to_vec(), data)?,
            Op::Gather { x: self.id, index },
        )
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| x / (1.0 + (-x).exp()));
        self.tape.push(value, Op::Silu(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::Dimension(format!(
                "softmax axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut value = self.value();
        {
            let y = value.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| y[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (y[at(l)] - max).exp();
                        y[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        y[at(l)] /= z;
                    }
                }
            }
        }
        self.tape.push(
            value,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
        )
    }

    /// Zero-mean, unit-variance rows over the last dimension with `1/sqrt(var + eps)`.
    pub fn normalize(&self, eps: f64) -> Result<Var<'t>> {
        self.normalize_impl(eps, false)
    }

    /// Like [`Var::normalize`] with `eps = 0`, except rows whose variance
    /// vanishes map to zero instead of dividing by zero.
    pub fn standardize(&self) -> Result<Var<'t>> {
        self.normalize_impl(0.0, true)
    }

    fn normalize_impl(&self, eps: f64, degenerate_zero: bool) -> Result<Var<'t>> {
        let s = self.shape();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::Dimension("normalize over empty axis".into()));
        }
        let mut value = self.value();
        let rows = value.numel() / d;
        let mut rstd = Vec::with_capacity(rows);
        for row in value.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = if degenerate_zero && var <= 1e-24 {
                0.0
            } else {
                1.0 / (var + eps).sqrt()
            };
            for x in row.iter_mut() {
                *x = (*x - mean) * rs;
            }
            rstd.push(rs);
        }
        self.tape.push(
            value,
            Op::Normalize {
                x: self.id,
                d,
                rstd,
            },
        )
    }

    /// 2-D convolution applied independently to each frame of `x[C, T, H, W]`
    /// (or to a single image `x[C, H, W]`) with zero padding.
    pub fn conv2d(
        &self,
        w: &Var<'t>,
        b: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let xs = self.shape();
        let image = xs.len() == 3;
        let x = if image {
            self.reshape(&[xs[0], 1, xs[1], xs[2]])?
        } else {
            *self
        };
        let geom = kernels::Conv2dGeom::new(&x.shape(), &w.shape(), stride, pad)?;
        if let Some(b) = b {
            if b.shape() != [geom.out_c] {
                return Err(TensorError::shape("conv2d bias", &b.shape(), &[geom.out_c]));
            }
        }
        let data = {
            let xv = self.tape.value(x.id);
            let wv = self.tape.value(w.id);
            let bv = b.map(|b| self.tape.value(b.id).data().to_vec());
            geom.forward(xv.data(), wv.data(), bv.as_deref())
        };
        let out = self.tape.push(
            Tensor::new(geom.out_shape(), data)?,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
        )?;
        if image {
            let s = out.shape();
            out.reshape(&[s[0], s[2], s[3]])
        } else {
            Ok(out)
        }
    }

    /// Temporal convolution over `x[C, T, H, W]` with kernel `w[O, C, kt, 1, 1]`.
    ///
    /// The input is left-padded with `kt - 1` copies of frame 0, so output step
    /// `tau` reads only frames `<= tau * stride`.
    pub fn causal_conv3d(
        &self,
        w: &Var<'t>,
        b: Option<&Var<'t>>,
        stride: usize,
    ) -> Result<Var<'t>> {
        let geom = kernels::CausalConv3dGeom::new(&self.shape(), &w.shape(), stride)?;
        if let Some(b) = b {
            if b.shape() != [geom.out_c] {
                return Err(TensorError::shape(
                    "causal_conv3d bias",
                    &b.shape(),
                    &[geom.out_c],
                ));
            }
        }
        let data = {
            let xv = self.tape.value(self.id);
            let wv = self.tape.value(w.id);
            let bv = b.map(|b| self.tape.value(b.id).data().to_vec());
            geom.forward(xv.data(), wv.data(), bv.as_deref())
        };
        self.tape.push(
            Tensor::new(geom.out_shape(), data)?,
            Op::CausalConv3d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
        let eye = tape.constant(Tensor::eye(2));
        assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_and_patch_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().value(), x.value());

        let ones = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = ones.conv2d(&k, None, 2, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(x.conv2d(&w, None, 1, 0).is_err());
        assert!(x.conv2d(&w, None, 1, 1).is_ok());
    }

    #[test]
    fn causal_conv3d_identity_and_divisibility() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 1, 3], |i| (i as f64).sin()));
        let w = tape.constant(Tensor::from_fn(&[2, 2, 1, 1, 1], |i| {
            if i == 0 || i == 3 {
                1.0
            } else {
                0.0
            }
        }));
        assert_eq!(x.causal_conv3d(&w, None, 1).unwrap().value(), x.value());
        let err = x.causal_conv3d(&w, None, 3).unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn causal_conv3d_ignores_future_frames() {
        let base = Tensor::from_fn(&[2, 8, 2, 2], |i| ((i * 7) % 11) as f64 / 11.0);
        let w = Tensor::from_fn(&[3, 2, 3, 1, 1], |i| (i as f64 * 0.37).cos());
        let run = |x: Tensor| {
            let tape = Tape::new();
            let x = tape.constant(x);
            let w = tape.constant(w.clone());
            x.causal_conv3d(&w, None, 2).unwrap().value()
        };
        let y0 = run(base.clone());
        let mut perturbed = base.clone();
        // frame 7 of both channels
        for c in 0..2 {
            for p in 0..4 {
                perturbed.data_mut()[c * 32 + 7 * 4 + p] += 1.0;
            }
        }
        let y1 = run(perturbed);
        let changed = |y: &Tensor, tau: usize| {
            (0..3).any(|o| {
                (0..4).any(|s| {
                    y0.data()[o * 16 + tau * 4 + s].to_bits()
                        != y.data()[o * 16 + tau * 4 + s].to_bits()
                })
            })
        };
        // step tau reads frames 2*tau - 1 ..= 2*tau + 1, so the last frame lands in the last step
        for tau in 0..4 {
            assert_eq!(changed(&y1, tau), tau == 3, "tau {tau}");
        }
        let mut p2 = base.clone();
        p2.data_mut()[3 * 4] += 1.0; // channel 0, frame 3
        let y2 = run(p2);
        for tau in 0..4 {
            assert_eq!(changed(&y2, tau), tau == 1 || tau == 2, "tau {tau}");
        }
    }

    #[test]
    fn layer_norm_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = x.normalize(1e-12).unwrap().value();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] - 1.0).abs() < 1e-9 && (y.data()[3] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn standardize_constant_is_zero_and_scale_free() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 5], 2.5));
        assert!(c
            .standardize()
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let x = Tensor::from_fn(&[1, 6], |i| (i as f64 * 1.3).sin());
        let a = tape.constant(x.clone()).standardize().unwrap().value();
        let b = tape
            .constant(x.map(|v| 7.0 * v))
            .standardize()
            .unwrap()
            .value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.3, 0.3]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(t(&[2], &[1000.0, 0.0]));
        assert_eq!(big.softmax(0).unwrap().value().data(), &[1.0, 0.0]);
        let m = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.7 - 2.0));
        let y = m.softmax(0).unwrap().value();
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| y.data()[r * 4 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(m.softmax(2).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(
            x.scale(10.0),
            Err(TensorError::NonFinite("scale"))
        ));
    }

    #[test]
    fn backward_visits_shared_nodes_once() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&sq).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn concat_narrow_gather() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        let n = c.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[1.0, 10.0, 3.0, 11.0]);
        let g = n.gather(vec![3, 3, 0], &[3]).unwrap();
        assert_eq!(g.value().data(), &[11.0, 11.0, 1.0]);
        let grads = tape.backward(g.sum().unwrap()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 2.0]);
    }
}
