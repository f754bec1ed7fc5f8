//! Recording tape and the differentiable operations defined on it.
//!
//! Every operation appends one node holding its forward value and enough
//! context to replay its vector-Jacobian product. Node ids are assigned in
//! creation order, so reverse id order is a valid topological order for
//! `backward`.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_into, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Negative slope used by attention scoring.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Reduction applied within each segment by [`Var::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Full,
    Row(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn at(self, i: usize, j: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Row(_) => j,
            Bcast::Scalar => 0,
        }
    }
}

/// Calls `f(i, ia, ib)` for every output index with the matching operand
/// indices, walking rows so no division is needed.
#[inline]
fn for_each_bcast(total: usize, ba: Bcast, bb: Bcast, mut f: impl FnMut(usize, usize, usize)) {
    let width = match (ba, bb) {
        (Bcast::Row(n), _) | (_, Bcast::Row(n)) => n,
        _ => total.max(1),
    };
    for base in (0..total).step_by(width) {
        for j in 0..width {
            let i = base + j;
            f(i, ba.at(i, j), bb.at(i, j));
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryOp,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
    },
    Maximum {
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryOp,
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        stride: usize,
    },
    SegmentReduce {
        a: usize,
        kind: SegmentKind,
        ids: Arc<Vec<usize>>,
        cols: usize,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        a: usize,
        ids: Arc<Vec<usize>>,
    },
    Gather {
        a: usize,
        idx: Arc<Vec<usize>>,
        cols: usize,
    },
    ScaleRows {
        a: usize,
        w: usize,
        cols: usize,
    },
    SumCols {
        a: usize,
        cols: usize,
    },
    SumAll {
        a: usize,
        scale: f64,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        end: usize,
        cols: usize,
    },
    Select {
        a: usize,
        index: usize,
    },
    Reshape {
        a: usize,
    },
    Mask {
        a: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Arc<Vec<usize>>,
        rows: Vec<usize>,
        classes: usize,
    },
    Bce {
        logits: usize,
        targets: Arc<Tensor>,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf does not require grad or no
    /// path connects it to the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
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

    /// Drops every recorded node. Requires exclusive access, so no `Var`
    /// handle can outlive the nodes it points to.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of intermediate nodes
    /// are released as soon as they have been propagated; leaf gradients are
    /// returned.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(
                    Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"),
                );
                continue;
            }
            propagate(&nodes, &mut grads, node, &g);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Zero-initialized gradient buffer for `id`, or `None` when the node does
/// not take part in differentiation.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let av = Arc::clone(&nodes[a].value);
            let bv = Arc::clone(&nodes[b].value);
            if let Some(ga) = slot(nodes, grads, a) {
                // dA = G · Bᵀ, with Bᵀ materialized so the inner loop is contiguous
                let bd = bv.data();
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                matmul_into(g, &bt, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                // dB = Aᵀ · G
                let ad = av.data();
                let mut at = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        at[p * m + i] = ad[i * k + p];
                    }
                }
                matmul_into(&at, g, gb, k, m, n);
            }
        }
        &Op::Binary { kind, a, b, ba, bb } => {
            let av = Arc::clone(&nodes[a].value);
            let bv = Arc::clone(&nodes[b].value);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(nodes, grads, a) {
                match kind {
                    BinaryOp::Add | BinaryOp::Sub => for_each_bcast(g.len(), ba, bb, |i, ia, _| ga[ia] += g[i]),
                    BinaryOp::Mul => for_each_bcast(g.len(), ba, bb, |i, ia, ib| ga[ia] += g[i] * bd[ib]),
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                match kind {
                    BinaryOp::Add => for_each_bcast(g.len(), ba, bb, |i, _, ib| gb[ib] += g[i]),
                    BinaryOp::Sub => for_each_bcast(g.len(), ba, bb, |i, _, ib| gb[ib] -= g[i]),
                    BinaryOp::Mul => for_each_bcast(g.len(), ba, bb, |i, ia, ib| gb[ib] += g[i] * ad[ia]),
                }
            }
        }
        &Op::Maximum { a, b } => {
            let av = Arc::clone(&nodes[a].value);
            let bv = Arc::clone(&nodes[b].value);
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x >= y)
                .collect();
            if let Some(ga) = slot(nodes, grads, a) {
                for (i, &gi) in g.iter().enumerate() {
                    if pick_a[i] {
                        ga[i] += gi;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (i, &gi) in g.iter().enumerate() {
                    if !pick_a[i] {
                        gb[i] += gi;
                    }
                }
            }
        }
        &Op::Unary { kind, a } => {
            let x = Arc::clone(&nodes[a].value);
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, a) {
                let xs = x.data();
                let ys = y.data();
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        UnaryOp::Relu => {
                            if xs[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Elu => {
                            if xs[i] > 0.0 {
                                1.0
                            } else {
                                ys[i] + 1.0
                            }
                        }
                        UnaryOp::Tanh => 1.0 - ys[i] * ys[i],
                        UnaryOp::Sigmoid => ys[i] * (1.0 - ys[i]),
                        UnaryOp::LeakyRelu(slope) => {
                            if xs[i] > 0.0 {
                                1.0
                            } else {
                                slope
                            }
                        }
                        UnaryOp::Scale(c) => c,
                    };
                    ga[i] += gi * d;
                }
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            stride,
        } => {
            let y = node.value.data();
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for s in 0..stride {
                        let base = o * len * stride + s;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * stride] * y[base + j * stride])
                            .sum();
                        for j in 0..len {
                            let i = base + j * stride;
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
        Op::SegmentReduce {
            a,
            kind,
            ids,
            cols,
            counts,
            argmax,
        } => {
            let (a, cols) = (*a, *cols);
            if let Some(ga) = slot(nodes, grads, a) {
                match kind {
                    SegmentKind::Sum | SegmentKind::Mean => {
                        for (e, &s) in ids.iter().enumerate() {
                            let scale = if *kind == SegmentKind::Mean {
                                1.0 / counts[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..cols {
                                ga[e * cols + j] += g[s * cols + j] * scale;
                            }
                        }
                    }
                    SegmentKind::Max => {
                        for (out_i, &src) in argmax.iter().enumerate() {
                            if src != usize::MAX {
                                ga[src] += g[out_i];
                            }
                        }
                    }
                }
            }
        }
        Op::SegmentSoftmax { a, ids } => {
            let y = node.value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for range in segment_ranges(ids) {
                    let dot: f64 = range.clone().map(|i| g[i] * y[i]).sum();
                    for i in range {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::Gather { a, idx, cols } => {
            let cols = *cols;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (e, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(&g[e * cols..(e + 1) * cols]) {
                        *o += gv;
                    }
                }
            }
        }
        &Op::ScaleRows { a, w, cols } => {
            let xv = Arc::clone(&nodes[a].value);
            let wv = Arc::clone(&nodes[w].value);
            if let Some(ga) = slot(nodes, grads, a) {
                for ((ga_row, g_row), &wr) in ga.chunks_mut(cols.max(1)).zip(g.chunks(cols.max(1))).zip(wv.data()) {
                    for (o, gi) in ga_row.iter_mut().zip(g_row) {
                        *o += gi * wr;
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, w) {
                let xs = xv.data();
                for ((o, g_row), x_row) in gw.iter_mut().zip(g.chunks(cols.max(1))).zip(xs.chunks(cols.max(1))) {
                    *o += g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        &Op::SumCols { a, cols } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (row, &gr) in ga.chunks_mut(cols.max(1)).zip(g.iter()) {
                    for o in row {
                        *o += gr;
                    }
                }
            }
        }
        &Op::SumAll { a, scale } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for o in ga.iter_mut() {
                    *o += g[0] * scale;
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, width) in parts {
                if let Some(gp) = slot(nodes, grads, id) {
                    for r in 0..*rows {
                        for j in 0..width {
                            gp[r * width + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += width;
            }
        }
        &Op::SliceCols {
            a,
            start,
            end,
            cols,
        } => {
            let width = end - start;
            if let Some(ga) = slot(nodes, grads, a) {
                let rows = g.len() / width.max(1);
                for r in 0..rows {
                    for j in 0..width {
                        ga[r * cols + start + j] += g[r * width + j];
                    }
                }
            }
        }
        &Op::Select { a, index } => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga[index] += g[0];
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv;
                }
            }
        }
        Op::Mask { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            rows,
            classes,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let scale = g[0] / rows.len() as f64;
                for &r in rows {
                    for c in 0..*classes {
                        let target = if labels[r] == c { 1.0 } else { 0.0 };
                        gl[r * classes + c] += scale * (probs[r * classes + c] - target);
                    }
                }
            }
        }
        Op::Bce {
            logits,
            targets,
            rows,
        } => {
            let x = Arc::clone(&nodes[*logits].value);
            if let Some(gl) = slot(nodes, grads, *logits) {
                let classes = x.cols();
                let scale = g[0] / (rows.len() * classes) as f64;
                for &r in rows {
                    for c in 0..classes {
                        let i = r * classes + c;
                        gl[i] += scale * (sigmoid(x.data()[i]) - targets.data()[i]);
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Contiguous index ranges of equal ids in a sorted id list.
fn segment_ranges(ids: &[usize]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= ids.len() {
            return None;
        }
        let s = ids[start];
        let mut end = start + 1;
        while end < ids.len() && ids[end] == s {
            end += 1;
        }
        let r = start..end;
        start = end;
        Some(r)
    })
}

/// Checks that segment ids are sorted and below `num_segments`.
pub fn validate_segments(ids: &[usize], num_segments: usize) -> Result<()> {
    for (i, &id) in ids.iter().enumerate() {
        if id >= num_segments {
            return Err(TensorError::SegmentOutOfRange { id, num_segments });
        }
        if i > 0 && ids[i - 1] > id {
            return Err(TensorError::UnsortedSegments {
                position: i,
                prev: ids[i - 1],
                next: id,
            });
        }
    }
    Ok(())
}

fn broadcast_pair(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Full));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if na == 1 {
        return Ok((b.to_vec(), Bcast::Scalar, Bcast::Full));
    }
    let is_row = |full: &[usize], row: &[usize]| {
        full.len() == 2
            && ((row.len() == 1 && row[0] == full[1])
                || (row.len() == 2 && row[0] == 1 && row[1] == full[1]))
    };
    if is_row(a, b) {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Row(a[1])));
    }
    if is_row(b, a) {
        return Ok((b.to_vec(), Bcast::Row(b[1]), Bcast::Full));
    }
    Err(TensorError::Broadcast {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn rows_of(mask: &[bool], n: usize) -> Result<Vec<usize>> {
    if mask.len() != n {
        return Err(TensorError::Invalid(format!(
            "mask length {} does not match {n} rows",
            mask.len()
        )));
    }
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(TensorError::EmptyMask);
    }
    Ok(rows)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn borrow_value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &*n[self.id].value)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn binary(self, kind: BinaryOp, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let op_name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let (shape, ba, bb) = broadcast_pair(op_name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = if ba == Bcast::Full && bb == Bcast::Full {
            match kind {
                BinaryOp::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
                BinaryOp::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
                BinaryOp::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            }
        } else {
            let mut out = vec![0.0; n];
            match kind {
                BinaryOp::Add => for_each_bcast(n, ba, bb, |i, ia, ib| out[i] = ad[ia] + bd[ib]),
                BinaryOp::Sub => for_each_bcast(n, ba, bb, |i, ia, ib| out[i] = ad[ia] - bd[ib]),
                BinaryOp::Mul => for_each_bcast(n, ba, bb, |i, ia, ib| out[i] = ad[ia] * bd[ib]),
            }
            out
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
                ba,
                bb,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    /// Elementwise maximum of two equally shaped values; ties favor `self`.
    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "maximum",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            value,
            Op::Maximum {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn unary(self, kind: UnaryOp) -> Var<'t> {
        let value = {
            let x = self.borrow_value();
            match kind {
                UnaryOp::Relu => x.map(|v| v.max(0.0)),
                UnaryOp::Elu => x.map(elu),
                UnaryOp::Tanh => x.map(f64::tanh),
                UnaryOp::Sigmoid => x.map(sigmoid),
                UnaryOp::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
                UnaryOp::Scale(c) => x.map(|v| c * v),
            }
        };
        self.tape
            .push(value, Op::Unary { kind, a: self.id }, &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu)
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(UnaryOp::Elu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(UnaryOp::LeakyRelu(slope))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::Scale(c))
    }

    /// Numerically stable softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (value, outer, len, stride) = {
            let x = self.borrow_value();
            let rank = x.rank();
            if axis >= rank || rank > 2 {
                return Err(TensorError::InvalidAxis {
                    op: "softmax",
                    axis,
                    rank,
                });
            }
            let (outer, len, stride) = match (rank, axis) {
                (1, _) => (1, x.numel(), 1),
                (_, 0) => (1, x.shape()[0], x.shape()[1]),
                _ => (x.shape()[0], x.shape()[1], 1),
            };
            let src = x.data();
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * len * stride + s;
                    let max = (0..len)
                        .map(|j| src[base + j * stride])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (src[base + j * stride] - max).exp();
                        out[base + j * stride] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[base + j * stride] /= sum;
                    }
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, outer, len, stride)
        };
        Ok(self.tape.push(
            value,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                stride,
            },
            &[self.id],
        ))
    }

    /// Per-segment sum, mean or max over the rows of an `[E×d]` value.
    /// Empty segments produce zero rows; max routes gradient to the first
    /// maximal row of each segment.
    pub fn segment_reduce(
        self,
        kind: SegmentKind,
        ids: &Arc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<Var<'t>> {
        let (value, counts, argmax, cols) = {
            let x = self.borrow_value();
            if x.rows() != ids.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "segment_reduce",
                    left: x.shape().to_vec(),
                    right: vec![ids.len()],
                });
            }
            validate_segments(ids, num_segments)?;
            let cols = x.cols();
            let src = x.data();
            let mut out = vec![0.0; num_segments * cols];
            let mut counts = vec![0usize; num_segments];
            let mut argmax = Vec::new();
            for &s in ids.iter() {
                counts[s] += 1;
            }
            match kind {
                SegmentKind::Sum | SegmentKind::Mean => {
                    for (e, &s) in ids.iter().enumerate() {
                        let dst = &mut out[s * cols..(s + 1) * cols];
                        for (o, &v) in dst.iter_mut().zip(&src[e * cols..(e + 1) * cols]) {
                            *o += v;
                        }
                    }
                    if kind == SegmentKind::Mean {
                        for (s, &c) in counts.iter().enumerate() {
                            if c > 0 {
                                let inv = 1.0 / c as f64;
                                for o in &mut out[s * cols..(s + 1) * cols] {
                                    *o *= inv;
                                }
                            }
                        }
                    }
                }
                SegmentKind::Max => {
                    argmax = vec![usize::MAX; num_segments * cols];
                    for (e, &s) in ids.iter().enumerate() {
                        for j in 0..cols {
                            let v = src[e * cols + j];
                            let slot = s * cols + j;
                            if argmax[slot] == usize::MAX || v > out[slot] {
                                out[slot] = v;
                                argmax[slot] = e * cols + j;
                            }
                        }
                    }
                }
            }
            let shape = if x.rank() == 2 {
                vec![num_segments, cols]
            } else {
                vec![num_segments]
            };
            (Tensor::new(shape, out)?, counts, argmax, cols)
        };
        Ok(self.tape.push(
            value,
            Op::SegmentReduce {
                a: self.id,
                kind,
                ids: Arc::clone(ids),
                cols,
                counts,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Softmax of edge scores within each segment. Accepts `[E]` or `[E×1]`.
    pub fn segment_softmax(self, ids: &Arc<Vec<usize>>, num_segments: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow_value();
            if x.numel() != ids.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "segment_softmax",
                    left: x.shape().to_vec(),
                    right: vec![ids.len()],
                });
            }
            validate_segments(ids, num_segments)?;
            let src = x.data();
            let mut out = vec![0.0; src.len()];
            for range in segment_ranges(ids) {
                let max = src[range.clone()]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in range.clone() {
                    out[i] = (src[i] - max).exp();
                    sum += out[i];
                }
                for i in range {
                    out[i] /= sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.tape.push(
            value,
            Op::SegmentSoftmax {
                a: self.id,
                ids: Arc::clone(ids),
            },
            &[self.id],
        ))
    }

    /// Row gather: `out[e] = self[idx[e]]`.
    pub fn gather_rows(self, idx: &Arc<Vec<usize>>) -> Result<Var<'t>> {
        let (value, cols) = {
            let x = self.borrow_value();
            let rows = x.rows();
            let cols = x.cols();
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
            }
            let shape = if x.rank() == 2 {
                vec![idx.len(), cols]
            } else {
                vec![idx.len()]
            };
            (Tensor::new(shape, out)?, cols)
        };
        Ok(self.tape.push(
            value,
            Op::Gather {
                a: self.id,
                idx: Arc::clone(idx),
                cols,
            },
            &[self.id],
        ))
    }

    /// Multiplies row `r` of `self` by `weights[r]`.
    pub fn scale_rows(self, weights: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weights);
        let x = self.value();
        let w = weights.value();
        if w.numel() != x.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for (row, &wr) in data.chunks_mut(cols.max(1)).zip(w.data()) {
            for v in row {
                *v *= wr;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(
            value,
            Op::ScaleRows {
                a: self.id,
                w: weights.id,
                cols,
            },
            &[self.id, weights.id],
        ))
    }

    /// Row sums of an `[R×C]` value, shaped `[R×1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let (value, cols) = {
            let x = self.borrow_value();
            let cols = x.cols();
            let data: Vec<f64> = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
            (
                Tensor::new(vec![x.rows(), 1], data).expect("row sums"),
                cols,
            )
        };
        self.tape
            .push(value, Op::SumCols { a: self.id, cols }, &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.borrow_value().data().iter().sum());
        self.tape.push(
            value,
            Op::SumAll {
                a: self.id,
                scale: 1.0,
            },
            &[self.id],
        )
    }

    pub fn mean(self) -> Var<'t> {
        let (value, scale) = {
            let x = self.borrow_value();
            let n = x.numel().max(1) as f64;
            (Tensor::scalar(x.data().iter().sum::<f64>() / n), 1.0 / n)
        };
        self.tape
            .push(value, Op::SumAll { a: self.id, scale }, &[self.id])
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, cols) = {
            let x = self.borrow_value();
            let cols = x.cols();
            if x.rank() != 2 || start >= end || end > cols {
                return Err(TensorError::Invalid(format!(
                    "slice_cols {start}..{end} invalid for shape {:?}",
                    x.shape()
                )));
            }
            let width = end - start;
            let mut out = Vec::with_capacity(x.rows() * width);
            for r in 0..x.rows() {
                out.extend_from_slice(&x.row(r)[start..end]);
            }
            (Tensor::new(vec![x.rows(), width], out)?, cols)
        };
        Ok(self.tape.push(
            value,
            Op::SliceCols {
                a: self.id,
                start,
                end,
                cols,
            },
            &[self.id],
        ))
    }

    /// Element `index` of a flat value, as a scalar.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow_value();
            if index >= x.numel() {
                return Err(TensorError::IndexOutOfRange {
                    op: "select",
                    index,
                    len: x.numel(),
                });
            }
            Tensor::scalar(x.data()[index])
        };
        Ok(self.tape.push(
            value,
            Op::Select { a: self.id, index },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Inverted dropout with an explicit seed. `p = 0` records nothing.
    pub fn dropout(self, p: f64, seed: u64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let (value, mask) = {
            let x = self.borrow_value();
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(x.shape().to_vec(), data)?, mask)
        };
        Ok(self
            .tape
            .push(value, Op::Mask { a: self.id, mask }, &[self.id]))
    }
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
    let tape = first.tape;
    let rows = first.value().rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        if v.rank() != 2 || v.rows() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: first.shape(),
                right: v.shape().to_vec(),
            });
        }
        widths.push(v.cols());
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.value();
        for r in 0..rows {
            out[r * total + offset..r * total + offset + w].copy_from_slice(v.row(r));
        }
        offset += w;
    }
    let value = Tensor::new(vec![rows, total], out)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(
        value,
        Op::ConcatCols {
            parts: ids.iter().copied().zip(widths).collect(),
            rows,
        },
        &ids,
    ))
}

/// Mean softmax cross-entropy over the rows selected by `mask`.
pub fn softmax_cross_entropy<'t>(
    logits: Var<'t>,
    labels: &Arc<Vec<usize>>,
    mask: &[bool],
) -> Result<Var<'t>> {
    let (value, probs, rows, classes) = {
        let x = logits.borrow_value();
        if x.rank() != 2 || labels.len() != x.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let rows = rows_of(mask, x.rows())?;
        let classes = x.cols();
        let mut probs = vec![0.0; x.numel()];
        let mut total = 0.0;
        for &r in &rows {
            let row = x.row(r);
            let label = labels[r];
            if label >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: label,
                    len: classes,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_sum).exp();
            }
            total += log_sum - row[label];
        }
        (
            Tensor::scalar(total / rows.len() as f64),
            probs,
            rows,
            classes,
        )
    };
    Ok(logits.tape.push(
        value,
        Op::CrossEntropy {
            logits: logits.id,
            probs,
            labels: Arc::clone(labels),
            rows,
            classes,
        },
        &[logits.id],
    ))
}

/// Mean sigmoid binary cross-entropy over every class of the masked rows.
pub fn sigmoid_bce<'t>(logits: Var<'t>, targets: &Arc<Tensor>, mask: &[bool]) -> Result<Var<'t>> {
    let (value, rows) = {
        let x = logits.borrow_value();
        if x.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sigmoid_bce",
                left: x.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let rows = rows_of(mask, x.rows())?;
        let classes = x.cols();
        let mut total = 0.0;
        for &r in &rows {
            for c in 0..classes {
                let z = x.get(r, c);
                let t = targets.get(r, c);
                // max(z,0) - z·t + ln(1 + e^{-|z|})
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            }
        }
        (Tensor::scalar(total / (rows.len() * classes) as f64), rows)
    };
    Ok(logits.tape.push(
        value,
        Op::Bce {
            logits: logits.id,
            targets: Arc::clone(targets),
            rows,
        },
        &[logits.id],
    ))
}
