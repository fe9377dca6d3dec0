//! Reverse-mode gradient tape over row-major batch matrices.
//!
//! A tape lives for one optimization step: record the forward pass, call
//! [`GradTape::backward`] once, drop it. Parameter leaves borrow their storage
//! so recording does not copy weights.

use std::borrow::Cow;

use super::{softmax_unchecked, Matrix};
use crate::error::{invalid, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · wᵀ`; x is B×k, w is n×k.
    MatMulNT {
        x: NodeId,
        w: NodeId,
    },
    /// Broadcast a 1×n row over every row of x.
    AddRow {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    RowNormalize {
        x: NodeId,
    },
    RowSoftmax {
        x: NodeId,
    },
    /// Row i of x scaled by g[i, col].
    ScaleRowsByColumn {
        x: NodeId,
        g: NodeId,
        col: usize,
    },
    /// Mean softmax cross-entropy over rows; produces a 1×1 node.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
}

/// Gradients for registered parameters, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Vec<f64>>);

impl Gradients {
    pub fn get(&self, param_index: usize) -> &[f64] {
        &self.0[param_index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Vec<f64>> {
        self.0
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Default)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<NodeId>,
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    /// Registers a trainable leaf. Its gradient is reported at the returned
    /// parameter's registration index.
    pub fn param(&mut self, rows: usize, cols: usize, data: &'a [f64]) -> Result<NodeId> {
        let id = self.leaf(rows, cols, Cow::Borrowed(data), true)?;
        self.params.push(id);
        Ok(id)
    }

    pub fn param_matrix(&mut self, m: &'a Matrix) -> Result<NodeId> {
        self.param(m.rows(), m.cols(), m.data())
    }

    /// A bias or other vector parameter, recorded as a 1×n row.
    pub fn param_row(&mut self, v: &'a [f64]) -> Result<NodeId> {
        self.param(1, v.len(), v)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Cow<'a, [f64]>) -> Result<NodeId> {
        self.leaf(rows, cols, data, false)
    }

    pub fn constant_matrix(&mut self, m: &'a Matrix) -> Result<NodeId> {
        self.constant(m.rows(), m.cols(), Cow::Borrowed(m.data()))
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Cow<'a, [f64]>, requires_grad: bool) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(invalid(format!("leaf data length {} is not {rows}x{cols}", data.len())));
        }
        self.nodes.push(Node { op: Op::Leaf, rows, cols, value: data, requires_grad });
        Ok(self.nodes.len() - 1)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulNT { x, w })
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow { x, b })
    }

    /// `x · wᵀ + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul_nt(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu { x })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Scale { x, k })
    }

    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowNormalize { x })
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowSoftmax { x })
    }

    pub fn scale_rows_by_column(&mut self, x: NodeId, g: NodeId, col: usize) -> Result<NodeId> {
        self.push(Op::ScaleRowsByColumn { x, g, col })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() })
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (rows, cols) = self.check(&op)?;
        let value = eval(&op, &|id| &*self.nodes[id].value, &|id| self.shape(id))?;
        let requires_grad = inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, rows, cols, value: Cow::Owned(value), requires_grad });
        Ok(self.nodes.len() - 1)
    }

    fn check(&self, op: &Op) -> Result<(usize, usize)> {
        for &i in &inputs(op) {
            if i >= self.nodes.len() {
                return Err(invalid(format!("node {i} is not on the tape")));
            }
        }
        let s = |id: NodeId| self.shape(id);
        match *op {
            Op::Leaf => unreachable!("leaves are recorded directly"),
            Op::MatMulNT { x, w } => {
                let ((b, k), (n, k2)) = (s(x), s(w));
                if k != k2 {
                    return Err(invalid(format!("matmul_nt: {b}x{k} · ({n}x{k2})ᵀ")));
                }
                Ok((b, n))
            }
            Op::AddRow { x, b } => {
                let ((r, c), (br, bc)) = (s(x), s(b));
                if br != 1 || bc != c {
                    return Err(invalid(format!("add_row: {r}x{c} + {br}x{bc}")));
                }
                Ok((r, c))
            }
            Op::Add { a, b } => {
                if s(a) != s(b) {
                    return Err(invalid(format!("add: {:?} + {:?}", s(a), s(b))));
                }
                Ok(s(a))
            }
            Op::Relu { x } | Op::Scale { x, .. } | Op::RowNormalize { x } | Op::RowSoftmax { x } => Ok(s(x)),
            Op::ScaleRowsByColumn { x, g, col } => {
                let ((r, c), (gr, gc)) = (s(x), s(g));
                if gr != r || col >= gc {
                    return Err(invalid(format!("scale_rows_by_column: {r}x{c} by column {col} of {gr}x{gc}")));
                }
                Ok((r, c))
            }
            Op::SoftmaxCrossEntropy { logits, ref targets } => {
                let (r, c) = s(logits);
                if targets.len() != r || r == 0 {
                    return Err(invalid(format!("cross-entropy: {} targets for {r} rows", targets.len())));
                }
                if let Some(t) = targets.iter().find(|&&t| t >= c) {
                    return Err(invalid(format!("cross-entropy target {t} outside {c} logits")));
                }
                Ok((1, 1))
            }
        }
    }

    /// Recomputes every node from the leaves. Values are bit-identical to the
    /// recorded ones because both paths go through the same kernels.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.to_vec(),
                ref op => eval(op, &|id| values[id].as_slice(), &|id| self.shape(id))?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of a scalar node with respect to every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(invalid(format!("loss node {loss} is not on the tape")));
        }
        if self.shape(loss) != (1, 1) {
            return Err(invalid(format!("loss node must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            self.propagate(id, &dy, &mut grads);
        }

        let out = self
            .params
            .iter()
            .map(|&p| {
                let n = self.nodes[p].value.len();
                match grads.get_mut(p).and_then(Option::take) {
                    Some(g) => g,
                    None => vec![0.0; n],
                }
            })
            .collect();
        Ok(Gradients(out))
    }

    fn propagate(&self, id: NodeId, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let wants = |i: NodeId| self.nodes[i].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMulNT { x, w } => {
                let (b, k) = self.shape(x);
                let n = self.shape(w).0;
                let (xv, wv) = (self.value(x), self.value(w));
                if wants(x) {
                    let gx = acc(grads, x, b * k);
                    for r in 0..b {
                        let gxr = &mut gx[r * k..(r + 1) * k];
                        for o in 0..n {
                            let d = dy[r * n + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, wv) in gxr.iter_mut().zip(&wv[o * k..(o + 1) * k]) {
                                *g += d * wv;
                            }
                        }
                    }
                }
                if wants(w) {
                    let gw = acc(grads, w, n * k);
                    for r in 0..b {
                        let xr = &xv[r * k..(r + 1) * k];
                        for o in 0..n {
                            let d = dy[r * n + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, xv) in gw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                *g += d * xv;
                            }
                        }
                    }
                }
            }
            Op::AddRow { x, b } => {
                let c = node.cols;
                if wants(x) {
                    add_into(acc(grads, x, dy.len()), dy);
                }
                if wants(b) {
                    let gb = acc(grads, b, c);
                    for row in dy.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(a) {
                    add_into(acc(grads, a, dy.len()), dy);
                }
                if wants(b) {
                    add_into(acc(grads, b, dy.len()), dy);
                }
            }
            Op::Relu { x } => {
                if wants(x) {
                    let xv = self.value(x);
                    let gx = acc(grads, x, dy.len());
                    for ((g, d), v) in gx.iter_mut().zip(dy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                if wants(x) {
                    let gx = acc(grads, x, dy.len());
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += k * d;
                    }
                }
            }
            Op::RowNormalize { x } => {
                if wants(x) {
                    let c = node.cols;
                    let (xv, yv) = (self.value(x), &node.value);
                    let gx = acc(grads, x, dy.len());
                    for r in 0..node.rows {
                        let span = r * c..(r + 1) * c;
                        let n = super::norm(&xv[span.clone()]);
                        let y = &yv[span.clone()];
                        let d = &dy[span.clone()];
                        let yd = super::dot(y, d);
                        for ((g, di), yi) in gx[span].iter_mut().zip(d).zip(y) {
                            *g += (di - yi * yd) / n;
                        }
                    }
                }
            }
            Op::RowSoftmax { x } => {
                if wants(x) {
                    let c = node.cols;
                    let yv = &node.value;
                    let gx = acc(grads, x, dy.len());
                    for r in 0..node.rows {
                        let span = r * c..(r + 1) * c;
                        let y = &yv[span.clone()];
                        let d = &dy[span.clone()];
                        let yd = super::dot(y, d);
                        for ((g, di), yi) in gx[span].iter_mut().zip(d).zip(y) {
                            *g += yi * (di - yd);
                        }
                    }
                }
            }
            Op::ScaleRowsByColumn { x, g, col } => {
                let c = node.cols;
                let gc = self.shape(g).1;
                let (xv, gv) = (self.value(x), self.value(g));
                if wants(x) {
                    let gx = acc(grads, x, dy.len());
                    for r in 0..node.rows {
                        let s = gv[r * gc + col];
                        for (gxi, d) in gx[r * c..(r + 1) * c].iter_mut().zip(&dy[r * c..(r + 1) * c]) {
                            *gxi += s * d;
                        }
                    }
                }
                if wants(g) {
                    let gg = acc(grads, g, node.rows * gc);
                    for r in 0..node.rows {
                        gg[r * gc + col] += super::dot(&xv[r * c..(r + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, ref targets } => {
                if wants(logits) {
                    let (b, c) = self.shape(logits);
                    let lv = self.value(logits);
                    let scale = dy[0] / b as f64;
                    let gl = acc(grads, logits, b * c);
                    for (r, &t) in targets.iter().enumerate() {
                        let p = softmax_unchecked(&lv[r * c..(r + 1) * c]);
                        for (j, pj) in p.iter().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (pj - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMulNT { x, w } => vec![x, w],
        Op::AddRow { x, b } => vec![x, b],
        Op::Add { a, b } => vec![a, b],
        Op::Relu { x } | Op::Scale { x, .. } | Op::RowNormalize { x } | Op::RowSoftmax { x } => vec![x],
        Op::ScaleRowsByColumn { x, g, .. } => vec![x, g],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
    }
}

/// Forward kernel shared by recording and replay.
fn eval<'v, V, S>(op: &Op, value: &V, shape: &S) -> Result<Vec<f64>>
where
    V: Fn(NodeId) -> &'v [f64],
    S: Fn(NodeId) -> (usize, usize),
{
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMulNT { x, w } => {
            let (b, k) = shape(x);
            let n = shape(w).0;
            let (xv, wv) = (value(x), value(w));
            let mut out = vec![0.0; b * n];
            for r in 0..b {
                let xr = &xv[r * k..(r + 1) * k];
                for o in 0..n {
                    out[r * n + o] = super::dot(xr, &wv[o * k..(o + 1) * k]);
                }
            }
            out
        }
        Op::AddRow { x, b } => {
            let c = shape(x).1;
            let bv = value(b);
            value(x).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b)).collect()
        }
        Op::Add { a, b } => value(a).iter().zip(value(b)).map(|(x, y)| x + y).collect(),
        Op::Relu { x } => value(x).iter().map(|v| v.max(0.0)).collect(),
        Op::Scale { x, k } => value(x).iter().map(|v| k * v).collect(),
        Op::RowNormalize { x } => {
            let c = shape(x).1;
            let mut out = Vec::with_capacity(value(x).len());
            for row in value(x).chunks(c) {
                let n = super::norm(row);
                if n == 0.0 || !n.is_finite() {
                    return Err(invalid("row_normalize: zero-norm or non-finite row"));
                }
                out.extend(row.iter().map(|v| v / n));
            }
            out
        }
        Op::RowSoftmax { x } => {
            let c = shape(x).1;
            value(x).chunks(c).flat_map(softmax_unchecked).collect()
        }
        Op::ScaleRowsByColumn { x, g, col } => {
            let c = shape(x).1;
            let gc = shape(g).1;
            let gv = value(g);
            value(x)
                .chunks(c)
                .enumerate()
                .flat_map(|(r, row)| {
                    let s = gv[r * gc + col];
                    row.iter().map(move |v| s * v)
                })
                .collect()
        }
        Op::SoftmaxCrossEntropy { logits, ref targets } => {
            let c = shape(logits).1;
            let lv = value(logits);
            let total: f64 = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| {
                    let row = &lv[r * c..(r + 1) * c];
                    super::logsumexp(row) - row[t]
                })
                .sum();
            vec![total / targets.len() as f64]
        }
    })
}
