//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are appended in execution order, so the node index order is a
//! topological order and the backward pass simply walks it in reverse. Each
//! tape is single-threaded; independent tapes share nothing.

use crate::error::{Error, Result};
use crate::tensor::{col2im3, im2col3, softmax_rows, Scalar, Tensor, PROB_FLOOR};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[m, k] · [k, n]`
    MatMul { a: NodeId, b: NodeId },
    /// `[m, n] + bias[n]`
    AddRowBias { x: NodeId, bias: NodeId },
    /// `[b, c, h, w] + bias[c]`
    AddChannelBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    /// 3×3 kernel `[o, c, 3, 3]`, stride 1.
    Conv3x3 { x: NodeId, w: NodeId, pad: usize },
    MaxPool2 { x: NodeId },
    AvgPool2 { x: NodeId },
    /// Collapses everything after the batch axis.
    Flatten { x: NodeId },
    Softmax { x: NodeId },
    /// Mean clamped negative log-likelihood of `labels` under row distributions.
    CrossEntropy { probs: NodeId, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. `T` is `f32` for training and `f64` for gradient
/// checks.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    backward_order: Vec<NodeId>,
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects [batch, C, H, W], got {shape:?}"))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Shape(format!("{what} expects a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].value.grad()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id].value.take_grad()
    }

    /// Node visit order of the most recent backward pass.
    pub fn backward_order(&self) -> &[NodeId] {
        &self.backward_order
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = self.inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => vec![a, b],
            Op::AddRowBias { x, bias } | Op::AddChannelBias { x, bias } => vec![x, bias],
            Op::Conv3x3 { x, w, .. } => vec![x, w],
            Op::Relu { x }
            | Op::MaxPool2 { x }
            | Op::AvgPool2 { x }
            | Op::Flatten { x }
            | Op::Softmax { x } => vec![x],
            Op::CrossEntropy { probs, .. } => vec![probs],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul { a, b })
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddRowBias { x, bias })
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddChannelBias { x, bias })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu { x })
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        self.record(Op::Conv3x3 { x, w, pad })
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::MaxPool2 { x })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::AvgPool2 { x })
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Flatten { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Softmax { x })
    }

    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        })
    }

    /// Recomputes every derived node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<Tensor<T>> {
        let v = |id: NodeId| &self.nodes[id].value;
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul { a, b } => {
                let (m, k) = dims2(v(*a).shape(), "matmul lhs")?;
                let (k2, n) = dims2(v(*b).shape(), "matmul rhs")?;
                if k != k2 {
                    return Err(Error::Shape(format!("matmul [{m}, {k}] x [{k2}, {n}]")));
                }
                let mut out = vec![T::zero(); m * n];
                T::gemm(
                    m,
                    k,
                    n,
                    v(*a).data(),
                    k as isize,
                    1,
                    v(*b).data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
                Tensor::new(vec![m, n], out)
            }
            Op::AddRowBias { x, bias } => {
                let (_, n) = dims2(v(*x).shape(), "row bias")?;
                if v(*bias).len() != n {
                    return Err(Error::Shape(format!("bias of {} for {n} columns", v(*bias).len())));
                }
                let mut out = v(*x).clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, &b) in row.iter_mut().zip(v(*bias).data()) {
                        *o = *o + b;
                    }
                }
                Ok(out)
            }
            Op::AddChannelBias { x, bias } => {
                let (_, c, h, w) = dims4(v(*x).shape(), "channel bias")?;
                if v(*bias).len() != c {
                    return Err(Error::Shape(format!("bias of {} for {c} channels", v(*bias).len())));
                }
                let mut out = v(*x).clone();
                for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                    let b = v(*bias).data()[i % c];
                    plane.iter_mut().for_each(|o| *o = *o + b);
                }
                Ok(out)
            }
            Op::Relu { x } => {
                let mut out = v(*x).clone();
                out.data_mut().iter_mut().for_each(|o| *o = o.max(T::zero()));
                Ok(out)
            }
            Op::Conv3x3 { x, w, pad } => {
                let (b, c, h, wd) = dims4(v(*x).shape(), "conv3x3 input")?;
                let (o, c2, kh, kw) = dims4(v(*w).shape(), "conv3x3 kernel")?;
                if c != c2 || kh != 3 || kw != 3 {
                    return Err(Error::Shape(format!(
                        "kernel {:?} for input {:?}",
                        v(*w).shape(),
                        v(*x).shape()
                    )));
                }
                if h + 2 * pad < 3 || wd + 2 * pad < 3 {
                    return Err(Error::Shape("input smaller than kernel".into()));
                }
                let (ho, wo) = (h + 2 * pad - 2, wd + 2 * pad - 2);
                let plane = ho * wo;
                let mut cols = vec![T::zero(); c * 9 * plane];
                let mut out = vec![T::zero(); b * o * plane];
                for (xb, ob) in v(*x).data().chunks(c * h * wd).zip(out.chunks_mut(o * plane)) {
                    im2col3(xb, c, h, wd, *pad, &mut cols);
                    T::gemm(
                        o,
                        c * 9,
                        plane,
                        v(*w).data(),
                        (c * 9) as isize,
                        1,
                        &cols,
                        plane as isize,
                        1,
                        T::zero(),
                        ob,
                        plane as isize,
                        1,
                    );
                }
                Tensor::new(vec![b, o, ho, wo], out)
            }
            Op::MaxPool2 { x } | Op::AvgPool2 { x } => {
                let (b, c, h, w) = dims4(v(*x).shape(), "pool")?;
                let (ho, wo) = (h / 2, w / 2);
                if ho == 0 || wo == 0 {
                    return Err(Error::Shape(format!("cannot pool {h}x{w}")));
                }
                let is_max = matches!(op, Op::MaxPool2 { .. });
                let src = v(*x).data();
                let mut out = vec![T::zero(); b * c * ho * wo];
                for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
                    let plane = &src[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let q = [
                                plane[2 * oy * w + 2 * ox],
                                plane[2 * oy * w + 2 * ox + 1],
                                plane[(2 * oy + 1) * w + 2 * ox],
                                plane[(2 * oy + 1) * w + 2 * ox + 1],
                            ];
                            dst[oy * wo + ox] = if is_max {
                                q.iter().copied().fold(T::neg_infinity(), T::max)
                            } else {
                                (q[0] + q[1] + q[2] + q[3]) * T::of(0.25)
                            };
                        }
                    }
                }
                Tensor::new(vec![b, c, ho, wo], out)
            }
            Op::Flatten { x } => {
                let shape = v(*x).shape();
                let b = shape[0];
                let rest: usize = shape[1..].iter().product();
                v(*x).clone().reshape(vec![b, rest])
            }
            Op::Softmax { x } => {
                let (m, k) = dims2(v(*x).shape(), "softmax")?;
                let mut out = vec![T::zero(); m * k];
                softmax_rows(v(*x).data(), k, &mut out)?;
                Tensor::new(vec![m, k], out)
            }
            Op::CrossEntropy { probs, labels } => {
                let loss = crate::tensor::cross_entropy(v(*probs), labels)?;
                Ok(Tensor::scalar(loss))
            }
        }
    }

    /// Back-propagates from the scalar node `loss`, leaving gradients on
    /// every node that requires one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Shape("backward target must be a scalar".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss] = Some(vec![T::one()]);
        self.backward_order.clear();
        for node in self.nodes.iter_mut() {
            node.value.take_grad();
        }

        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_order.push(i);
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, i: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let v = |id: NodeId| &self.nodes[id].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(v(*a).shape(), "matmul")?;
                let n = v(*b).shape()[1];
                if self.wants(*a) {
                    // dA += dC · Bᵀ
                    let da = slot(grads, *a, v(*a).len());
                    T::gemm(m, n, k, g, n as isize, 1, v(*b).data(), 1, n as isize, T::one(), da, k as isize, 1);
                }
                if self.wants(*b) {
                    // dB += Aᵀ · dC
                    let db = slot(grads, *b, v(*b).len());
                    T::gemm(k, m, n, v(*a).data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                }
            }
            Op::AddRowBias { x, bias } => {
                let n = v(*bias).len();
                if self.wants(*x) {
                    let dx = slot(grads, *x, v(*x).len());
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
                if self.wants(*bias) {
                    let db = slot(grads, *bias, v(*bias).len());
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (_, c, h, w) = dims4(v(*x).shape(), "channel bias")?;
                if self.wants(*x) {
                    let dx = slot(grads, *x, v(*x).len());
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
                if self.wants(*bias) {
                    let db = slot(grads, *bias, v(*bias).len());
                    for (p, plane) in g.chunks(h * w).enumerate() {
                        db[p % c] = db[p % c] + plane.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xs = v(*x).data();
                    let dx = slot(grads, *x, v(*x).len());
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xs) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Conv3x3 { x, w, pad } => {
                let (b, c, h, wd) = dims4(v(*x).shape(), "conv3x3")?;
                let o = v(*w).shape()[0];
                let (ho, wo) = (h + 2 * pad - 2, wd + 2 * pad - 2);
                let plane = ho * wo;
                let k9 = c * 9;
                let mut cols = vec![T::zero(); k9 * plane];
                let mut dcols = vec![T::zero(); k9 * plane];
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut dw = vec![T::zero(); v(*w).len()];
                let mut dx_all = if want_x { vec![T::zero(); v(*x).len()] } else { Vec::new() };
                for bi in 0..b {
                    let gb = &g[bi * o * plane..(bi + 1) * o * plane];
                    if want_w {
                        im2col3(&v(*x).data()[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, *pad, &mut cols);
                        // dW += dOut · colsᵀ
                        T::gemm(o, plane, k9, gb, plane as isize, 1, &cols, 1, plane as isize, T::one(), &mut dw, k9 as isize, 1);
                    }
                    if want_x {
                        // dcols = Wᵀ · dOut
                        T::gemm(k9, o, plane, v(*w).data(), 1, k9 as isize, gb, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
                        col2im3(&dcols, c, h, wd, *pad, &mut dx_all[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if want_w {
                    let dst = slot(grads, *w, v(*w).len());
                    dst.iter_mut().zip(&dw).for_each(|(d, &s)| *d = *d + s);
                }
                if want_x {
                    let dst = slot(grads, *x, v(*x).len());
                    dst.iter_mut().zip(&dx_all).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::MaxPool2 { x } | Op::AvgPool2 { x } => {
                if !self.wants(*x) {
                    return Ok(());
                }
                let (_, _, h, w) = dims4(v(*x).shape(), "pool")?;
                let (ho, wo) = (h / 2, w / 2);
                let is_max = matches!(self.nodes[i].op, Op::MaxPool2 { .. });
                let src = v(*x).data();
                let dx = slot(grads, *x, v(*x).len());
                for (p, gp) in g.chunks(ho * wo).enumerate() {
                    let base = p * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let idx = [
                                base + 2 * oy * w + 2 * ox,
                                base + 2 * oy * w + 2 * ox + 1,
                                base + (2 * oy + 1) * w + 2 * ox,
                                base + (2 * oy + 1) * w + 2 * ox + 1,
                            ];
                            let gi = gp[oy * wo + ox];
                            if is_max {
                                // first maximal element wins, matching the forward fold
                                let mut best = idx[0];
                                for &j in &idx[1..] {
                                    if src[j] > src[best] {
                                        best = j;
                                    }
                                }
                                dx[best] = dx[best] + gi;
                            } else {
                                let q = gi * T::of(0.25);
                                for &j in &idx {
                                    dx[j] = dx[j] + q;
                                }
                            }
                        }
                    }
                }
            }
            Op::Flatten { x } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, v(*x).len());
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let p = &self.nodes[i].value;
                    let k = p.shape()[1];
                    let dx = slot(grads, *x, v(*x).len());
                    for ((drow, prow), grow) in dx.chunks_mut(k).zip(p.data().chunks(k)).zip(g.chunks(k)) {
                        let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((d, &pi), &gi) in drow.iter_mut().zip(prow).zip(grow) {
                            *d = *d + pi * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.wants(*probs) {
                    let p = v(*probs);
                    let k = p.shape()[1];
                    let scale = g[0] / T::of(labels.len() as f64);
                    let floor = T::of(PROB_FLOOR);
                    let pdata = p.data();
                    let dp = slot(grads, *probs, v(*probs).len());
                    for (row, &y) in labels.iter().enumerate() {
                        let py = pdata[row * k + y];
                        // the clamp is flat below the floor
                        if py >= floor {
                            dp[row * k + y] = dp[row * k + y] - scale / py;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
