//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every leaf created with [`Tape::leaf`]. Repeated backward
//! calls add to the stored leaf gradients.
//!
//! Binary elementwise operations broadcast only over leading axes: the
//! smaller operand's shape must be a suffix of the larger one's. Any other
//! broadcast is spelled out with [`Var::repeat_axis`].

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Silu(usize),
    Relu(usize),
    Tanh(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    /// Index (along the reduced axis) of the selected element per output slot.
    SelectAxis(usize, usize, Rc<Vec<usize>>),
    StdAxis(usize, usize, Rc<Vec<f64>>),
    Softmax(usize),
    LogSoftmax(usize),
    SegmentLogSoftmax(usize, Rc<Vec<usize>>),
    NormalizeLast(usize, Rc<Vec<f64>>),
    Concat(Vec<usize>, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    RepeatAxis(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of one forward pass.
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
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    /// Leaf that receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(value, Op::Concat(ids.clone(), axis), &ids))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let n_nodes = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        {
            let nodes = self.nodes.borrow();
            let lv = &nodes[loss.id].value;
            if lv.len() != 1 {
                return Err(Error::NotScalar(lv.shape().to_vec()));
            }
            if !nodes[loss.id].requires_grad {
                return Ok(());
            }
            grads[loss.id] = Some(vec![1.0]);
            for id in (0..n_nodes).rev() {
                let node = &nodes[id];
                if !node.requires_grad || matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                backprop(&nodes, node, &g, &mut grads);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut nodes[id];
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g) {
                        *e += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (p, s) in [(*a, 1.0), (*b, sign)] {
                if rg(p) {
                    let len = val(p).len();
                    let acc = accumulate(grads, p, len);
                    for (i, gv) in g.iter().enumerate() {
                        acc[i % len] += s * gv;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (la, lb) = (av.len(), bv.len());
            if rg(*a) {
                let acc = accumulate(grads, *a, la);
                for (i, gv) in g.iter().enumerate() {
                    acc[i % la] += gv * bv[i % lb];
                }
            }
            if rg(*b) {
                let acc = accumulate(grads, *b, lb);
                for (i, gv) in g.iter().enumerate() {
                    acc[i % lb] += gv * av[i % la];
                }
            }
        }
        Op::Scale(a, c) => {
            let acc = accumulate(grads, *a, g.len());
            for (x, gv) in acc.iter_mut().zip(g) {
                *x += c * gv;
            }
        }
        Op::AddScalar(a) => {
            let acc = accumulate(grads, *a, g.len());
            for (x, gv) in acc.iter_mut().zip(g) {
                *x += gv;
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (sa, sb) = (at.shape(), bt.shape());
            let m = sa[sa.len() - 2];
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let rows = at.len() / k;
                if rg(*a) {
                    let acc = accumulate(grads, *a, at.len());
                    gemm_nt_acc(g, bt.data(), acc, rows, n, k);
                }
                if rg(*b) {
                    let acc = accumulate(grads, *b, bt.len());
                    gemm_tn_acc(at.data(), g, acc, rows, k, n);
                }
            } else {
                let batch = at.len() / (m * k);
                if rg(*a) {
                    let acc = accumulate(grads, *a, at.len());
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt.data()[bi * k * n..(bi + 1) * k * n],
                            &mut acc[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if rg(*b) {
                    let acc = accumulate(grads, *b, bt.len());
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &at.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut acc[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
        Op::Exp(a) => elementwise(grads, *a, g, |i| out[i]),
        Op::Log(a) => {
            let x = val(*a).data();
            elementwise(grads, *a, g, |i| 1.0 / x[i])
        }
        Op::Sqrt(a) => elementwise(grads, *a, g, |i| if out[i] > 0.0 { 0.5 / out[i] } else { 0.0 }),
        Op::Square(a) => {
            let x = val(*a).data();
            elementwise(grads, *a, g, |i| 2.0 * x[i])
        }
        Op::Silu(a) => {
            let x = val(*a).data();
            elementwise(grads, *a, g, |i| {
                let s = 1.0 / (1.0 + (-x[i]).exp());
                s * (1.0 + x[i] * (1.0 - s))
            })
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            elementwise(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Tanh(a) => elementwise(grads, *a, g, |i| 1.0 - out[i] * out[i]),
        Op::ClampMin(a, c) => {
            let x = val(*a).data();
            elementwise(grads, *a, g, |i| if x[i] > *c { 1.0 } else { 0.0 })
        }
        Op::Sum(a) | Op::Mean(a) => {
            let len = val(*a).len();
            let s = if matches!(node.op, Op::Mean(_)) {
                g[0] / len as f64
            } else {
                g[0]
            };
            let acc = accumulate(grads, *a, len);
            for x in acc.iter_mut() {
                *x += s;
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, size, inner) = outer_inner(val(*a).shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / size as f64
            } else {
                1.0
            };
            let acc = accumulate(grads, *a, outer * size * inner);
            for o in 0..outer {
                for s in 0..size {
                    let dst = &mut acc[(o * size + s) * inner..(o * size + s + 1) * inner];
                    for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d += scale * gv;
                    }
                }
            }
        }
        Op::SelectAxis(a, axis, arg) => {
            let (outer, size, inner) = outer_inner(val(*a).shape(), *axis);
            let acc = accumulate(grads, *a, outer * size * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let j = o * inner + i;
                    acc[(o * size + arg[j]) * inner + i] += g[j];
                }
            }
        }
        Op::StdAxis(a, axis, mean) => {
            let x = val(*a).data();
            let (outer, size, inner) = outer_inner(val(*a).shape(), *axis);
            let acc = accumulate(grads, *a, outer * size * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let j = o * inner + i;
                    if out[j] <= 0.0 {
                        continue;
                    }
                    let c = g[j] / (size as f64 * out[j]);
                    for s in 0..size {
                        let idx = (o * size + s) * inner + i;
                        acc[idx] += c * (x[idx] - mean[j]);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let d = *val(*a).shape().last().unwrap();
            let acc = accumulate(grads, *a, out.len());
            for ((y, gr), dst) in out.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    dst[k] += y[k] * (gr[k] - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let d = *val(*a).shape().last().unwrap();
            let acc = accumulate(grads, *a, out.len());
            for ((y, gr), dst) in out.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                let total: f64 = gr.iter().sum();
                for k in 0..d {
                    dst[k] += gr[k] - y[k].exp() * total;
                }
            }
        }
        Op::SegmentLogSoftmax(a, segs) => {
            let d: usize = segs.iter().sum();
            let acc = accumulate(grads, *a, out.len());
            for ((y, gr), dst) in out.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                let mut start = 0;
                for &len in segs.iter() {
                    let r = start..start + len;
                    let total: f64 = gr[r.clone()].iter().sum();
                    for k in r {
                        dst[k] += gr[k] - y[k].exp() * total;
                    }
                    start += len;
                }
            }
        }
        Op::NormalizeLast(a, inv_std) => {
            let d = *val(*a).shape().last().unwrap();
            let acc = accumulate(grads, *a, out.len());
            for (row, ((y, gr), dst)) in out.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)).enumerate() {
                let gm: f64 = gr.iter().sum::<f64>() / d as f64;
                let gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for k in 0..d {
                    dst[k] += inv_std[row] * (gr[k] - gm - y[k] * gy);
                }
            }
        }
        Op::Concat(parts, axis) => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = val(p).shape()[*axis] * inner;
                if rg(p) {
                    let acc = accumulate(grads, p, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in acc[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                .and_then(|t| t.permute(&inverse))
                .expect("permute backward");
            let acc = accumulate(grads, *a, gt.len());
            for (d, s) in acc.iter_mut().zip(gt.data()) {
                *d += s;
            }
        }
        Op::Reshape(a) => {
            let acc = accumulate(grads, *a, g.len());
            for (d, s) in acc.iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::RepeatAxis(a, axis, count) => {
            let shape = val(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis..].iter().product();
            let acc = accumulate(grads, *a, outer * inner);
            for o in 0..outer {
                let dst = &mut acc[o * inner..(o + 1) * inner];
                for c in 0..*count {
                    let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn elementwise(grads: &mut [Option<Vec<f64>>], a: usize, g: &[f64], dydx: impl Fn(usize) -> f64) {
    let acc = accumulate(grads, a, g.len());
    for (i, (d, gv)) in acc.iter_mut().zip(g).enumerate() {
        *d += gv * dydx(i);
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let suffix = |big: &[usize], small: &[usize]| small.len() <= big.len() && big[big.len() - small.len()..] == *small;
    if suffix(a, b) {
        Ok(a.to_vec())
    } else if suffix(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

// Arithmetic returns Result, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.record(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (value, op) = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            let (ad, bd) = (a.data(), b.data());
            let n = ad.len().max(bd.len());
            let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
            let op = match name {
                "add" => Op::Add(self.id, other.id),
                "sub" => Op::Sub(self.id, other.id),
                _ => Op::Mul(self.id, other.id),
            };
            (Tensor::new(shape, data)?, op)
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |x| x.max(0.0).sqrt())
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x / (1.0 + (-x).exp()))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, floor), |x| x.max(floor))
    }

    /// `[..., m, k] × [k, n]` or `[..., m, k] × [..., k, n]` with equal leading axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            let bad = || Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(bad());
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != kb || (sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(bad());
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            let mut data = vec![0.0; a.len() / k * n];
            if sb.len() == 2 {
                gemm_acc(a.data(), b.data(), &mut data, a.len() / k, k, n);
            } else {
                for bi in 0..a.len() / (m * k) {
                    gemm_acc(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut data[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Tensor::new(shape, data)?
        };
        Ok(self
            .tape
            .record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        drop(v);
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::InvalidShape {
                op,
                shape,
                reason: format!("cannot reduce axis {axis}"),
            });
        }
        Ok(shape)
    }

    fn reduce(self, op: &'static str, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<Tensor> {
        let shape = self.check_axis(op, axis)?;
        let (outer, size, inner) = outer_inner(&shape, axis);
        let v = self.value();
        let x = v.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..size).map(|s| x[(o * size + s) * inner + i]);
                data.push(f(&mut it));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Tensor::new(out_shape, data)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = self.reduce("sum_axis", axis, |it| it.sum())?;
        Ok(self.tape.record(value, Op::SumAxis(self.id, axis), &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let size = self.check_axis("mean_axis", axis)?[axis] as f64;
        let value = self.reduce("mean_axis", axis, |it| it.sum::<f64>() / size)?;
        Ok(self.tape.record(value, Op::MeanAxis(self.id, axis), &[self.id]))
    }

    fn select_axis(self, op: &'static str, axis: usize, better: fn(f64, f64) -> bool) -> Result<Var<'t>> {
        let shape = self.check_axis(op, axis)?;
        let (outer, size, inner) = outer_inner(&shape, axis);
        let (value, arg) = {
            let v = self.value();
            let x = v.data();
            let mut data = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for s in 1..size {
                        if better(x[(o * size + s) * inner + i], x[(o * size + best) * inner + i]) {
                            best = s;
                        }
                    }
                    arg.push(best);
                    data.push(x[(o * size + best) * inner + i]);
                }
            }
            let mut out_shape = shape;
            out_shape.remove(axis);
            (Tensor::new(out_shape, data)?, arg)
        };
        Ok(self
            .tape
            .record(value, Op::SelectAxis(self.id, axis, Rc::new(arg)), &[self.id]))
    }

    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        self.select_axis("max_axis", axis, |a, b| a > b)
    }

    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        self.select_axis("min_axis", axis, |a, b| a < b)
    }

    /// Population standard deviation along `axis`.
    pub fn std_axis(self, axis: usize) -> Result<Var<'t>> {
        let size = self.check_axis("std_axis", axis)?[axis] as f64;
        let mean = self.reduce("std_axis", axis, |it| it.sum::<f64>() / size)?;
        let value = {
            let shape = self.shape();
            let (outer, n, inner) = outer_inner(&shape, axis);
            let v = self.value();
            let x = v.data();
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let m = mean.data()[o * inner + i];
                    let var = (0..n).map(|s| (x[(o * n + s) * inner + i] - m).powi(2)).sum::<f64>() / size;
                    data.push(var.sqrt());
                }
            }
            Tensor::new(mean.shape().to_vec(), data)?
        };
        let op = Op::StdAxis(self.id, axis, Rc::new(mean.into_data()));
        Ok(self.tape.record(value, op, &[self.id]))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        let shape = self.shape();
        match shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::InvalidShape {
                op,
                shape,
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let d = self.last_dim("softmax")?;
        let value = {
            let v = self.value();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        Ok(self.tape.record(value, Op::Softmax(self.id), &[self.id]))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let d = self.last_dim("log_softmax")?;
        let value = {
            let v = self.value();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(d) {
                log_softmax_in_place(row);
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        Ok(self.tape.record(value, Op::LogSoftmax(self.id), &[self.id]))
    }

    /// Log-softmax applied independently to consecutive segments of the last axis.
    pub fn segment_log_softmax(self, segments: &[usize]) -> Result<Var<'t>> {
        let d = self.last_dim("segment_log_softmax")?;
        if segments.iter().sum::<usize>() != d || segments.contains(&0) {
            return Err(Error::InvalidShape {
                op: "segment_log_softmax",
                shape: self.shape(),
                reason: format!("segments {segments:?} do not tile the last axis"),
            });
        }
        let value = {
            let v = self.value();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(d) {
                let mut start = 0;
                for &len in segments {
                    log_softmax_in_place(&mut row[start..start + len]);
                    start += len;
                }
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        let op = Op::SegmentLogSoftmax(self.id, Rc::new(segments.to_vec()));
        Ok(self.tape.record(value, op, &[self.id]))
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize_last(self, eps: f64) -> Result<Var<'t>> {
        let d = self.last_dim("normalize_last")?;
        let (value, inv) = {
            let v = self.value();
            let mut out = v.data().to_vec();
            let mut inv = Vec::with_capacity(out.len() / d);
            for row in out.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * s;
                }
                inv.push(s);
            }
            (Tensor::new(v.shape().to_vec(), out)?, inv)
        };
        Ok(self
            .tape
            .record(value, Op::NormalizeLast(self.id, Rc::new(inv)), &[self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(axes)?;
        Ok(self.tape.record(value, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape(),
                reason: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Insert a new axis at `axis` holding `count` copies.
    pub fn repeat_axis(self, axis: usize, count: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(Error::InvalidShape {
                op: "repeat_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let value = {
            let v = self.value();
            let x = v.data();
            let mut data = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                for _ in 0..count {
                    data.extend_from_slice(&x[o * inner..(o + 1) * inner]);
                }
            }
            let mut out_shape = shape.clone();
            out_shape.insert(axis, count);
            Tensor::new(out_shape, data)?
        };
        Ok(self
            .tape
            .record(value, Op::RepeatAxis(self.id, axis, count), &[self.id]))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = x.softmax().unwrap();
        for v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let y = i.matmul(m).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn grad_of_square_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data().iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn grad_of_linear_form_is_input() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::vector(vec![1.5, 2.5, -3.5]));
        let loss = w.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.5, 2.5, -3.5]);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]));
        let onehot = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]));
        let loss = z.log_softmax().unwrap().mul(onehot).unwrap().sum().neg();
        tape.backward(loss).unwrap();
        let mut p = z.value().data().to_vec();
        softmax_in_place(&mut p);
        p[2] -= 1.0;
        let g = z.grad().unwrap();
        for (a, b) in g.data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.scale(2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.scale(3.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item().unwrap(), 6.0);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let ok = tape.constant(Tensor::zeros(&[3]));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(a.add(ok).is_ok());
        let err = a.add(bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul"));
    }

    #[test]
    fn concat_along_middle_axis() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2, 2], (5..13).map(f64::from).collect()).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.value().data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn std_of_constant_is_zero_with_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4, 2], 1.5));
        let s = x.std_axis(0).unwrap();
        assert_eq!(s.value().data(), &[0.0, 0.0]);
        tape.backward(s.sum()).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }
}
