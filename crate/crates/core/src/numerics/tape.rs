//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles. Values are
//! immutable once recorded. [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar with respect to every leaf that asked for
//! one. Only first-order derivatives are supported.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::{Float, Tensor};

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddSuffix { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulSuffix { a: usize, b: usize },
    Scale { a: usize, c: T },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Expand { a: usize },
    Softmax { a: usize },
    LayerNorm { a: usize, inv_std: Vec<T> },
    Gelu { a: usize },
    L2Normalize { a: usize, norms: Vec<T> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records ops for one forward pass. Confined to the thread that built it.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node id.
pub struct Gradients<T: Float = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf. The leaf receives a gradient iff
    /// `t.requires_grad` is set.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.requires_grad = false;
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        value.zero_grad();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn handle(&self, id: usize) -> Var<'_, T> {
        assert!(id < self.len(), "node {id} not on this tape");
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let mut send = |target: usize, delta: Vec<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, &g, false, bv.data(), true, &mut da, T::zero());
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, av.data(), true, &g, false, &mut db, T::zero());
                        send(*b, db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                    if nodes[*a].requires_grad {
                        let mut da = vec![T::zero(); bs * m * k];
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                            let dai = &mut da[i * m * k..(i + 1) * m * k];
                            T::gemm(m, n, k, gi, false, bi, !*trans_b, dai, T::zero());
                        }
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); bs * k * n];
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av.data()[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                T::gemm(n, m, k, gi, true, ai, false, dbi, T::zero());
                            } else {
                                T::gemm(k, m, n, ai, true, gi, false, dbi, T::zero());
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add { a, b } => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddSuffix { a, b } => {
                    let inner = val(*b).numel();
                    send(*b, sum_leading(&g, inner));
                    send(*a, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(*a, g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                    }
                    if nodes[*b].requires_grad {
                        send(*b, g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                    }
                }
                Op::MulSuffix { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let inner = bv.numel();
                    if nodes[*a].requires_grad {
                        let da = g
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * bv.data()[i % inner])
                            .collect();
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let prod: Vec<T> =
                            g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                        send(*b, sum_leading(&prod, inner));
                    }
                }
                Op::Scale { a, c } => send(*a, g.iter().map(|&x| x * *c).collect()),
                Op::Reshape { a } => send(*a, g),
                Op::Expand { a } => {
                    let inner = val(*a).numel();
                    send(*a, sum_leading(&g, inner));
                }
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (da, _) = permute_data(&g, out.shape(), &inverse);
                    send(*a, da);
                }
                Op::Narrow { a, axis, start } => {
                    let in_shape = val(*a).shape().to_vec();
                    let len = out.shape()[*axis];
                    let (outer, inner) = split_axis(&in_shape, *axis);
                    let full = in_shape[*axis];
                    let mut da = vec![T::zero(); val(*a).numel()];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst_start = (o * full + start) * inner;
                        da[dst_start..dst_start + len * inner].copy_from_slice(src);
                    }
                    send(*a, da);
                }
                Op::Concat { parts, axis } => {
                    let (outer, inner) = split_axis(out.shape(), *axis);
                    let total = out.shape()[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].requires_grad {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[s..s + len * inner]);
                            }
                            send(p, dp);
                        }
                        offset += len;
                    }
                }
                Op::Softmax { a } => {
                    let n = *out.shape().last().unwrap();
                    let y = out.data();
                    let mut da = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = p * (q - dot);
                        }
                    }
                    send(*a, da);
                }
                Op::LayerNorm { a, inv_std } => {
                    let n = *out.shape().last().unwrap();
                    let nf = T::lit(n as f64);
                    let xhat = out.data();
                    let mut da = vec![T::zero(); xhat.len()];
                    for (r, ((dr, xr), gr)) in da
                        .chunks_mut(n)
                        .zip(xhat.chunks(n))
                        .zip(g.chunks(n))
                        .enumerate()
                    {
                        let mean_g: T = gr.iter().copied().sum::<T>() / nf;
                        let mean_gx: T =
                            gr.iter().zip(xr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                        for ((d, &x), &q) in dr.iter_mut().zip(xr).zip(gr) {
                            *d = inv_std[r] * (q - mean_g - x * mean_gx);
                        }
                    }
                    send(*a, da);
                }
                Op::Gelu { a } => {
                    let x = val(*a);
                    let (c, s) = (T::lit(GELU_COEF), T::lit(GELU_SCALE));
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let da = x
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &q)| {
                            let t = (s * (v + c * v * v * v)).tanh();
                            let du = s * (T::one() + three * c * v * v);
                            q * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                        })
                        .collect();
                    send(*a, da);
                }
                Op::L2Normalize { a, norms } => {
                    let n = *out.shape().last().unwrap();
                    let y = out.data();
                    let mut da = vec![T::zero(); y.len()];
                    for (r, ((dr, yr), gr)) in
                        da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)).enumerate()
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (q - p * dot) / norms[r];
                        }
                    }
                    send(*a, da);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let bsz = labels.len();
                    let c = probs.len() / bsz;
                    let scale = g[0] / T::lit(bsz as f64);
                    let mut da: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        da[i * c + y] -= scale;
                    }
                    send(*logits, da);
                }
                Op::Sum { a } => send(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean { a } => {
                    let n = val(*a).numel();
                    send(*a, vec![g[0] / T::lit(n as f64); n]);
                }
            }
        }
        // Interior-node buffers were consumed above; only leaves keep theirs.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn sum_leading<T: Float>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in g.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` takes input axis `axes[i]`.
fn permute_data<T: Float>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; axes.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// A copy of the value with no link back to this tape.
    pub fn detach(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("vars from different tapes".into()))
        }
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(value, op, rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, T::zero());
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.emit(value, Op::MatMul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Applies a `[k×n]` weight to the last axis of any-rank input.
    pub fn matmul_last(&self, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().ok_or_else(|| Error::dim("matmul_last", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / k.max(1);
        let flat = self.reshape(&[rows, k])?;
        let out = flat.matmul(weight)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = weight.shape()[1];
        out.reshape(&out_shape)
    }

    /// Batched product over the leading axis: `[g×m×k] · [g×k×n]`, or with
    /// `trans_b` the second operand is stored `[g×n×k]`.
    pub fn bmm(&self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let bad = || Error::dim("bmm", format!("{:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()));
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut c = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let value = Tensor::new(&[bs, m, n], c)?;
        let op = Op::BatchMatMul {
            a: self.id,
            b: other.id,
            trans_b,
        };
        Ok(self.emit(value, op, &[self.id, other.id]))
    }

    fn zip_same(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    fn zip_suffix(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if !is_suffix(b.shape(), a.shape()) || b.numel() == 0 {
            return Err(Error::dim(
                name,
                format!("{:?} does not broadcast into {:?}", b.shape(), a.shape()),
            ));
        }
        let inner = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % inner]))
            .collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.emit(v, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Adds `other` broadcast over the leading axes; its shape must be a
    /// suffix of this shape.
    pub fn add_broadcast(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_suffix(other, "add_broadcast", |x, y| x + y)?;
        Ok(self.emit(v, Op::AddSuffix { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.emit(v, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn mul_broadcast(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_suffix(other, "mul_broadcast", |x, y| x * y)?;
        Ok(self.emit(v, Op::MulSuffix { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * c).collect();
        let v = Tensor::new(a.shape(), data).expect("same shape");
        self.emit(v, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.add(other.scale(-T::one()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.emit(v, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        if axes.len() != a.rank() || axes.iter().any(|&x| x >= a.rank() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {:?}", a.shape())));
        }
        let (data, shape) = permute_data(a.data(), a.shape(), axes);
        let v = Tensor::new(&shape, data)?;
        Ok(self.emit(v, Op::Permute { a: self.id, axes: axes.to_vec() }, &[self.id]))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.rank() || start + len > a.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, a.shape()),
            ));
        }
        let (outer, inner) = split_axis(a.shape(), axis);
        let full = a.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.emit(v, Op::Narrow { a: self.id, axis, start }, &[self.id]))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::new(&shape, data)?;
        Ok(first.emit(v, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Repeats this value over new leading axes so that its shape becomes
    /// `shape` (its own shape must be a suffix of `shape`).
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if !is_suffix(a.shape(), shape) {
            return Err(Error::dim("expand", format!("{:?} -> {shape:?}", a.shape())));
        }
        let reps = shape.iter().product::<usize>() / a.numel().max(1);
        let mut data = Vec::with_capacity(reps * a.numel());
        for _ in 0..reps {
            data.extend_from_slice(a.data());
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.emit(v, Op::Expand { a: self.id }, &[self.id]))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let n = *a.shape().last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::dim("softmax", "empty axis"));
        }
        if a.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.emit(v, Op::Softmax { a: self.id }, &[self.id]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&self, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let n = *a.shape().last().ok_or_else(|| Error::dim("layernorm", "scalar input"))?;
        let nf = T::lit(n as f64);
        let mut data = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.emit(v, Op::LayerNorm { a: self.id, inv_std }, &[self.id]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let a = self.value();
        let (c, s, half) = (T::lit(GELU_COEF), T::lit(GELU_SCALE), T::lit(0.5));
        let data = a
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (s * (x + c * x * x * x)).tanh()))
            .collect();
        let v = Tensor::new(a.shape(), data).expect("same shape");
        self.emit(v, Op::Gelu { a: self.id }, &[self.id])
    }

    /// Scales each row (last axis) to unit L2 norm; norms are floored at `eps`.
    pub fn l2_normalize(&self, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let n = *a.shape().last().ok_or_else(|| Error::dim("l2_normalize", "scalar input"))?;
        let mut data = a.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.emit(v, Op::L2Normalize { a: self.id, norms }, &[self.id]))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} with {} labels", a.shape(), labels.len()),
            ));
        }
        let c = a.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let mut probs = a.data().to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[y];
            softmax_in_place(row);
        }
        let loss = total / T::lit(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.emit(Tensor::scalar(loss), op, &[self.id]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.emit(Tensor::scalar(total), Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let a = self.value();
        let total: T = a.data().iter().copied().sum();
        let v = Tensor::scalar(total / T::lit(a.numel() as f64));
        self.emit(v, Op::Mean { a: self.id }, &[self.id])
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (out, out_shape) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out[i * 6 + j * 3 + k], data[j * 12 + k * 4 + i]);
                }
            }
        }
    }

    #[test]
    fn matmul_identity_and_selection() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let row = tape.constant(t(&[1, 2], &[1., 0.]));
        let col = tape.constant(t(&[2, 1], &[0., 5.]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2], &[0., 0.])).softmax().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(t(&[3], &[7., 7., 7.])).softmax().unwrap();
        for v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let nan = tape.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(nan.softmax(), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_high_precision_oracle() {
        // exp(k - 3) / sum, evaluated independently with f64 literals.
        let e = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
        let z: f64 = e.iter().sum();
        let tape = Tape::<f32>::new();
        let s = tape
            .constant(Tensor::new(&[3], vec![1., 2., 3.]).unwrap())
            .softmax()
            .unwrap();
        for (got, want) in s.value().data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let tape = Tape::<f32>::new();
        let y = tape.constant(Tensor::full(&[2, 5], 3.5)).layernorm(1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_confident_and_bad_label() {
        let tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::new(&[1, 2], vec![10., -10.]).unwrap());
        let l = logits.cross_entropy(&[0]).unwrap().value().item();
        assert!(l >= 0.0 && l < 1e-8);
        assert!(matches!(logits.cross_entropy(&[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[1., -2., 3.]).with_grad());
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1., 1., 1.]);

        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[1., -2., 3.]).with_grad());
        let g = tape.backward(w.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        let c = tape.constant(t(&[2], &[3., 4.]));
        let g = tape.backward(w.mul(c).unwrap().sum()).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3., 4.]);
        assert!(g.get(c).is_none());
    }
}
