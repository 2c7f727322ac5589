use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{numel, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Debug)]
enum Bcast {
    Same,
    /// Right operand equals the trailing dimensions of the left one.
    Cycle(usize),
    Index(Vec<usize>),
}

impl Bcast {
    fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        if rhs.len() > lhs.len() {
            return Err(Error::shape(op, lhs, rhs));
        }
        let offset = lhs.len() - rhs.len();
        for (k, &d) in rhs.iter().enumerate() {
            if d != 1 && d != lhs[offset + k] {
                return Err(Error::shape(op, lhs, rhs));
            }
        }
        let first_real = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
        let trimmed = &rhs[first_real..];
        if trimmed == &lhs[lhs.len() - trimmed.len()..] {
            return Ok(Bcast::Cycle(numel(trimmed).max(1)));
        }
        // General case: stride 0 on broadcast axes.
        let mut strides = vec![0usize; lhs.len()];
        let mut acc = 1;
        for k in (0..rhs.len()).rev() {
            if rhs[k] != 1 {
                strides[offset + k] = acc;
            }
            acc *= rhs[k];
        }
        let n = numel(lhs);
        let mut map = Vec::with_capacity(n);
        for i in 0..n {
            let mut rem = i;
            let mut j = 0;
            for a in (0..lhs.len()).rev() {
                j += (rem % lhs[a]) * strides[a];
                rem /= lhs[a];
            }
            map.push(j);
        }
        Ok(Bcast::Index(map))
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Index(m) => m[i],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, T),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batch: usize,
        p: usize,
        q: usize,
        r: usize,
    },
    Sigmoid(Var),
    Elu(Var),
    EluPlusOne(Var),
    Relu(Var),
    Square(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        cols: usize,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        source: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Leaves may borrow their buffers (`'a`), so model parameters are never
/// copied onto the tape.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`]: gradients of the loss for every leaf that
/// requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(t.shape.clone(), Cow::Borrowed(&t.data), Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(t.shape.clone(), Cow::Borrowed(&t.data), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.grad_of(v)
    }

    // ----- elementwise binary -----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bc = Bcast::new(name, &shape, self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[bc.map(i)]))
            .collect();
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(shape, Cow::Owned(out), make(a, b, bc), g))
    }

    /// `a + b`, with `b` broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ----- elementwise unary -----

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let g = self.grad_of(x);
        self.push(shape, Cow::Owned(out), op, g)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v.exp() - T::one() },
            Op::Elu(x),
        )
    }

    /// `elu(x) + 1`: `x + 1` for `x >= 0`, `exp(x)` otherwise. Strictly positive.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v + T::one() } else { v.exp() },
            Op::EluPlusOne(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    // ----- row-wise -----

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Axis {
            op: "softmax",
            axis: 0,
            shape: shape.clone(),
        })?;
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let g = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { x, cols }, g))
    }

    /// Layer normalisation over the last dimension, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = match shape.last() {
            Some(&c) if c > 0 => c,
            _ => {
                return Err(Error::Axis {
                    op: "layer_norm",
                    axis: 0,
                    shape,
                })
            }
        };
        let n = T::of(cols as f64);
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(out), Op::LayerNorm { x, cols, inv_std }, g))
    }

    // ----- linear algebra -----

    /// Batched matrix product `a[.., p, q] · b[.., q, r]`.
    ///
    /// The batch dimensions of `b` must be a suffix of those of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if bb.len() > ba.len() || ba[ba.len() - bb.len()..] != *bb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = numel(ba);
        let b_batch = numel(bb);
        let mut shape = ba.to_vec();
        shape.extend_from_slice(&[p, r]);

        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); batch * p * r];
        for i in 0..batch {
            let j = i % b_batch;
            matmul_acc(
                &av[i * p * q..(i + 1) * p * q],
                &bv[j * q * r..(j + 1) * q * r],
                &mut out[i * p * r..(i + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let g = self.grad_of(a) || self.grad_of(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            b_batch,
            p,
            q,
            r,
        };
        Ok(self.push(shape, Cow::Owned(out), op, g))
    }

    /// `x · w + bias` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ----- layout -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let g = self.grad_of(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), g))
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(Error::shape("permute", &shape, perm));
        }
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::shape("permute", &shape, perm));
            }
            seen[p] = true;
        }
        let mut in_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * shape[k + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n = numel(&shape);
        let mut source = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let mut j = 0;
            for k in 0..rank {
                j += idx[k] * in_strides[perm[k]];
            }
            source.push(j);
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let xv = self.value(x);
        let out: Vec<T> = source.iter().map(|&j| xv[j]).collect();
        let g = self.grad_of(x);
        Ok(self.push(out_shape, Cow::Owned(out), Op::Permute { x, source }, g))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                shape: self.shape(x).to_vec(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of bounds for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let g = self.grad_of(x);
        let op = Op::Slice {
            x,
            outer,
            axis_len,
            start,
            len,
            inner,
        };
        Ok(self.push(out_shape, Cow::Owned(out), op, g))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let start = o * sz * inner;
                out.extend_from_slice(&self.value(v)[start..start + sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let g = xs.iter().any(|&v| self.grad_of(v));
        let op = Op::Concat {
            xs: xs.to_vec(),
            outer,
            sizes,
            inner,
        };
        Ok(self.push(shape, Cow::Owned(out), op, g))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, &s)?);
        }
        self.concat(&lifted, 0)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let g = self.grad_of(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::SumAll(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let g = self.grad_of(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::MeanAll(x), g)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..axis_len {
                let src = &xv[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let g = self.grad_of(x);
        let op = Op::SumAxis {
            x,
            outer,
            axis_len,
            inner,
        };
        Ok(self.push(out_shape, Cow::Owned(out), op, g))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ----- backward -----

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Contract(format!("loss {loss:?} is not on this graph")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        // Only leaves keep their gradient.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &s) in g.iter().enumerate() {
                        gb[bc.map(i)] += s;
                    }
                }
            }
            Op::Sub(a, b, bc) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &s) in g.iter().enumerate() {
                        gb[bc.map(i)] -= s;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (d, &s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s * bv[bc.map(i)];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &s) in g.iter().enumerate() {
                        gb[bc.map(i)] += s * av[i];
                    }
                }
            }
            Op::Div(a, b, bc) => {
                let bv = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (d, &s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s / bv[bc.map(i)];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &s) in g.iter().enumerate() {
                        let j = bc.map(i);
                        gb[j] -= s * out[i] / bv[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * *c;
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                b_batch,
                p,
                q,
                r,
            } => {
                let (p, q, r) = (*p, *q, *r);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let j = i % b_batch;
                        matmul_nt_acc(
                            &g[i * p * r..(i + 1) * p * r],
                            &bv[j * q * r..(j + 1) * q * r],
                            &mut ga[i * p * q..(i + 1) * p * q],
                            p,
                            q,
                            r,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let j = i % b_batch;
                        matmul_tn_acc(
                            &av[i * p * q..(i + 1) * p * q],
                            &g[i * p * r..(i + 1) * p * r],
                            &mut gb[j * q * r..(j + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out.iter()) {
                        *d += s * y * (T::one() - y);
                    }
                }
            }
            Op::Elu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let dy = if xv[i] >= T::zero() {
                            T::one()
                        } else {
                            out[i] + T::one()
                        };
                        gx[i] += g[i] * dy;
                    }
                }
            }
            Op::EluPlusOne(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let dy = if xv[i] >= T::zero() { T::one() } else { out[i] };
                        gx[i] += g[i] * dy;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (xv[i] + xv[i]);
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dx, dy), y) in gx
                        .chunks_mut(*cols)
                        .zip(g.chunks(*cols))
                        .zip(out.chunks(*cols))
                    {
                        let dot = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                        for k in 0..*cols {
                            dx[k] += y[k] * (dy[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, cols, inv_std } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::of(*cols as f64);
                    for (((dx, dy), y), &inv) in gx
                        .chunks_mut(*cols)
                        .zip(g.chunks(*cols))
                        .zip(out.chunks(*cols))
                        .zip(inv_std)
                    {
                        let mean_dy = dy.iter().copied().sum::<T>() / n;
                        let mean_dy_y = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for k in 0..*cols {
                            dx[k] += inv * (dy[k] - mean_dy - y[k] * mean_dy_y);
                        }
                    }
                }
            }
            Op::Permute { x, source } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&j, &s) in source.iter().zip(g) {
                        gx[j] += s;
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let block = len * inner;
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        for (d, &s) in gx[base..base + block]
                            .iter_mut()
                            .zip(&g[o * block..(o + 1) * block])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat {
                xs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in xs.iter().zip(sizes) {
                    if let Some(gx) = self.slot(grads, v) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            for (d, &s) in gx[o * sz * inner..(o + 1) * sz * inner]
                                .iter_mut()
                                .zip(&g[src..src + sz * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += sz;
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..*axis_len {
                            let base = (o * axis_len + a) * inner;
                            for (d, &s) in gx[base..base + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
