//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the node
//! list is already a topological order. [`Graph::backward`] walks it in reverse
//! and accumulates gradients into every node that depends on a parameter.

use std::collections::HashMap;

use crate::error::{mismatch, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Square(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Slice {
        x: Var,
        split: AxisSplit,
        start: usize,
        end: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
    },
    Minimum(Var, Var),
    Clamp(Var, T, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over element type `T`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. No gradient flows into constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.bound.insert(id, v);
        v
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `x`, if it was reached.
    pub fn grad(&self, x: Var) -> Option<&[T]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[.., k] x [k, n] -> [.., n]`; every leading axis of `a` is treated as a row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("shape checked");
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape(), data).expect("same numel");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_map(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y }))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, row: Var, mul: bool) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n || self.shape(row).len() != 1 {
            return Err(mismatch(op_name, self.shape(a), self.shape(row)));
        }
        let va = self.value(a);
        let vr = self.value(row).data();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(vr) {
                if mul {
                    *x *= r;
                } else {
                    *x += r;
                }
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(value, op, &[a, row]))
    }

    /// Adds a `[n]` vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, false)
    }

    /// Multiplies every row of `a` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, Op::Elu(a), |x| if x > T::zero() { x } else { x.exp_m1() })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.map(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    // ---------------------------------------------------------------- reductions

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape(), data).expect("same numel");
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<T>() / T::of(va.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let data: Vec<T> = va.data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(&shape, data).expect("rows");
        self.push(value, Op::SumLast(a), &[a])
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn split(shape: &[usize], axis: usize) -> AxisSplit {
        AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(NnError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let split = Self::split(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(split.outer * width * split.inner);
        for o in 0..split.outer {
            let base = (o * split.len + start) * split.inner;
            data.extend_from_slice(&src[base..base + width * split.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                split,
                start,
                end,
            },
            &[x],
        ))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(NnError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(NnError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {ref_shape:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &ref_shape, s));
            }
            total += s[axis];
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let inner: usize = ref_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            parts,
        ))
    }

    // ---------------------------------------------------------------- fused blocks

    /// 2-D convolution. `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(mismatch("conv2d bias", &sw, self.shape(b)));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            out_w: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * area];
        let mut cols = vec![T::zero(); patch * area];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let sample = geom.in_ch * geom.height * geom.width;
        for n in 0..geom.batch {
            im2col(&geom, &xs[n * sample..(n + 1) * sample], &mut cols);
            let dst = &mut out[n * geom.out_ch * area..(n + 1) * geom.out_ch * area];
            for (o, chunk) in dst.chunks_exact_mut(area).enumerate() {
                chunk.fill(bs[o]);
            }
            T::gemm(
                geom.out_ch,
                patch,
                area,
                T::one(),
                ws,
                patch as isize,
                1,
                &cols,
                area as isize,
                1,
                T::one(),
                dst,
                area as isize,
                1,
            );
        }
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` queries, keys and values.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(mismatch("attention", &sq, self.shape(k)));
        }
        let (batch, len, dim) = (sq[0], sq[1], sq[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::InvalidArgument {
                op: "attention",
                msg: format!("model width {dim} is not divisible by {heads} heads"),
            });
        }
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut out = vec![T::zero(); batch * len * dim];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len];
                for i in 0..len {
                    let qi = &qs[(b * len + i) * dim + h * dh..][..dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &ks[(b * len + j) * dim + h * dh..][..dh];
                        *r = dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(b * len + i) * dim + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vs[(b * len + j) * dim + h * dh..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&sq, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// One GRU step. `x: [B, I]`, `h: [B, H]`, `w_in: [I, 3H]`, `w_hid: [H, 3H]`,
    /// biases `[3H]`. Gate order along the `3H` axis is reset, update, candidate.
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_in: Var,
        w_hid: Var,
        b_in: Var,
        b_hid: Var,
    ) -> Result<Var> {
        let hidden = *self.shape(h).last().unwrap_or(&0);
        if self.shape(w_hid) != [hidden, 3 * hidden] {
            return Err(mismatch("gru_cell", self.shape(h), self.shape(w_hid)));
        }
        let gx = self.matmul(x, w_in)?;
        let gx = self.add_row(gx, b_in)?;
        let gh = self.matmul(h, w_hid)?;
        let gh = self.add_row(gh, b_hid)?;
        let axis = self.shape(gx).len() - 1;
        let xr = self.slice(gx, axis, 0, hidden)?;
        let xz = self.slice(gx, axis, hidden, 2 * hidden)?;
        let xn = self.slice(gx, axis, 2 * hidden, 3 * hidden)?;
        let hr = self.slice(gh, axis, 0, hidden)?;
        let hz = self.slice(gh, axis, hidden, 2 * hidden)?;
        let hn = self.slice(gh, axis, 2 * hidden, 3 * hidden)?;
        let r = self.add(xr, hr)?;
        let r = self.sigmoid(r);
        let z = self.add(xz, hz)?;
        let z = self.sigmoid(z);
        let gated = self.mul(r, hn)?;
        let n = self.add(xn, gated)?;
        let n = self.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = self.sub(h, n)?;
        let mixed = self.mul(z, diff)?;
        self.add(n, mixed)
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a single-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(NnError::InvalidArgument {
                op: "backward",
                msg: format!("root must be a scalar, got shape {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.numel() / k.max(1);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = dC * B^T
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b), 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB = A^T * dC
                    T::gemm(k, m, n, T::one(), val(*a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (((d, &s), &x), &y) in ga.iter_mut().zip(g).zip(va).zip(vb) {
                        if x <= y {
                            *d += s;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (((d, &s), &x), &y) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        if x > y {
                            *d += s;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    let n = gr.len();
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (val(*a), val(*row));
                let n = vr.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (dc, gc) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, &s), &r) in dc.iter_mut().zip(gc).zip(vr) {
                            *d += s * r;
                        }
                    }
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    for (xc, gc) in va.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((d, &s), &x) in gr.iter_mut().zip(gc).zip(xc) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s * *c;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * y;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * y * (T::one() - y);
                    }
                }
            }
            Op::Elu(a) => {
                let va = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        *d += if x > T::zero() { s } else { s * x.exp() };
                    }
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let va = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    let two = T::of(2.0);
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        *d += two * s * x;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x >= *lo && x <= *hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((dc, gc), yc) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                        let inner = dot(gc, yc);
                        for ((d, &s), &y) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += y * (s - inner);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / T::of(ga.len().max(1) as f64);
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumLast(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let n = ga.len() / g.len().max(1);
                    for (dc, &s) in ga.chunks_exact_mut(n).zip(g) {
                        for d in dc {
                            *d += s;
                        }
                    }
                }
            }
            Op::Slice {
                x,
                split,
                start,
                end,
            } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = (end - start) * split.inner;
                    for (o, gc) in g.chunks_exact(width).enumerate() {
                        let base = (o * split.len + start) * split.inner;
                        add_into(&mut gx[base..base + width], gc);
                    }
                }
            }
            Op::Concat { parts, outer } => {
                let total: usize = parts.iter().map(|p| nodes[p.0].value.numel()).sum::<usize>() / outer.max(&1);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel() / outer.max(&1);
                    if let Some(gp) = slot(nodes, grads, p) {
                        for o in 0..*outer {
                            add_into(&mut gp[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                        }
                    }
                    offset += len;
                }
                debug_assert_eq!(offset, total);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (patch, area) = (geom.patch(), geom.out_area());
                let sample = geom.in_ch * geom.height * geom.width;
                let (xs, ws) = (val(*x), val(*w));
                if let Some(gb) = slot(nodes, grads, *b) {
                    for n in 0..geom.batch {
                        for o in 0..geom.out_ch {
                            let s0 = (n * geom.out_ch + o) * area;
                            gb[o] += g[s0..s0 + area].iter().copied().sum::<T>();
                        }
                    }
                }
                let mut cols = vec![T::zero(); patch * area];
                if let Some(gw) = slot(nodes, grads, *w) {
                    for n in 0..geom.batch {
                        im2col(geom, &xs[n * sample..(n + 1) * sample], &mut cols);
                        let gy = &g[n * geom.out_ch * area..(n + 1) * geom.out_ch * area];
                        // dW += dY * cols^T
                        T::gemm(geom.out_ch, area, patch, T::one(), gy, area as isize, 1, &cols, 1, area as isize, T::one(), gw, patch as isize, 1);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for n in 0..geom.batch {
                        let gy = &g[n * geom.out_ch * area..(n + 1) * geom.out_ch * area];
                        // dcols = W^T * dY
                        T::gemm(patch, geom.out_ch, area, T::one(), ws, 1, patch as isize, gy, area as isize, 1, T::zero(), &mut cols, area as isize, 1);
                        col2im_add(geom, &cols, &mut gx[n * sample..(n + 1) * sample]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = nodes[q.0].value.shape();
                let (batch, len, dim) = (shape[0], shape[1], shape[2]);
                let dh = dim / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut gq = vec![T::zero(); qs.len()];
                let mut gk = vec![T::zero(); ks.len()];
                let mut gv = vec![T::zero(); vs.len()];
                let mut dp = vec![T::zero(); len];
                for b in 0..batch {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len];
                        for i in 0..len {
                            let go = &g[(b * len + i) * dim + h * dh..][..dh];
                            let prow = &p[i * len..(i + 1) * len];
                            for j in 0..len {
                                let vj = (b * len + j) * dim + h * dh;
                                dp[j] = dot(go, &vs[vj..vj + dh]);
                                for (d, &s) in gv[vj..vj + dh].iter_mut().zip(go) {
                                    *d += prow[j] * s;
                                }
                            }
                            let inner = dot(&dp, prow);
                            let qi = (b * len + i) * dim + h * dh;
                            for j in 0..len {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                let kj = (b * len + j) * dim + h * dh;
                                for t in 0..dh {
                                    gq[qi + t] += ds * ks[kj + t];
                                    gk[kj + t] += ds * qs[qi + t];
                                }
                            }
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, *q) {
                    add_into(d, &gq);
                }
                if let Some(d) = slot(nodes, grads, *k) {
                    add_into(d, &gk);
                }
                if let Some(d) = slot(nodes, grads, *v) {
                    add_into(d, &gv);
                }
            }
        }
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        total += *r;
    }
    for r in row.iter_mut() {
        *r /= total;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[oh * g.out_w + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < g.height && (iw as usize) < g.width {
                            x[(c * g.height + ih as usize) * g.width + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dx[(c * g.height + ih as usize) * g.width + iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
