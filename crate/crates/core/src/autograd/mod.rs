//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every primitive call appends a node holding its output value plus whatever
//! it needs for the backward pass. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and a single reverse sweep visits
//! each node once.

pub mod gradcheck;
pub mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log { x: Var, floor: f64 },
    Mean { x: Var, axis: usize },
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize { x: Var, norms: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    BroadcastLeading { x: Var, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the source for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("internal shape bookkeeping")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `[g,m,k] x [g,k,n] -> [g,m,n]`, or with `transpose_b`,
    /// `[g,m,k] x [g,n,k]^T -> [g,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return shape_err(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
            );
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                let a_i = &ad[i * m * k..(i + 1) * m * k];
                let b_i = &bd[i * k * n..(i + 1) * k * n];
                let o = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    kernels::matmul_nt_acc(a_i, b_i, o, m, k, n);
                } else {
                    kernels::matmul_acc(a_i, b_i, o, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            tensor(vec![g, m, n], out),
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", format!("{sa:?} + {sb:?}"));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(shape, out), Op::Add(a, b), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("mul", format!("{sa:?} * {sb:?}"));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = tensor(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return shape_err("scale_by", format!("factor has shape {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let v = self.value(x);
        let out = tensor(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect());
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = tensor(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// Natural log with inputs floored at `floor`.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, move |e| e.max(floor).ln(), Op::Log { x, floor })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_row(row, o);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(tensor(shape, out), Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::log_softmax_row(row, o);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(tensor(shape, out), Op::LogSoftmax(x), rg)
    }

    /// Mean along `axis`, removing it. Reducing a rank-1 tensor gives `[1]`.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("mean", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(out_shape, out), Op::Mean { x, axis }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Layer normalization over the last axis with population variance:
    /// `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            if denom == 0.0 || !denom.is_finite() {
                return Err(Error::NonFinite { op: "layer_norm" });
            }
            let is = 1.0 / denom;
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                normalized[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            tensor(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut norms = Vec::with_capacity(v.numel() / d);
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite { op: "l2_normalize" });
            }
            norms.push(n);
            for (ov, &rv) in o.iter_mut().zip(row) {
                *ov = rv / n;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, out), Op::L2Normalize { x, norms }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return shape_err("permute", format!("perm {perm:?} for shape {shape:?}"));
        }
        let (out, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return shape_err("concat", format!("{sa:?} ++ {sb:?} on axis {axis}"));
        }
        let (outer, na, inner) = split_axis(&sa, axis);
        let nb = sb[axis];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&bd[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(shape, out), Op::Concat { a, b, axis }, rg))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return shape_err("select", format!("index {index} on axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(out_shape, out), Op::Select { x, axis, index }, rg))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return shape_err("broadcast_leading", "count must be positive");
        }
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, data), Op::BroadcastLeading { x, n }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let send = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(gd, bv.data(), &mut da, m, n, k);
                    send(*a, tensor(vec![m, k], da), grads);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(av.data(), gd, &mut db, m, k, n);
                    send(*b, tensor(vec![k, n], db), grads);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                let mut da = vec![0.0; if need_a { gn * m * k } else { 0 }];
                let mut db = vec![0.0; if need_b { gn * k * n } else { 0 }];
                for i in 0..gn {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // out = a b^T with b [n,k]: da = g b, db = g^T a
                        if need_a {
                            kernels::matmul_acc(gi, bi, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                        }
                        if need_b {
                            kernels::matmul_tn_acc(gi, ai, &mut db[i * k * n..(i + 1) * k * n], m, n, k);
                        }
                    } else {
                        if need_a {
                            kernels::matmul_nt_acc(gi, bi, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                        }
                        if need_b {
                            kernels::matmul_tn_acc(ai, gi, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                        }
                    }
                }
                if need_a {
                    send(*a, tensor(av.shape().to_vec(), da), grads);
                }
                if need_b {
                    send(*b, tensor(bv.shape().to_vec(), db), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                if self.requires_grad(*b) {
                    let bs = self.shape(*b).to_vec();
                    let len = bs.iter().product::<usize>();
                    let mut db = vec![0.0; len];
                    for chunk in gd.chunks(len) {
                        for (o, &v) in db.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    send(*b, tensor(bs, db), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    send(*a, tensor(g.shape().to_vec(), da), grads);
                }
                if self.requires_grad(*b) {
                    let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    send(*b, tensor(g.shape().to_vec(), db), grads);
                }
            }
            Op::Scale(x, c) => {
                let dx = gd.iter().map(|v| v * c).collect();
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                if self.requires_grad(*x) {
                    let dx = gd.iter().map(|v| v * c).collect();
                    send(*x, tensor(g.shape().to_vec(), dx), grads);
                }
                if self.requires_grad(*s) {
                    let ds = kernels::dot(gd, self.value(*x).data());
                    send(*s, tensor(self.shape(*s).to_vec(), vec![ds]), grads);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s = kernels::dot(yr, gr);
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..d {
                        dr[i] = gr[i] - yr[i].exp() * s;
                    }
                }
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                send(*x, tensor(shape, dx), grads);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, Tensor::full(&shape, gd[0]), grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &normalized[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for i in 0..d {
                            let dh = gr[i] * gam[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for i in 0..d {
                            let dh = gr[i] * gam[i];
                            dx[r * d + i] = is * (dh - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                    send(*x, tensor(g.shape().to_vec(), dx), grads);
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * hr[i];
                        }
                    }
                    send(*gamma, tensor(vec![d], dg), grads);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in gd.chunks(d) {
                        for i in 0..d {
                            db[i] += gr[i];
                        }
                    }
                    send(*beta, tensor(vec![d], db), grads);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let s = kernels::dot(yr, gr);
                    for i in 0..d {
                        dx[r * d + i] = (gr[i] - yr[i] * s) / n;
                    }
                }
                send(*x, tensor(g.shape().to_vec(), dx), grads);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, tensor(shape, gd.to_vec()), grads);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (dx, shape) = permute_data(gd, g.shape(), &inverse);
                send(*x, tensor(shape, dx), grads);
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, na, inner) = split_axis(&sa, *axis);
                let nb = sb[*axis];
                let mut da = Vec::with_capacity(outer * na * inner);
                let mut db = Vec::with_capacity(outer * nb * inner);
                let stride = (na + nb) * inner;
                for o in 0..outer {
                    let base = o * stride;
                    da.extend_from_slice(&gd[base..base + na * inner]);
                    db.extend_from_slice(&gd[base + na * inner..base + stride]);
                }
                send(*a, tensor(sa, da), grads);
                send(*b, tensor(sb, db), grads);
            }
            Op::Select { x, axis, index } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let start = (o * n + index) * inner;
                    dx[start..start + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                send(*x, tensor(shape, dx), grads);
            }
            Op::BroadcastLeading { x, n } => {
                let shape = self.shape(*x).to_vec();
                let len = gd.len() / n;
                let mut dx = vec![0.0; len];
                for chunk in gd.chunks(len) {
                    for (o, &v) in dx.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                send(*x, tensor(shape, dx), grads);
            }
        }
    }
}
