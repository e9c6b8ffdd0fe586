//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are pushed
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! A graph belongs to one logical execution context. Parallel trainers build
//! one graph each.

use crate::error::{HtrmError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    AddBias(Var, Var, usize),
    Concat(Vec<Var>, usize),
    Conv { x: Var, w: Var, groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    // LayerNorm keeps (normalized input, per-row inverse std).
    saved: Option<(Vec<f64>, Vec<f64>)>,
}

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.push_saved(value, op, None)
    }

    fn push_saved(
        &mut self,
        value: Tensor,
        op: Op,
        saved: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(HtrmError::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HtrmError::usage(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Matrix product `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => {
                return Err(HtrmError::usage(format!(
                    "matmul: incompatible shapes {sa:?} and {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &self.value(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.value(b).data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(HtrmError::usage(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let out = permute_data(self.value(a), perm);
        self.push(out, Op::Permute(a, perm.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(HtrmError::usage("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(HtrmError::usage(format!(
                "softmax: axis {axis} out of range for rank {}",
                x.rank()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(out, Op::Softmax(a, axis))
    }

    /// Adds `bias` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&mut self, a: Var, bias: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || self.value(bias).len() != x.shape()[axis] {
            return Err(HtrmError::usage(format!(
                "add_bias: bias of {:?} does not match axis {axis} of {:?}",
                self.shape(bias),
                x.shape()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let b = self.value(bias).data();
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[j];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(out, Op::AddBias(a, bias, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| HtrmError::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(HtrmError::usage(format!("concat: axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(HtrmError::usage(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis))
    }

    /// Same-padded grouped cross-correlation.
    ///
    /// `x` is `[c_in, s1, .., sr]` with spatial rank `r` in 1..=3 and `w` is
    /// `[c_out, c_in / groups, k1, .., kr]`. Every kernel extent must be odd;
    /// each spatial axis is zero-padded by `(k - 1) / 2` on both sides so the
    /// output is `[c_out, s1, .., sr]`.
    pub fn conv_same(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), groups)?;
        let mut out = vec![0.0; geom.out_len()];
        geom.forward(self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = vec![geom.c_out];
        shape.extend_from_slice(&self.shape(x)[1..]);
        self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, groups })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(HtrmError::usage(format!(
                "layer_norm: affine parameters must have length {n}"
            )));
        }
        let rows = self.value(x).len() / n;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push_saved(
            Tensor::from_parts(xs, out),
            Op::LayerNorm { x, gamma, beta },
            Some((xhat, rstd)),
        )
    }

    /// The normalized (pre-affine) activations of a layer-norm node.
    pub fn layer_norm_normalized(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.saved) {
            (Op::LayerNorm { .. }, Some((xhat, _))) => Some(Tensor::from_parts(
                node.value.shape().to_vec(),
                xhat.clone(),
            )),
            _ => None,
        }
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(HtrmError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| axpy(s, g, *c)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if va[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = if sa.len() == 2 {
                    (1, sa[0], sa[1])
                } else {
                    (sa[0], sa[1], sa[2])
                };
                let n = sb[sb.len() - 1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut s[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &|s| {
                    for bi in 0..batch {
                        gemm_tn(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut s[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = permute_data(&gt, &inv);
                acc(*a, &|s| axpy(s, back.data(), 1.0));
            }
            Op::Reshape(a) => acc(*a, &|s| axpy(s, g, 1.0)),
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*a, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, bias, axis) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*bias, &|s| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            s[j] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    acc(p, &|s| {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + chunk];
                            axpy(&mut s[o * chunk..(o + 1) * chunk], src, 1.0);
                        }
                    });
                    start += chunk;
                }
            }
            Op::Conv { x, w, groups } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *groups)
                    .expect("geometry validated in forward");
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &|s| geom.backward_input(g, vw, s));
                acc(*w, &|s| geom.backward_kernel(g, vx, s));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, rstd) = node.saved.as_ref().expect("layer norm saves stats");
                let n = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                acc(*x, &|s| {
                    for r in 0..rows {
                        let base = r * n;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dh = g[base + j] * gam[j];
                            m1 += dh;
                            m2 += dh * xhat[base + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dh = g[base + j] * gam[j];
                            s[base + j] += rstd[r] * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j];
                        }
                    }
                });
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Permute(a, _)
        | Op::Reshape(a)
        | Op::Softmax(a, _) => vec![*a],
        Op::AddBias(a, b, _) => vec![*a, *b],
        Op::Concat(parts, _) => parts.clone(),
        Op::Conv { x, w, .. } => vec![*x, *w],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sum(..) => "sum",
        Op::MatMul(..) => "matmul",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::Softmax(..) => "softmax",
        Op::AddBias(..) => "add_bias",
        Op::Concat(..) => "concat",
        Op::Conv { .. } => "conv_same",
        Op::LayerNorm { .. } => "layer_norm",
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// `c += a·b` with `a: m×k`, `b: k×n`.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(crow, &b[p * n..(p + 1) * n], av);
        }
    }
}

/// `c += g·bᵀ` with `g: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ·g` with `a: m×k`, `g: m×n`, `c: k×n`.
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut c[p * n..(p + 1) * n], grow, av);
        }
    }
}

/// Convolution geometry normalized to three spatial axes.
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    per_group_in: usize,
    out_per_group: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], groups: usize) -> Result<Self> {
        let r = xs.len().wrapping_sub(1);
        if !(1..=3).contains(&r) || ws.len() != r + 2 {
            return Err(HtrmError::usage(format!(
                "conv_same: input {xs:?} / kernel {ws:?} ranks do not describe a 1-3D convolution"
            )));
        }
        if groups == 0 || !xs[0].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) || ws[1] * groups != xs[0] {
            return Err(HtrmError::usage(format!(
                "conv_same: {groups} groups incompatible with input {xs:?} and kernel {ws:?}"
            )));
        }
        if let Some(k) = ws[2..].iter().find(|&&k| k % 2 == 0) {
            return Err(HtrmError::usage(format!(
                "conv_same: kernel extent {k} is even; same padding needs odd extents"
            )));
        }
        let mut dims = [1; 3];
        let mut kernel = [1; 3];
        dims[3 - r..].copy_from_slice(&xs[1..]);
        kernel[3 - r..].copy_from_slice(&ws[2..]);
        Ok(ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            per_group_in: ws[1],
            out_per_group: ws[0] / groups,
            dims,
            kernel,
        })
    }

    fn out_len(&self) -> usize {
        self.c_out * self.dims.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.dims.iter().product()
    }

    /// Calls `f(co, ci, kernel_index, dz, dy, dx)` for every kernel tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize, isize, isize, isize)) {
        let [kd, kh, kw] = self.kernel;
        let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        for co in 0..self.c_out {
            let group = co / self.out_per_group;
            for cl in 0..self.per_group_in {
                let ci = group * self.per_group_in + cl;
                for a in 0..kd {
                    for b in 0..kh {
                        for c in 0..kw {
                            let kidx = (((co * self.per_group_in + cl) * kd + a) * kh + b) * kw + c;
                            f(
                                co,
                                ci,
                                kidx,
                                a as isize - pd,
                                b as isize - ph,
                                c as isize - pw,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Visits aligned (output row, input row) pairs for one tap.
    fn rows(
        &self,
        dz: isize,
        dy: isize,
        dx: isize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let [d, h, w] = self.dims.map(|v| v as isize);
        let z0 = 0.max(-dz);
        let z1 = d.min(d - dz);
        let y0 = 0.max(-dy);
        let y1 = h.min(h - dy);
        let x0 = 0.max(-dx);
        let x1 = w.min(w - dx);
        if x1 <= x0 {
            return;
        }
        let len = (x1 - x0) as usize;
        for z in z0..z1 {
            for y in y0..y1 {
                let out = ((z * h + y) * w + x0) as usize;
                let inp = (((z + dz) * h + (y + dy)) * w + x0 + dx) as usize;
                f(out, inp, len);
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let plane = self.plane();
        self.taps(|co, ci, kidx, dz, dy, dx| {
            let wv = w[kidx];
            if wv == 0.0 {
                return;
            }
            self.rows(dz, dy, dx, |o, i, len| {
                let dst = &mut out[co * plane + o..co * plane + o + len];
                axpy(dst, &x[ci * plane + i..ci * plane + i + len], wv);
            });
        });
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let plane = self.plane();
        self.taps(|co, ci, kidx, dz, dy, dx| {
            let wv = w[kidx];
            if wv == 0.0 {
                return;
            }
            self.rows(dz, dy, dx, |o, i, len| {
                let dst = &mut gx[ci * plane + i..ci * plane + i + len];
                axpy(dst, &g[co * plane + o..co * plane + o + len], wv);
            });
        });
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let plane = self.plane();
        debug_assert_eq!(x.len(), self.c_in * plane);
        self.taps(|co, ci, kidx, dz, dy, dx| {
            let mut s = 0.0;
            self.rows(dz, dy, dx, |o, i, len| {
                let go = &g[co * plane + o..co * plane + o + len];
                let xi = &x[ci * plane + i..ci * plane + i + len];
                s += go.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            });
            gw[kidx] += s;
        });
    }
}
