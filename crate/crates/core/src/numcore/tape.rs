//! Eager reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. [`Tape::backward`] then walks the nodes in exact reverse order,
//! accumulating adjoints into every node that requires a gradient.

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Ln(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CosineRows(Var, Var),
    MatVec(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: bool,
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

    /// Negative control for gradient checking: perturbs the sigmoid backward
    /// rule so finite differences disagree.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Same-shape sum, or a `[n]` vector broadcast over the rows of `[m×n]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        let op = if self.shape(a) == self.shape(b) {
            Op::Add(a, b)
        } else {
            Op::AddRow(a, b)
        };
        Ok(self.record(v, op, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = ops::scale(self.value(a), c);
        self.record(v, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = ops::scale(self.value(x), sv);
        Ok(self.record(v, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `a·x + b` with constants `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        self.record(v, Op::Affine(x, a), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = ops::sigmoid(self.value(x));
        self.record(v, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = ops::silu(self.value(x));
        self.record(v, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = ops::gelu(self.value(x));
        self.record(v, Op::Gelu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.record(v, Op::Ln(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.record(v, Op::Exp(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = ops::softmax_rows(self.value(x));
        self.record(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let v = ops::layer_norm_rows(self.value(x));
        self.record(v, Op::LayerNorm(x), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::mean_axis(self.value(x), axis)?;
        Ok(self.record(v, Op::MeanAxis(x, axis), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if t.rank() != 2 || len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in t.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_parts(vec![m, len], out);
        Ok(self.record(v, Op::SliceCols(x, start), &[x]))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if t.rank() != 2 || len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let v = Tensor::from_parts(vec![len, n], t.data()[start * n..(start + len) * n].to_vec());
        Ok(self.record(v, Op::SliceRows(x, start), &[x]))
    }

    /// Row `i` of a matrix as a `[n]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(x, i, 1)?;
        let n = self.value(r).cols();
        let v = Tensor::from_parts(vec![n], self.value(r).data().to_vec());
        // A reshape is a same-size affine identity.
        let id = self.push(v, Op::Affine(r, 1.0), self.requires_grad(r));
        Ok(id)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != m {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.record(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = self.value(first).cols();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != n {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
        }
        let m: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.record(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Cosine of every row of `a [m×d]` with `b [d]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::cosine_rows(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::CosineRows(a, b), &[a, b]))
    }

    /// `a [m×d] · v [d] → [m]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (at, vt) = (self.value(a), self.value(v));
        if at.rank() != 2 || vt.rank() != 1 || at.cols() != vt.numel() {
            return Err(Error::shape("matvec", at.shape(), vt.shape()));
        }
        let out: Vec<f64> = at
            .data()
            .chunks(at.cols())
            .map(|row| ops::dot(row, vt.data()))
            .collect();
        let m = out.len();
        Ok(self.record(Tensor::from_parts(vec![m], out), Op::MatVec(a, v), &[a, v]))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let mut acc = |v: Var, contrib: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };
        let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, ops::matmul_nt(&gt, val(*b))?.data());
                acc(*b, ops::matmul_tn(val(*a), &gt)?.data());
            }
            Op::MatMulNt(a, b) => {
                acc(*a, ops::matmul(&gt, val(*b))?.data());
                acc(*b, ops::matmul_tn(&gt, val(*a))?.data());
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::AddRow(a, b) => {
                acc(*a, g);
                let n = gt.cols();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*b, &gb);
            }
            Op::Sub(a, b) => {
                acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::Scale(x, c) | Op::Affine(x, c) => {
                let gx: Vec<f64> = g.iter().map(|g| g * c).collect();
                acc(*x, &gx);
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s).data()[0];
                let gx: Vec<f64> = g.iter().map(|g| g * sv).collect();
                acc(*x, &gx);
                let gs = ops::dot(g, val(*x).data());
                acc(*s, &[gs]);
            }
            Op::Sigmoid(x) => {
                let k = if self.fault { 1.01 } else { 1.0 };
                let gx: Vec<f64> = g
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| k * g * y * (1.0 - y))
                    .collect();
                acc(*x, &gx);
            }
            Op::Silu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| {
                        let s = ops::sigmoid_scalar(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                acc(*x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| g * ops::gelu_grad_scalar(x))
                    .collect();
                acc(*x, &gx);
            }
            Op::Ln(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                acc(*x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                acc(*x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let n = y.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = ops::dot(gr, yr);
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - s);
                    }
                }
                acc(*x, &gx);
            }
            Op::LayerNorm(x) => {
                let xv = val(*x);
                let n = xv.cols();
                let nf = n as f64;
                let mut gx = vec![0.0; g.len()];
                for ((xr, gr), (yr, out)) in xv
                    .data()
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(y.data().chunks(n).zip(gx.chunks_mut(n)))
                {
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + ops::LAYER_NORM_EPS).sqrt();
                    let sg: f64 = gr.iter().sum();
                    let sgy = ops::dot(gr, yr);
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = inv / nf * (nf * gi - sg - yi * sgy);
                    }
                }
                acc(*x, &gx);
            }
            Op::MeanAxis(x, axis) => {
                let xv = val(*x);
                let gx: Vec<f64> = match (xv.shape(), *axis) {
                    ([n], _) => vec![g[0] / *n as f64; *n],
                    ([m, n], 0) => {
                        let inv = 1.0 / *m as f64;
                        (0..m * n).map(|i| g[i % n] * inv).collect()
                    }
                    ([_, n], _) => {
                        let inv = 1.0 / *n as f64;
                        (0..xv.numel()).map(|i| g[i / n] * inv).collect()
                    }
                    _ => unreachable!("validated on forward"),
                };
                acc(*x, &gx);
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(*x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(*x, &vec![g[0] / n as f64; n]);
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let n = xv.cols();
                let len = y.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (out, gr) in gx.chunks_mut(n).zip(g.chunks(len)) {
                    out[*start..*start + len].copy_from_slice(gr);
                }
                acc(*x, &gx);
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                gx[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*x, &gx);
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let gp: Vec<f64> = g
                        .chunks(n)
                        .flat_map(|row| row[offset..offset + pc].iter().copied())
                        .collect();
                    acc(p, &gp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = bv.numel();
                let bd = bv.data();
                let nb_raw = ops::norm(bd);
                let nb = nb_raw.max(ops::COSINE_EPS);
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; d];
                for (i, (ar, out)) in av.data().chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                    let na_raw = ops::norm(ar);
                    let na = na_raw.max(ops::COSINE_EPS);
                    let c = y.data()[i];
                    let gi = g[i];
                    let a_floor = na_raw < ops::COSINE_EPS;
                    let b_floor = nb_raw < ops::COSINE_EPS;
                    for j in 0..d {
                        let mut da = bd[j] / (na * nb);
                        if !a_floor {
                            da -= c * ar[j] / (na * na);
                        }
                        out[j] = gi * da;
                        let mut db = ar[j] / (na * nb);
                        if !b_floor {
                            db -= c * bd[j] / (nb * nb);
                        }
                        gb[j] += gi * db;
                    }
                }
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::MatVec(a, v) => {
                let (av, vv) = (val(*a), val(*v));
                let d = vv.numel();
                let mut ga = vec![0.0; av.numel()];
                let mut gv = vec![0.0; d];
                for ((ar, out), gi) in av.data().chunks(d).zip(ga.chunks_mut(d)).zip(g) {
                    for j in 0..d {
                        out[j] = gi * vv.data()[j];
                        gv[j] += gi * ar[j];
                    }
                }
                acc(*a, &ga);
                acc(*v, &gv);
            }
        }
        Ok(())
    }
}
