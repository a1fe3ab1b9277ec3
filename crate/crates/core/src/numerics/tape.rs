//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its value and the handles it was
//! computed from. Node order is a topological order, so `backward` is a
//! single reverse sweep. Intermediate adjoints live only for the duration of
//! the sweep; adjoints of gradient-tracking leaves are accumulated with `+=`
//! and persist until [`Tape::zero_grad`].
//!
//! A tape is confined to the thread that built it. Parameters enter through
//! [`Tape::param`] as shared `Arc`s, so many tapes (one per image) can read
//! the same weights concurrently without copying them.

use std::sync::Arc;

use super::tensor::{
    affine_rows, layer_norm_stats, matmul, matmul_nt, matmul_tn, softmax_rows, std_normal_cdf,
    std_normal_pdf,
};
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracks_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracks_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, tracks_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, tracks_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracks_grad)
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Shared leaf; gradient tracked.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let t = self.tracks(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let t = self.tracks(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return dim_err("add", format!("{:?} + {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?.check_finite("add")?;
        let t = self.tracks(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return dim_err("mul", format!("{:?} * {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?.check_finite("mul")?;
        let t = self.tracks(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    /// Adds the vector `row` to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        if r.numel() != c {
            return dim_err("add_row", format!("width {c}, bias {}", r.numel()));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let out = out.check_finite("add_row")?;
        let t = self.tracks(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), t))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor).check_finite("scale")?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), t))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a)).check_finite("softmax_rows")?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::Softmax(a), t))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let c = self.value(x).cols();
        if c == 0 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return dim_err("layer_norm", format!("width {c}"));
        }
        let stats = layer_norm_stats(self.value(x), eps);
        let out = affine_rows(&stats.xhat, self.value(gamma), self.value(beta))
            .check_finite("layer_norm")?;
        let t = self.tracks(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            t,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = super::tensor::gelu(self.value(a)).check_finite("gelu")?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::Gelu(a), t))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(idx)?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), t))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        let t = self.tracks(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let t = self.tracks(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum()).check_finite("sum")?;
        let t = self.tracks(&[a]);
        Ok(self.push(out, Op::Sum(a), t))
    }

    /// Softmax cross-entropy of a single row of logits against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || label >= z.cols() {
            return dim_err(
                "cross_entropy",
                format!("logits {:?}, label {label}", z.shape()),
            );
        }
        let probs = softmax_rows(z);
        let max = z.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max
            + z.data()
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - max).exp())
                .ln();
        let loss = Tensor::scalar(lse - z.data()[label]).check_finite("cross_entropy")?;
        let t = self.tracks(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            t,
        ))
    }

    /// Propagates d(loss)/d(node) to every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (parent, contrib) in self.local_backward(i, &g)? {
                if !self.nodes[parent.0].tracks_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let want = |v: Var| self.nodes[v.0].tracks_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    out.push((*a, matmul_nt(g, val(*b))?));
                }
                if want(*b) {
                    out.push((*b, matmul_tn(val(*a), g)?));
                }
            }
            Op::MatMulNT(a, b) => {
                if want(*a) {
                    out.push((*a, matmul(g, val(*b))?));
                }
                if want(*b) {
                    out.push((*b, matmul_tn(g, val(*a))?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if want(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    out.push((*a, Tensor::new(g.shape(), d)?));
                }
                if want(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    out.push((*b, Tensor::new(g.shape(), d)?));
                }
            }
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if want(*row) {
                    out.push((*row, column_sums(g, val(*row).shape())));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.map(|v| v * *f))),
            Op::Softmax(a) => {
                let y = node.value.as_ref();
                let c = y.cols();
                let mut d = vec![T::zero(); y.numel()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape(), d)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = xhat.cols();
                let gam = val(*gamma).data();
                if want(*x) {
                    let inv_c = T::one() / T::from_usize(c);
                    let mut d = vec![T::zero(); xhat.numel()];
                    for (r, ((dr, hr), gr)) in d
                        .chunks_mut(c)
                        .zip(xhat.data().chunks(c))
                        .zip(g.data().chunks(c))
                        .enumerate()
                    {
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for ((&gv, &gm), &hv) in gr.iter().zip(gam).zip(hr) {
                            let gh = gv * gm;
                            mean_gh += gh;
                            mean_ghx += gh * hv;
                        }
                        mean_gh *= inv_c;
                        mean_ghx *= inv_c;
                        for (((dv, &gv), &gm), &hv) in dr.iter_mut().zip(gr).zip(gam).zip(hr) {
                            *dv = rstd[r] * (gv * gm - mean_gh - hv * mean_ghx);
                        }
                    }
                    out.push((*x, Tensor::new(xhat.shape(), d)?));
                }
                if want(*gamma) {
                    let mut d = vec![T::zero(); c];
                    for (hr, gr) in xhat.data().chunks(c).zip(g.data().chunks(c)) {
                        for ((dv, &hv), &gv) in d.iter_mut().zip(hr).zip(gr) {
                            *dv += hv * gv;
                        }
                    }
                    out.push((*gamma, Tensor::new(val(*gamma).shape(), d)?));
                }
                if want(*beta) {
                    out.push((*beta, column_sums(g, val(*beta).shape())));
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                out.push((*a, Tensor::new(x.shape(), d)?));
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                for (k, &r) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[r * c..(r + 1) * c];
                    for (dv, &gv) in dst.iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                out.push((*a, d));
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (c, len) = (src.cols(), g.cols());
                let mut d = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                out.push((*a, d));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        out.push((p, g.slice_cols(start, w)?.reshape(val(p).shape())?));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if want(p) {
                        let d = g.data()[start..start + n].to_vec();
                        out.push((p, Tensor::new(val(p).shape(), d)?));
                    }
                    start += n;
                }
                debug_assert_eq!(start, g.rows() * c);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                out.push((*a, Tensor::full(val(*a).shape(), s)));
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = g.data()[0];
                let mut d = probs.clone();
                d.data_mut()[*label] -= T::one();
                let d = d.map(|v| v * s).reshape(val(*logits).shape())?;
                out.push((*logits, d));
            }
        }
        Ok(out)
    }
}

fn column_sums<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let c = g.cols();
    let mut d = vec![T::zero(); c];
    for row in g.data().chunks(c.max(1)) {
        for (dv, &gv) in d.iter_mut().zip(row) {
            *dv += gv;
        }
    }
    Tensor::new(shape, d).expect("bias shape matches row width")
}

/// Maximum relative disagreement between the tape gradient of a scalar map
/// and central differences, `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let y = f(&mut t, v)?;
        Ok(t.value(y).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
