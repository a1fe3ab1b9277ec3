use rayon::prelude::*;

use super::Real;
use crate::error::{dim_err, Error, Result};

/// Below this many multiply-accumulates a product runs on the calling thread.
const PAR_MATMUL_MACS: usize = 1 << 21;

/// Dense row-major tensor. Almost everything in this crate is a matrix; the
/// few vectors (biases, norm parameters) are stored with a single extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from `f64` rows; handy in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("Tensor::from_rows", "ragged rows");
        }
        let data = rows
            .iter()
            .flat_map(|row| row.iter().map(|&v| T::from_f64(v)))
            .collect();
        Self::new(&[r, c], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let src = &self.data[i * c..(i + 1) * c];
            for (j, &v) in src.iter().enumerate() {
                data[j * r + i] = v;
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, len: r });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![idx.len(), c],
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        if start + len > c {
            return dim_err("slice_cols", format!("[{start}, {}) of {c} columns", start + len));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Self {
            shape: vec![r, len],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != r) {
            return dim_err("concat_cols", "row counts differ");
        }
        let c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != c) {
            return dim_err("concat_rows", "column counts differ");
        }
        let r: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(r * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape.len() != 2 {
        return dim_err(op, format!("expected a matrix, got shape {:?}", t.shape));
    }
    Ok(())
}

/// `out[i, :] = sum_k a[i, k] * b[k, :]`, accumulated in increasing `k`.
fn gemm_rows<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize) {
    let body = |(out_row, a_row): (&mut [T], &[T])| {
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    let m = out.len() / n.max(1);
    if n == 0 || k == 0 {
        return;
    }
    if m * k * n >= PAR_MATMUL_MACS {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(body);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
}

/// Matrix product with a fixed summation order over the inner extent.
/// Rows may be computed in parallel; each row's reduction is sequential, so
/// results are bit-identical regardless of thread count.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return dim_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]"));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_rows(&a.data, &b.data, &mut out, k, n);
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .check_finite("matmul")
}

/// `a * b^T`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul_nt", b)?;
    matmul(a, &b.transpose())
}

/// `a^T * b`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul_tn", a)?;
    matmul(&a.transpose(), b)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut data = x.data.clone();
    if c > 0 {
        for row in data.chunks_mut(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Per-row normalisation results kept for the backward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Real>(x: &Tensor<T>, eps: T) -> NormStats<T> {
    let c = x.cols();
    let inv_c = T::one() / T::from_usize(c);
    let mut xhat = x.data.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for row in xhat.chunks_mut(c.max(1)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_c;
        let r = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    NormStats {
        xhat: Tensor {
            shape: x.shape.clone(),
            data: xhat,
        },
        rstd,
    }
}

pub(crate) fn affine_rows<T: Real>(xhat: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let c = xhat.cols();
    let mut data = xhat.data.clone();
    for row in data.chunks_mut(c.max(1)) {
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Tensor {
        shape: xhat.shape.clone(),
        data,
    }
}

/// Layer normalisation over the last extent followed by the affine map.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.cols();
    if c == 0 {
        return dim_err("layer_norm", "zero-width rows");
    }
    if gamma.numel() != c || beta.numel() != c {
        return dim_err(
            "layer_norm",
            format!("width {c}, gamma {}, beta {}", gamma.numel(), beta.numel()),
        );
    }
    let stats = layer_norm_stats(x, eps);
    Ok(affine_rows(&stats.xhat, gamma, beta))
}

#[inline]
pub(crate) fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn std_normal_pdf<T: Real>(x: T) -> T {
    T::from_f64(0.398_942_280_401_432_7) * (-(x * x) * T::from_f64(0.5)).exp()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * std_normal_cdf(v))
}
