//! Dense row-major tensors and the numerical kernels shared by the tape.
//!
//! Storage is generic over [`Element`] so the same model code runs in 32-bit
//! for training and in 64-bit when gradients are checked against finite
//! differences. Every kernel here is a pure function of its inputs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point storage type of a [`Tensor`].
pub trait Element:
    Float + Default + Debug + AddAssign + MulAssign + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn cst<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

/// A dense tensor with row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// A `1×n` row vector.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as a matrix: leading axes are folded into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Largest absolute elementwise difference, computed in 64-bit.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}

/// Standard matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::Contract(format!(
            "transpose expects a matrix, got shape {:?}",
            a.shape
        )));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))`, evaluated as `x + log1p(exp(-x))` for positive inputs.
#[inline]
pub fn softplus_scalar<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu_scalar<T: Element>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = x.dims2();
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Per-row statistics of a layer norm forward pass.
pub(crate) struct NormStats<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Element>(x: &Tensor<T>, eps: T) -> NormStats<T> {
    let (rows, cols) = x.dims2();
    let n = cst::<T>(cols as f64);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut normalized.data[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    NormStats {
        normalized,
        inv_std,
    }
}

/// Standardizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::dim("layer_norm", &x.shape, &gain.shape));
    }
    if eps <= T::zero() {
        return Err(Error::Contract("layer_norm eps must be positive".into()));
    }
    let mut out = layer_norm_stats(x, eps).normalized;
    for row in out.data.chunks_mut(cols) {
        for ((v, &g), &b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

/// Depthwise 1-D convolution along the row (token) axis with "same" padding.
///
/// `x` is `[T×D]`, `weight` is `[D×K]`, `bias` is `[D]`. Output row `t` reads
/// input rows `t - left .. t - left + K` where `left = (K - 1) / 2`; rows
/// outside the sequence contribute zero.
pub fn depthwise_conv1d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (t_len, d) = x.dims2();
    if weight.rank() != 2 || weight.shape[0] != d || bias.len() != d {
        return Err(Error::dim("depthwise_conv1d", &x.shape, &weight.shape));
    }
    let k = weight.shape[1];
    let left = (k.saturating_sub(1) / 2) as isize;
    let mut out = Tensor::zeros([t_len, d]);
    for t in 0..t_len {
        let orow = &mut out.data[t * d..(t + 1) * d];
        orow.copy_from_slice(&bias.data);
        for tap in 0..k {
            let src = t as isize - left + tap as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let xrow = &x.data[src as usize * d..(src as usize + 1) * d];
            for c in 0..d {
                orow[c] += weight.data[c * k + tap] * xrow[c];
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_left_pad(k: usize) -> isize {
    (k.saturating_sub(1) / 2) as isize
}

/// Reverses the order of rows.
pub fn reverse_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = x.dims2();
    let mut data = Vec::with_capacity(x.len());
    for r in (0..rows).rev() {
        data.extend_from_slice(&x.data[r * cols..(r + 1) * cols]);
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub(crate) fn slice_cols<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let (rows, cols) = x.dims2();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.data[r * cols + start..r * cols + start + len]);
    }
    Tensor {
        shape: vec![rows, len],
        data,
    }
}

pub(crate) fn slice_rows<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let (_, cols) = x.dims2();
    Tensor {
        shape: vec![len, cols],
        data: x.data[start * cols..(start + len) * cols].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::<f32>::from_fn([3, 4], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn zero_matmul_annihilates() {
        let z = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::ones([3, 4])).unwrap();
        assert_eq!(z, Tensor::zeros([2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn([3, 5], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn([3, 2], |i| (i as f64 * 0.7).cos());
        let c = Tensor::<f64>::from_fn([4, 5], |i| (i as f64 * 0.3).cos());
        let at = transpose(&a).unwrap();
        assert!(matmul_tn(&a, &b).max_abs_diff(&matmul(&at, &b).unwrap()) < 1e-12);
        let ct = transpose(&c).unwrap();
        let lhs = matmul_nt(&Tensor::from_fn([2, 5], |i| i as f64), &c);
        let rhs = matmul(&Tensor::from_fn([2, 5], |i| i as f64), &ct).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-12);
        assert!((softplus_scalar(50.0f32) - 50.0).abs() < 1e-6);
        assert!(softplus_scalar(-800.0f64) >= 0.0);
        assert!(softplus_scalar(800.0f64).is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f32>::from_fn([3, 7], |i| (i as f32 * 13.7).sin() * 40.0);
        let s = softmax_rows(&x);
        for r in 0..3 {
            let total: f32 = s.row_slice(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::<f32>::full([1, 6], 3.25);
        let y = layer_norm(&x, &Tensor::ones([6]), &Tensor::zeros([6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_keeps_standardized_vector() {
        let x = Tensor::<f64>::new([1, 4], vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), 1e-8).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-7);
    }

    #[test]
    fn conv_with_centre_tap_is_identity() {
        let x = Tensor::<f32>::from_fn([5, 2], |i| i as f32);
        let mut w = Tensor::zeros([2, 4]);
        w.data_mut()[1] = 1.0;
        w.data_mut()[5] = 1.0;
        let y = depthwise_conv1d(&x, &w, &Tensor::zeros([2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn reverse_rows_is_an_involution() {
        let x = Tensor::<f32>::from_fn([4, 3], |i| i as f32);
        assert_eq!(reverse_rows(&reverse_rows(&x)), x);
        assert_eq!(reverse_rows(&x).row_slice(0), x.row_slice(3));
    }
}
