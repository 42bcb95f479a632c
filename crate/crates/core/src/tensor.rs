//! Dense row-major tensors with the small set of operations the engine needs.
//!
//! Everything is CPU-side and deterministic: reductions run in a fixed
//! sequential order, so identical inputs give bit-identical outputs within one
//! precision mode. `f32` is the working precision; `f64` exists for the
//! gradient-check suites.

use crate::error::{Error, Result};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar types tensors can hold. Implemented for `f32` and `f64` only.
pub trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + serde::Serialize
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build a tensor, validating that the shape matches the data length and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation("non-finite value in tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::ZERO; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for optimizers; values are shared read-only everywhere
    /// else, so mutation requires exclusive ownership by construction.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Matrix product; inner extents must match. Deterministic summation order.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if !self.is_matrix() || !other.is_matrix() {
            return Err(Error::Dimension("matmul expects 2-D tensors".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} vs {k2}")));
        }
        let data = matmul_kernel(&self.data, &other.data, m, k, n);
        Ok(Self { shape: vec![m, n], data })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(Error::Dimension("softmax_rows expects a 2-D tensor".into()));
        }
        let mut data = self.data.clone();
        softmax_rows_kernel(&mut data, self.shape[0], self.shape[1]);
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Largest elementwise |a-b| / (|a|+|b|+1e-12) between two tensors.
    pub fn max_rel_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64(), b.to_f64());
                (a - b).abs() / (a.abs() + b.abs() + 1e-12)
            })
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }
}

/// Attention over a single head: `softmax_rows(q·kᵀ/√d)·v`.
///
/// Head splitting is the caller's job; `q` is `[m×d]`, `k` is `[n×d]`,
/// `v` is `[n×dv]`.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if !q.is_matrix() || !k.is_matrix() || !v.is_matrix() {
        return Err(Error::Dimension("attention expects 2-D tensors".into()));
    }
    let d = q.shape[1];
    if k.shape[1] != d {
        return Err(Error::Dimension(format!(
            "attention q has d={d} but k has d={}",
            k.shape[1]
        )));
    }
    if k.shape[0] != v.shape[0] {
        return Err(Error::Dimension(format!(
            "attention k has {} rows but v has {}",
            k.shape[0], v.shape[0]
        )));
    }
    let (m, n, dv) = (q.shape[0], k.shape[0], v.shape[1]);
    let mut scores = matmul_nt_kernel(&q.data, &k.data, m, d, n);
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    for s in &mut scores {
        *s = *s * inv_sqrt_d;
    }
    softmax_rows_kernel(&mut scores, m, n);
    let out = matmul_kernel(&scores, &v.data, m, n, dv);
    Ok(Tensor { shape: vec![m, dv], data: out })
}

/// Mean over all elements of the squared difference.
pub fn mse_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "mse_loss on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(mse_kernel(&a.data, &b.data))
}

// ── Shared kernels ───────────────────────────────────────────────────
//
// The gradient tape records these same kernels, so eager and taped forward
// passes agree bit-for-bit. Large products are row-parallel: each output row
// is written by exactly one thread and its reduction stays sequential in k,
// so results are bit-identical regardless of thread count or scheduling.

/// Below this many multiply-adds a product runs single-threaded.
pub(crate) const PAR_FLOPS: usize = 1 << 20;

/// `[m,k] @ [k,n]` into a pre-zeroed slice.
pub(crate) fn matmul_slice<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// `[m,d] @ [n,d]ᵀ` into a slice.
pub(crate) fn matmul_nt_slice<T: Real>(a: &[T], b: &[T], m: usize, d: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        matmul_nt_row(&a[i * d..(i + 1) * d], b, d, &mut out[i * n..(i + 1) * n]);
    }
}

/// `[k,m]ᵀ @ [k,n]` into a pre-zeroed slice.
pub(crate) fn matmul_tn_slice<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        matmul_tn_row(a, b, k, m, n, i, &mut out[i * n..(i + 1) * n]);
    }
}

fn matmul_row<T: Real>(a_row: &[T], b: &[T], n: usize, out_row: &mut [T]) {
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_row(&a[i * k..(i + 1) * k], b, n, out_row));
    } else {
        for i in 0..m {
            matmul_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn matmul_nt_row<T: Real>(a_row: &[T], b: &[T], d: usize, out_row: &mut [T]) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * d..(j + 1) * d];
        let mut acc = T::ZERO;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

/// `a · bᵀ` for `a: [m×d]`, `b: [n×d]`.
pub(crate) fn matmul_nt_kernel<T: Real>(a: &[T], b: &[T], m: usize, d: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * d);
    debug_assert_eq!(b.len(), n * d);
    let mut out = vec![T::ZERO; m * n];
    if m * d * n >= PAR_FLOPS && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_nt_row(&a[i * d..(i + 1) * d], b, d, out_row));
    } else {
        for i in 0..m {
            matmul_nt_row(&a[i * d..(i + 1) * d], b, d, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn matmul_tn_row<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, i: usize, out_row: &mut [T]) {
    for kk in 0..k {
        let av = a[kk * m + i];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`; used by matmul adjoints.
pub(crate) fn matmul_tn_kernel<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_tn_row(a, b, k, m, n, i, out_row));
    } else {
        for i in 0..m {
            matmul_tn_row(a, b, k, m, n, i, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn softmax_rows_kernel<T: Real>(data: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    if rows > 1 && rows * cols >= 1 << 15 {
        use rayon::prelude::*;
        data.par_chunks_mut(cols).for_each(softmax_row);
    } else {
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
    }
}

/// Parallel elementwise map for the exp-heavy activations.
pub(crate) fn map_kernel<T: Real>(x: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    if x.len() >= 1 << 15 {
        use rayon::prelude::*;
        x.par_iter().map(|&v| f(v)).collect()
    } else {
        x.iter().map(|&v| f(v)).collect()
    }
}

pub(crate) fn mse_kernel<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sum += d * d;
    }
    sum / T::from_f64(a.len() as f64)
}

pub(crate) fn silu_kernel<T: Real>(x: T) -> T {
    // x * sigmoid(x), with sigmoid in the numerically safe branch form.
    x * sigmoid(x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl<T: Real> fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let eye = Tensor::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![3.0, -1.5], vec![0.25, 8.0]]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Tensor::<f32>::from_rows(&[vec![3.0, -1.5], vec![0.25, 8.0]]).unwrap();
        let zero = Tensor::zeros(vec![2, 3]);
        let out = a.matmul(&zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetric_row() {
        let t = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_extreme_row_is_stable() {
        let t = Tensor::<f64>::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!(close(s.data()[0], 1.0, 1e-6));
        assert!(close(s.data()[1], 0.0, 1e-6));
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_log_ratio_row() {
        // softmax([ln 1, ln 3]) = [1/4, 3/4]
        let t = Tensor::<f64>::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!(close(s.data()[0], 0.25, 1e-12));
        assert!(close(s.data()[1], 0.75, 1e-12));
    }

    #[test]
    fn attention_single_key_returns_v_row() {
        let q = Tensor::<f32>::from_rows(&[vec![5.0, -2.0], vec![0.0, 0.1]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        for r in 0..2 {
            assert_eq!(&out.data()[r * 3..(r + 1) * 3], &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn attention_identical_keys_average_v() {
        let q = Tensor::<f64>::from_rows(&[vec![0.3], vec![-4.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![2.0], vec![2.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for &x in out.data() {
            assert!(close(x, 0.5, 1e-12));
        }
    }

    #[test]
    fn attention_hand_case_two_by_two() {
        // q=[[0],[1]], k=[[0],[1]], v=[[1,0],[0,1]], d=1.
        // Row 0: scores [0,0] -> weights [.5,.5]. Row 1: scores [0,1] -> softmax.
        let q = Tensor::<f64>::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let k = q.clone();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let w11 = (1.0f64).exp() / (1.0 + (1.0f64).exp());
        assert!(close(out.data()[0], 0.5, 1e-12));
        assert!(close(out.data()[1], 0.5, 1e-12));
        assert!(close(out.data()[2], 1.0 - w11, 1e-12));
        assert!(close(out.data()[3], w11, 1e-12));
    }

    #[test]
    fn attention_dim_mismatch_errors() {
        let q = Tensor::<f32>::zeros(vec![2, 3]);
        let k = Tensor::<f32>::zeros(vec![2, 4]);
        let v = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn mse_identity_is_zero() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_case() {
        // a=(1,2), b=(1,0): ((0)^2 + (2)^2)/2 = 2
        let a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn mse_scales_quadratically() {
        let a = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap();
        let base = mse_loss(&a, &b).unwrap();
        let scaled = mse_loss(&a.scale(3.0), &b.scale(3.0)).unwrap();
        assert!(close(scaled, 9.0 * base, 1e-12));
    }

    #[test]
    fn mse_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(vec![2]);
        let b = Tensor::<f32>::zeros(vec![3]);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn new_rejects_non_finite_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0f32, 2.0]).is_err());
        assert!(Tensor::new(vec![0], Vec::<f32>::new()).is_err());
    }
}
