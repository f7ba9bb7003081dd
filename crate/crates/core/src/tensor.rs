//! Dense row-major tensors and the handful of numeric kernels the engine
//! needs.
//!
//! All kernels compute each output row independently of the others, with a
//! fixed summation order. That property is what makes chunked evaluation of
//! position-wise layers bit-identical to unchunked evaluation.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::meter;

/// Floating point element type. `f32` is the default; `f64` is used for
/// gradient checks.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major array with shape metadata.
///
/// Invariants: every extent is at least 1 and `shape.iter().product() ==
/// data.len()`. Allocation and drop are reported to the [`meter`].
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn check_shape(shape: &[usize]) -> usize {
    assert!(!shape.is_empty(), "tensor shape must have at least one axis");
    assert!(
        shape.iter().all(|&e| e >= 1),
        "tensor extents must be >= 1, got {shape:?}"
    );
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        meter::acquire(data.len());
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = check_shape(shape);
        meter::acquire(n);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn zeros_like(other: &Tensor<S>) -> Self {
        Self::zeros(&other.shape)
    }

    /// Allocates without aborting the process when the request cannot be
    /// satisfied; returns `None` instead.
    pub fn try_zeros(shape: &[usize]) -> Option<Self> {
        let n = check_shape(shape);
        let mut data = Vec::new();
        data.try_reserve_exact(n).ok()?;
        data.resize(n, S::zero());
        meter::acquire(n);
        Some(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = check_shape(shape);
        meter::acquire(n);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    /// Converts element type (e.g. f64 → f32).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| T::lit(self.data[i].as_f64()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as a `[rows, cols]` matrix.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign length mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.data.len(), other.data.len(), "sub_assign length mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn scale_assign(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<S: Scalar> Drop for Tensor<S> {
    fn drop(&mut self) {
        meter::release(self.data.len());
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        meter::acquire(self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{:?}, ...]", self.shape, &self.data[..8])
        }
    }
}

/// Raw matrix kernels on row-major slices.
pub mod kernels {
    use super::Scalar;

    /// Dot product with eight independent accumulators (vectorizes well);
    /// the reduction order depends only on the length.
    #[inline]
    pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut acc = [S::zero(); 8];
        let ca = a.chunks_exact(8);
        let cb = b.chunks_exact(8);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for k in 0..8 {
                acc[k] += x[k] * y[k];
            }
        }
        let mut tail = S::zero();
        for (&x, &y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    /// `y += alpha * x`
    #[inline]
    pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    /// `c[m,n] += a[m,k] · b[k,n]`
    pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip != S::zero() {
                    axpy(aip, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
    }

    /// `c[m,n] += a[m,k] · b[n,k]ᵀ`
    pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `c[k,n] += a[m,k]ᵀ · b[m,n]`, accumulating rows of `a` in order.
    pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip != S::zero() {
                    axpy(aip, brow, &mut c[p * n..(p + 1) * n]);
                }
            }
        }
    }

    /// Column sums of `b[m,n]` added into `c[n]`.
    pub fn col_sum<S: Scalar>(b: &[S], c: &mut [S], m: usize, n: usize) {
        for i in 0..m {
            for (cj, &bj) in c.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *cj += bj;
            }
        }
    }

    /// Numerically stable `log Σ exp(x)`; `-inf` when every entry is `-inf`.
    pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
        let max = x.iter().copied().fold(S::neg_infinity(), S::max);
        if max == S::neg_infinity() {
            return max;
        }
        let s: S = x.iter().map(|&v| (v - max).exp()).sum();
        max + s.ln()
    }
}

fn broadcast_prefix(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let get = |s: &[usize], i: usize| {
        let off = r - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..r)
        .map(|i| {
            let (x, y) = (get(a, i), get(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

fn flat_index(idx: &[usize], shape: &[usize]) -> usize {
    // shape may be shorter than idx (left-padded with 1s); extent-1 axes broadcast
    let off = idx.len() - shape.len();
    let mut flat = 0;
    for (k, &e) in shape.iter().enumerate() {
        let i = if e == 1 { 0 } else { idx[off + k] };
        flat = flat * e + i;
    }
    flat
}

/// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
/// broadcasting of the batch prefix (extents equal or 1).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape().len() < 2 || b.shape().len() < 2 {
        return Err(err());
    }
    let (ap, am) = a.shape().split_at(a.shape().len() - 2);
    let (bp, bm) = b.shape().split_at(b.shape().len() - 2);
    let (m, k, k2, n) = (am[0], am[1], bm[0], bm[1]);
    if k != k2 {
        return Err(err());
    }
    let prefix = broadcast_prefix(ap, bp).ok_or_else(err)?;
    let batches: usize = prefix.iter().product();
    let mut shape = prefix.clone();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(&shape);
    let mut idx = vec![0usize; prefix.len()];
    for bi in 0..batches {
        let mut rem = bi;
        for ax in (0..prefix.len()).rev() {
            idx[ax] = rem % prefix[ax];
            rem /= prefix[ax];
        }
        let ia = flat_index(&idx, ap);
        let ib = flat_index(&idx, bp);
        kernels::gemm_nn(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(out)
}

/// `log Σ exp` along `axis`, removing that axis (a rank-1 input yields
/// shape `[1]`).
pub fn logsumexp<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "logsumexp",
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = Tensor::zeros(&out_shape);
    let mut buf = vec![S::zero(); ext];
    for o in 0..outer {
        for i in 0..inner {
            for (e, b) in buf.iter_mut().enumerate() {
                *b = x.data()[(o * ext + e) * inner + i];
            }
            out.data_mut()[o * inner + i] = kernels::logsumexp(&buf);
        }
    }
    Ok(out)
}

/// A bijection on `{0, …, l-1}`. `indices[t]` is the source position that
/// lands at slot `t` after applying the permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<usize>,
}

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            if i >= indices.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Malformed(format!("not a permutation: {indices:?}")));
            }
        }
        Ok(Permutation { indices })
    }

    pub fn identity(l: usize) -> Self {
        Permutation {
            indices: (0..l).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.indices.len()];
        for (t, &i) in self.indices.iter().enumerate() {
            inv[i] = t;
        }
        Permutation { indices: inv }
    }

    /// `(self ∘ other)[t] = other[self[t]]`: apply `self`, then `other`.
    pub fn then(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.len(), other.len());
        Permutation {
            indices: other.indices.iter().map(|&t| self.indices[t]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(t, &i)| t == i)
    }

    /// Gathers along the second-to-last axis: `out[.., t, :] = x[.., perm[t], :]`.
    pub fn gather_rows<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        let (l, d) = self.check_rows(x);
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(l * d).zip(out.data_mut().chunks_mut(l * d)) {
            for (t, &i) in self.indices.iter().enumerate() {
                dst[t * d..(t + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        out
    }

    /// Inverse of [`gather_rows`](Self::gather_rows): `out[.., perm[t], :] = x[.., t, :]`.
    /// For a permutation this is also the adjoint (scatter-add) of the gather.
    pub fn scatter_rows<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        let (l, d) = self.check_rows(x);
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(l * d).zip(out.data_mut().chunks_mut(l * d)) {
            for (t, &i) in self.indices.iter().enumerate() {
                dst[i * d..(i + 1) * d].copy_from_slice(&src[t * d..(t + 1) * d]);
            }
        }
        out
    }

    fn check_rows<S: Scalar>(&self, x: &Tensor<S>) -> (usize, usize) {
        let s = x.shape();
        assert!(s.len() >= 2, "gather/scatter needs a [.., l, d] tensor");
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(l, self.len(), "permutation length does not match axis");
        (l, d)
    }
}

/// Stable argsort of integer keys: the returned permutation lists positions
/// in nondecreasing key order, ties kept in original position order.
pub fn stable_sort_perm(keys: &[usize]) -> Permutation {
    let n = keys.len();
    let max = keys.iter().copied().max().unwrap_or(0);
    if max > n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| keys[i]);
        return Permutation { indices: idx };
    }
    // Counting sort: small keys such as bucket ids sort in linear time.
    let mut start = vec![0usize; max + 2];
    for &k in keys {
        start[k + 1] += 1;
    }
    for b in 1..start.len() {
        start[b] += start[b - 1];
    }
    let mut idx = vec![0usize; n];
    for (i, &k) in keys.iter().enumerate() {
        idx[start[k]] = i;
        start[k] += 1;
    }
    Permutation { indices: idx }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalizes one row in place of `out`; returns `(mean, 1/std)`.
#[inline]
pub(crate) fn layer_norm_row<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], eps: S, out: &mut [S]) -> (S, S) {
    let d = S::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let rstd = S::one() / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}

/// Backward of [`layer_norm_row`]: writes `dx` and accumulates into `dgamma`,
/// `dbeta`.
#[inline]
pub(crate) fn layer_norm_row_backward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    eps: S,
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let n = x.len();
    let d = S::lit(n as f64);
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let rstd = S::one() / (var + eps).sqrt();
    let mut mean_g = S::zero();
    let mut mean_gx = S::zero();
    for k in 0..n {
        let xh = (x[k] - mean) * rstd;
        let g = dy[k] * gamma[k];
        mean_g += g;
        mean_gx += g * xh;
        dgamma[k] += dy[k] * xh;
        dbeta[k] += dy[k];
    }
    mean_g /= d;
    mean_gx /= d;
    for k in 0..n {
        let xh = (x[k] - mean) * rstd;
        dx[k] = rstd * (dy[k] * gamma[k] - mean_g - xh * mean_gx);
    }
}

/// Layer normalization over the last axis followed by `gamma * x̂ + beta`.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    let eps = S::lit(eps);
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), gamma.data(), beta.data(), eps, out.row_mut(r));
    }
    Ok(out)
}
