//! Dense row-major tensors and the pure (non-recording) numerical kernels
//! shared by the autodiff tape and the inference paths.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point scalar usable by every op: `f32` for training, `f64` for
/// gradient verification.
pub trait Real:
    Float + Debug + Default + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::Shape { expected: shape.to_vec(), got: vec![data.len()] });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor, panicking on a shape/data mismatch. Internal use only.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
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

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.f64())).collect() }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (*a - *b).abs().f64()).fold(0.0, f64::max)
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_parts(vec![m, n], out)
}

/// Accumulates `a[m×k] · b[k×n]` into `out`.
pub(crate) fn matmul_into<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulates `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn matmul_tn_into<S: Real>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulates `a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`.
pub(crate) fn matmul_nt_into<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    // transposing first keeps the inner loop a contiguous axpy
    let mut bt = vec![S::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_into(a, &bt, out, m, k, n);
}

/// Same-padded depthwise 1-D convolution over time.
///
/// `x` is `[L×D]`, `kernels` is `[D×k]` with `k` odd. Channel `c` at frame `t`
/// is `Σ_j kernels[c][j] · x[t + j − (k−1)/2][c]`, zero outside `[0, L)`.
pub fn depthwise_conv1d<S: Real>(x: &Tensor<S>, kernels: &Tensor<S>) -> Result<Tensor<S>> {
    let (l, d) = x.dims();
    let (kc, k) = kernels.dims();
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if kc != d {
        return Err(Error::KernelChannels { kernel: kc, input: d });
    }
    let mut out = vec![S::zero(); l * d];
    conv_forward(x.data(), kernels.data(), &mut out, l, d, k);
    Ok(Tensor::from_parts(vec![l, d], out))
}

pub(crate) fn conv_forward<S: Real>(x: &[S], w: &[S], out: &mut [S], l: usize, d: usize, k: usize) {
    let half = (k / 2) as isize;
    for j in 0..k {
        let shift = j as isize - half;
        let (t0, t1) = valid_range(l, shift);
        for t in t0..t1 {
            let src = (t as isize + shift) as usize;
            let xr = &x[src * d..(src + 1) * d];
            let or = &mut out[t * d..(t + 1) * d];
            for c in 0..d {
                or[c] += w[c * k + j] * xr[c];
            }
        }
    }
}

/// Output frames `t` for which `t + shift` lies inside `[0, l)`.
#[inline]
pub(crate) fn valid_range(l: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 { l.saturating_sub(shift as usize) } else { l };
    (lo.min(l), hi.max(lo.min(l)))
}

/// Numerically stable softmax of a slice in place.
pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Axis along which a reduction runs for rank-2 tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Max-subtracted softmax. `Axis::Cols` normalizes each row across its
/// columns; `Axis::Rows` normalizes each column across rows.
pub fn softmax_stable<S: Real>(x: &Tensor<S>, axis: Axis) -> Tensor<S> {
    match axis {
        Axis::Cols => {
            let mut out = x.clone();
            let c = x.cols();
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
            out
        }
        Axis::Rows => softmax_stable(&x.transpose(), Axis::Cols).transpose(),
    }
}

/// Multi-head scaled dot-product attention without projections.
///
/// Per head `h` the columns `[h·dh, (h+1)·dh)` of `q`, `k`, `v` are used with
/// scale `1/√dh`; head outputs are concatenated along columns.
pub fn attention<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let (lq, d) = q.dims();
    let (lk, dk) = k.dims();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Heads { dim: d, heads });
    }
    if dk != d || v.dims() != (lk, d) {
        return Err(Error::Shape { expected: vec![lk, d], got: v.shape().to_vec() });
    }
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), lq, lk, d, heads);
    Ok(Tensor::from_parts(vec![lq, d], out))
}

/// Returns the attention output and the per-head probabilities
/// (`heads × lq × lk`, row-major).
pub(crate) fn attention_forward<S: Real>(
    q: &[S],
    k: &[S],
    v: &[S],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut out = vec![S::zero(); lq * d];
    let mut probs = vec![S::zero(); heads * lq * lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let qi = &q[i * d + off..i * d + off + dh];
            let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut acc = S::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *pj = acc * scale;
            }
            softmax_in_place(p);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + th) + half * x * (S::one() - th * th) * du
}

#[inline]
pub fn silu<S: Real>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<S: Real>(x: S) -> S {
    let sig = S::one() / (S::one() + (-x).exp());
    sig * (S::one() + x * (S::one() - sig))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        normalize_row(row);
    }
    out
}

/// Normalizes a row in place and returns its reciprocal standard deviation.
pub(crate) fn normalize_row<S: Real>(row: &mut [S]) -> S {
    let n = S::of(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let rstd = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * rstd;
    }
    rstd
}

/// Sinusoidal embedding of a (possibly fractional) position into `dim` channels:
/// `[sin(p·ω_0), …, sin(p·ω_{h−1}), cos(p·ω_0), …]` with `ω_i = 10000^{−i/h}`.
pub fn sinusoidal<S: Real>(pos: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = libm::pow(10_000.0, -(i as f64) / half.max(1) as f64);
        out[i] = S::of(libm::sin(pos * freq));
        out[half + i] = S::of(libm::cos(pos * freq));
    }
    out
}

/// `[L×dim]` table of sinusoidal positions `0..L`.
pub fn sinusoidal_positions<S: Real>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        data.extend(sinusoidal::<S>(t as f64, dim));
    }
    Tensor::from_parts(vec![len, dim], data)
}
