//! Dense row-major tensors and the handful of kernels the decoder needs.
//!
//! Storage is generic over [`Scalar`] so that the training code can be
//! instantiated in `f64` for finite-difference checks; everything that ships
//! (checkpoints, inference, sweeps) runs in `f32`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `c = alpha * a·b + beta * c` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) views
    /// of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
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

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} += {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum()
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected 2-D, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Which operand to read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trans {
    None,
    A,
    B,
}

fn gemm_into<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans: Trans) -> Result<Tensor<T>> {
    let (ar, ac) = a.require_matrix("matmul lhs")?;
    let (br, bc) = b.require_matrix("matmul rhs")?;
    let (m, k, k2, n) = match trans {
        Trans::None => (ar, ac, br, bc),
        Trans::A => (ac, ar, br, bc),
        Trans::B => (ar, ac, bc, br),
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims {k} vs {k2} ({:?} x {:?}, {trans:?})",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = match trans {
        Trans::A => (1, ac as isize),
        _ => (ac as isize, 1),
    };
    let (rsb, csb) = match trans {
        Trans::B => (1, bc as isize),
        _ => (bc as isize, 1),
    };
    // SAFETY: strides describe the row-major buffers checked above; `out` is a
    // fresh allocation of m*n values.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm_into(a, b, Trans::None)
}

/// `a · bᵀ`; the usual shape for applying an `[out, in]` weight to row vectors.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm_into(a, b, Trans::B)
}

/// `aᵀ · b`; used for weight gradients.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm_into(a, b, Trans::A)
}

/// Boolean attention mask over a (queries × keys) score grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    banned: Vec<bool>,
    causal: bool,
}

impl AttnMask {
    /// Plain causal mask for a square self-attention grid.
    pub fn causal(n: usize) -> Self {
        let pos: Vec<usize> = (0..n).collect();
        Self::from_positions(&pos, &pos, |_| false)
    }

    /// Causal mask over absolute positions, additionally banning every key
    /// for which `ban_key(position)` holds.
    pub fn from_positions(
        query_pos: &[usize],
        key_pos: &[usize],
        ban_key: impl Fn(usize) -> bool,
    ) -> Self {
        let key_banned: Vec<bool> = key_pos.iter().map(|&p| ban_key(p)).collect();
        let mut banned = Vec::with_capacity(query_pos.len() * key_pos.len());
        for &qp in query_pos {
            for (j, &kp) in key_pos.iter().enumerate() {
                banned.push(kp > qp || key_banned[j]);
            }
        }
        AttnMask { queries: query_pos.len(), keys: key_pos.len(), banned, causal: true }
    }

    /// Mask with no causal structure and nothing banned.
    pub fn full(queries: usize, keys: usize) -> Self {
        AttnMask { queries, keys, banned: vec![false; queries * keys], causal: false }
    }

    pub fn ban(&mut self, query: usize, key: usize) {
        self.banned[query * self.keys + key] = true;
    }

    /// Bans `key` for every query.
    pub fn ban_key(&mut self, key: usize) {
        for q in 0..self.queries {
            self.ban(q, key);
        }
    }

    pub fn is_banned(&self, query: usize, key: usize) -> bool {
        self.banned[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.banned[query * self.keys..(query + 1) * self.keys]
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }
}

/// Softmax over the permitted entries of one row, in place. Banned entries
/// become exactly zero. Fails if every entry is banned.
pub(crate) fn softmax_row_masked<T: Scalar>(row: &mut [T], banned: &[bool]) -> bool {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (v, &b) in row.iter().zip(banned) {
        if !b {
            any = true;
            if *v > max {
                max = *v;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = T::zero();
    for (v, &b) in row.iter_mut().zip(banned) {
        if b {
            *v = T::zero();
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for (v, &b) in row.iter_mut().zip(banned) {
        if !b {
            *v = *v / sum;
        }
    }
    true
}

pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, mask: &AttnMask) -> Result<Tensor<T>> {
    let (q, k) = scores.require_matrix("masked_softmax")?;
    if q != mask.queries || k != mask.keys {
        return Err(Error::Shape(format!(
            "scores {q}x{k} vs mask {}x{}",
            mask.queries, mask.keys
        )));
    }
    let mut out = scores.clone();
    for i in 0..q {
        if !softmax_row_masked(out.row_mut(i), mask.row(i)) {
            return Err(Error::FullyBannedRow { row: i });
        }
    }
    Ok(out)
}

/// Scales every row to unit root-mean-square, then multiplies by `gain`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(rms_norm_with_inv(x, gain, eps)?.0)
}

/// [`rms_norm`] that also returns each row's `1 / rms`, needed by backprop.
pub(crate) fn rms_norm_with_inv<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::EmptyRow);
    }
    if gain.len() != d {
        return Err(Error::Shape(format!("gain length {} vs row length {d}", gain.len())));
    }
    let eps = T::from_f64_lossy(eps);
    let n = T::from_usize(d).unwrap();
    let mut out = x.clone();
    let mut invs = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / n;
        let inv = (ms + eps).sqrt().recip();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v = *v * inv * *g;
        }
        invs.push(inv);
    }
    Ok((out, invs))
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = (T::one() + (-x).exp()).recip();
    s * (T::one() + x * (T::one() - s))
}

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
