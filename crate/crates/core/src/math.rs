//! Dense column-per-token matrices and the selection primitives the attention
//! code is built from.
//!
//! A [`Mat`] stores `rows x cols` entries column-major, so column `j` (one
//! token's feature vector) is a contiguous slice. Products go through
//! `matrixmultiply`, which is single-threaded and has a fixed accumulation
//! order, so every product is bit-stable across runs and thread counts.

use std::fmt;
use std::ops::Range;

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{mismatch, MitaError, Result};

/// Floating point element type. `f64` is the reference precision; `f32` is
/// used only by the throughput benchmark.
pub trait Scalar:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
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
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
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

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
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

/// Dense real matrix, `rows x cols`, column-major.
#[derive(Clone, PartialEq)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>10.4} ", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Mat<T> {
    /// Zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "Mat dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[j * rows + i] = f(i, j);
            }
        }
        m
    }

    fn checked(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MitaError::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(mismatch(
                "Mat",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MitaError::NonFinite("matrix input"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from values listed row by row.
    pub fn from_row_major(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        let m = Self::checked(rows, cols, values)?;
        Ok(Self::from_fn(rows, cols, |i, j| m.data[i * cols + j]))
    }

    /// Build from values listed column by column (the native layout).
    pub fn from_col_major(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::checked(rows, cols, values)
    }

    /// Build from a list of equally sized columns.
    pub fn from_cols(columns: &[Vec<T>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(mismatch("Mat::from_cols", "ragged columns"));
        }
        Self::checked(rows, columns.len(), columns.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Column-major backing storage.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Values in row-major order.
    pub fn to_row_major(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; infinite on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((*a - *b).abs().as_f64()))
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        let mut out = Self::zeros(len, self.cols);
        for j in 0..self.cols {
            out.col_mut(j)
                .copy_from_slice(&self.col(j)[start..start + len]);
        }
        out
    }

    pub fn set_row_block(&mut self, start: usize, block: &Self) {
        assert!(start + block.rows <= self.rows && block.cols == self.cols);
        for j in 0..self.cols {
            let len = block.rows;
            self.col_mut(j)[start..start + len].copy_from_slice(block.col(j));
        }
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols && len >= 1);
        Self {
            rows: self.rows,
            cols: len,
            data: self.data[start * self.rows..(start + len) * self.rows].to_vec(),
        }
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(mismatch("hcat", "row counts differ"));
        }
        let data: Vec<T> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let cols = parts.iter().map(|p| p.cols).sum();
        Self::checked(rows, cols, data)
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl Mat<f64> {
    /// Matrix with i.i.d. `N(0, std^2)` entries.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.normal())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    N,
    T,
}

fn strides<T>(m: &Mat<T>, op: Op) -> (usize, usize, isize, isize) {
    match op {
        Op::N => (m.rows, m.cols, 1, m.rows as isize),
        Op::T => (m.cols, m.rows, m.rows as isize, 1),
    }
}

fn gemm_into<T: Scalar>(
    op: &'static str,
    a: &Mat<T>,
    ta: Op,
    b: &Mat<T>,
    tb: Op,
    alpha: T,
    beta: T,
    c: &mut Mat<T>,
) -> Result<()> {
    let (m, ka, rsa, csa) = strides(a, ta);
    let (kb, n, rsb, csb) = strides(b, tb);
    if ka != kb {
        return Err(mismatch(op, format!("inner dimensions {ka} and {kb}")));
    }
    if c.rows != m || c.cols != n {
        return Err(mismatch(
            op,
            format!("output is {}x{}, product is {m}x{n}", c.rows, c.cols),
        ));
    }
    // SAFETY: shapes and strides were checked above; `c` is a distinct
    // allocation borrowed mutably.
    unsafe {
        T::gemm(
            m,
            ka,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            1,
            c.rows as isize,
        );
    }
    Ok(())
}

fn product<T: Scalar>(op: &'static str, a: &Mat<T>, ta: Op, b: &Mat<T>, tb: Op) -> Result<Mat<T>> {
    let (m, _, _, _) = strides(a, ta);
    let (_, n, _, _) = strides(b, tb);
    let mut c = Mat::zeros(m, n);
    gemm_into(op, a, ta, b, tb, T::one(), T::zero(), &mut c)?;
    Ok(c)
}

/// `A * B`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    product("matmul", a, Op::N, b, Op::N)
}

/// `A^T * B`.
pub fn matmul_tn<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    product("matmul_tn", a, Op::T, b, Op::N)
}

/// `A * B^T`.
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    product("matmul_nt", a, Op::N, b, Op::T)
}

/// `C += A * B`.
pub fn matmul_acc<T: Scalar>(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    gemm_into("matmul_acc", a, Op::N, b, Op::N, T::one(), T::one(), c)
}

/// `C += A^T * B`.
pub fn matmul_tn_acc<T: Scalar>(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    gemm_into("matmul_tn_acc", a, Op::T, b, Op::N, T::one(), T::one(), c)
}

/// `C += A * B^T`.
pub fn matmul_nt_acc<T: Scalar>(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    gemm_into("matmul_nt_acc", a, Op::N, b, Op::T, T::one(), T::one(), c)
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Stable in-place softmax of one logit vector; returns `(max, denom)` where
/// `denom = sum(exp(x - max))`.
pub fn softmax_slice<T: Scalar>(x: &mut [T]) -> (T, T) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut denom = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        denom = denom + *v;
    }
    let inv = T::one() / denom;
    for v in x.iter_mut() {
        *v = *v * inv;
    }
    (max, denom)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_cols<T: Scalar>(s: &Mat<T>) -> Result<Mat<T>> {
    if !s.is_finite() {
        return Err(MitaError::NonFinite("softmax_cols input"));
    }
    let mut out = s.clone();
    for j in 0..out.cols {
        softmax_slice(out.col_mut(j));
    }
    Ok(out)
}

/// Indices of the `min(k, N)` largest scores, by descending score and then
/// ascending index.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(MitaError::InvalidArgument("top-k needs k >= 1".into()));
    }
    if scores.is_empty() {
        return Err(MitaError::InvalidArgument("top-k of an empty score vector".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MitaError::NonFinite("top-k scores"));
    }
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .expect("finite scores")
            .then(a.cmp(b))
    };
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

/// Columns of `m` at `idx`, in order; repeated indices repeat columns.
pub fn gather_cols<T: Scalar>(m: &Mat<T>, idx: &[usize]) -> Result<Mat<T>> {
    if idx.is_empty() {
        return Err(MitaError::InvalidArgument("gather of zero columns".into()));
    }
    let mut data = Vec::with_capacity(idx.len() * m.rows);
    for &j in idx {
        if j >= m.cols {
            return Err(MitaError::IndexOutOfRange {
                index: j,
                len: m.cols,
            });
        }
        data.extend_from_slice(m.col(j));
    }
    Ok(Mat {
        rows: m.rows,
        cols: idx.len(),
        data,
    })
}

/// Adaptive pooling windows: window `i` is `floor(i*n/m)..ceil((i+1)*n/m)`.
pub fn pool_windows(n: usize, m: usize) -> Vec<Range<usize>> {
    (0..m)
        .map(|i| {
            let start = i * n / m;
            let end = ((i + 1) * n).div_ceil(m);
            start..end
        })
        .collect()
}

/// Mean of each adaptive window of columns.
pub fn adaptive_avg_pool<T: Scalar>(q: &Mat<T>, m: usize) -> Result<Mat<T>> {
    let n = q.cols;
    if m == 0 || m > n {
        return Err(MitaError::InvalidArgument(format!(
            "pool size m = {m} must lie in 1..={n}"
        )));
    }
    let mut out = Mat::zeros(q.rows, m);
    for (i, w) in pool_windows(n, m).into_iter().enumerate() {
        let inv = T::one() / T::lit(w.len() as f64);
        let dst = out.col_mut(i);
        for j in w {
            for (o, &v) in dst.iter_mut().zip(q.col(j)) {
                *o = *o + v;
            }
        }
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
    }
    Ok(out)
}

/// Adjoint of [`adaptive_avg_pool`]: each pooled cotangent is spread evenly
/// over its window; overlapping windows add.
pub fn adaptive_avg_pool_adjoint<T: Scalar>(pooled_grad: &Mat<T>, n: usize) -> Mat<T> {
    let m = pooled_grad.cols;
    let mut out = Mat::zeros(pooled_grad.rows, n);
    for (i, w) in pool_windows(n, m).into_iter().enumerate() {
        let inv = T::one() / T::lit(w.len() as f64);
        for j in w {
            axpy(inv, pooled_grad.col(i), out.col_mut(j));
        }
    }
    out
}

/// Seedable generator (ChaCha8). Identical seeds give identical streams on
/// every platform.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        Self(r)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.0);
    }
}
