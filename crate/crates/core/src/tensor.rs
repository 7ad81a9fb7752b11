//! Dense rank-0..3 arrays and the numeric kernels every layer is built from.
//!
//! Values are stored row-major. Rank-3 tensors are read as `[batch, rows, cols]`;
//! every "row-wise" operation acts on the last axis regardless of rank.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type. Training runs in `f32`, oracles and gradient
/// checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row-major views.
    ///
    /// # Safety
    /// The pointers and strides must describe in-bounds `m×k`, `k×n`, `m×n`
    /// matrices and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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
    unsafe fn gemm_raw(
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

/// Dense array with an optional gradient accumulator of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::Input(format!("rank {} exceeds 3", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::Input(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err("tensor", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![v; numel]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("valid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            grad: None,
        }
    }

    /// Builds a matrix from nested rows, mostly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Input("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|x| x.iter().map(|&v| T::lit(v))).collect();
        Self::new(&[r, c], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err("set_grad", &self.shape, &[grad.len()]);
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis rows across all leading axes.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// `(batch, rows, cols)` view; rank-2 tensors have batch 1.
    pub fn as_batched(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1, 1),
            [c] => (1, 1, *c),
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        let mut flat = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.len() > 3 || shape.contains(&0) {
            return shape_err("reshape", &self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|&v| U::lit(v.f64())).collect()),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Smallest entry and the largest `|row sum - 1|`, used by stochasticity checks.
    pub fn stochastic_stats(&self) -> (T, T) {
        let c = self.cols();
        let min = self.data.iter().fold(T::infinity(), |m, &v| m.min(v));
        let dev = self
            .data
            .chunks(c)
            .map(|row| (row.iter().copied().sum::<T>() - T::one()).abs())
            .fold(T::zero(), |m, v| m.max(v));
        (min, dev)
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

pub(crate) mod kernel {
    use super::Scalar;

    /// `c (+)= op(a)·op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
    /// A transposed operand is stored as its transpose (`k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    pub fn gemm<T: Scalar>(
        m: usize,
        k: usize,
        n: usize,
        a: &[T],
        ta: bool,
        b: &[T],
        tb: bool,
        c: &mut [T],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let beta = if accumulate { T::one() } else { T::zero() };
        // SAFETY: slice lengths match the described layouts (asserted above) and
        // `c` is a distinct mutable borrow.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// In-place `softmax(scale * x + bias)` on one row; `bias` entries are
    /// either 0 or the masking constant.
    pub fn softmax_row<T: Scalar>(row: &mut [T], scale: T, bias: Option<&[T]>) {
        let mut max = T::neg_infinity();
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * scale + bias.map_or(T::zero(), |b| b[j]);
            max = max.max(*v);
        }
        let mut sum = T::zero();
        match bias {
            // A masked entry's exponential underflows to exactly zero whenever
            // the row has at least one unmasked entry.
            Some(b) if b.iter().any(|&x| x == T::zero()) => {
                for (v, &bj) in row.iter_mut().zip(b) {
                    *v = if bj == T::zero() { (*v - max).exp() } else { T::zero() };
                    sum += *v;
                }
            }
            _ => {
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
            }
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    /// Writes the standardized row into `out` and returns `1/sqrt(var + eps)`.
    pub fn standardize_row<T: Scalar>(row: &[T], eps: T, out: &mut [T]) -> T {
        let n = T::from_usize(row.len()).unwrap();
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        rstd
    }

    /// Returns the divisor `max(‖row‖, eps)` and writes the scaled row.
    pub fn l2_normalize_row<T: Scalar>(row: &[T], eps: T, out: &mut [T]) -> T {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let div = norm.max(eps);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v / div;
        }
        div
    }
}

// ---------------------------------------------------------------------------
// pure operations
// ---------------------------------------------------------------------------

/// Generalized (batched) product `op(a)·op(b)`.
///
/// Rank-2 operands are a single matrix. With rank-3 operands the output batch
/// is `max(batch_a, batch_b)`; each operand's batch must divide it and output
/// item `i` reads operand item `i % batch`. This covers plain batched products,
/// broadcasting a single matrix, and per-head weights cycling over `batch·heads`.
pub fn matmul_ex<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (ba, ra, ca) = a.as_batched();
    let (bb, rb, cb) = b.as_batched();
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    let batch = ba.max(bb);
    if a.rank() < 2 || b.rank() < 2 || ka != kb || batch % ba != 0 || batch % bb != 0 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let ai = i % ba;
        let bi = i % bb;
        kernel::gemm(
            m,
            ka,
            n,
            &a.data()[ai * ra * ca..(ai + 1) * ra * ca],
            ta,
            &b.data()[bi * rb * cb..(bi + 1) * rb * cb],
            tb,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let shape = if a.rank() == 3 || b.rank() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Tensor::new(&shape, out)
}

/// Matrix product of `n×k` and `k×p` matrices.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    matmul_ex(a, b, false, false)
}

/// `a·bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, true)
}

/// Row-wise softmax of `scale * x`, stabilized by subtracting each row's maximum.
pub fn softmax_rows_scaled<T: Scalar>(x: &Tensor<T>, scale: T) -> Tensor<T> {
    let mut out = x.clone();
    out.grad = None;
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        kernel::softmax_row(row, scale, None);
    }
    out
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    softmax_rows_scaled(x, T::one())
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return shape_err("layer_norm", x.shape(), gamma.shape());
    }
    let mut out = vec![T::zero(); x.numel()];
    for (row, o) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        kernel::standardize_row(row, eps, o);
        for ((v, &g), &b) in o.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v.max(T::zero()))
}

/// Scales each row to unit L2 norm; rows with norm at or below `eps` are divided by `eps`.
pub fn row_l2_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::zero(); x.numel()];
    for (row, o) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        kernel::l2_normalize_row(row, eps, o);
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

/// Transpose of a matrix, or of each matrix in a batch.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, r, c) = x.as_batched();
    let mut out = vec![T::zero(); x.numel()];
    for k in 0..b {
        let src = &x.data[k * r * c..(k + 1) * r * c];
        let dst = &mut out[k * r * c..(k + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let shape = match x.rank() {
        3 => vec![b, c, r],
        2 => vec![c, r],
        _ => x.shape().to_vec(),
    };
    Tensor::new(&shape, out).expect("shape preserved")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip(a, b, "sub", |x, y| x - y)
}

/// Adds a length-`cols` vector to every row.
pub fn add_row_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = a.cols();
    if bias.numel() != c {
        return shape_err("add_row_bias", a.shape(), bias.shape());
    }
    let mut out = a.data.clone();
    for row in out.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Tensor::new(a.shape(), out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    map(a, |v| v * s)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let r = first.rows();
    if parts.iter().any(|p| p.rank() != 2 || p.rows() != r) {
        return shape_err("concat_cols", first.shape(), parts.last().unwrap().shape());
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[r, total], out)
}

/// Column slice `[start, end)` of a matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || start >= end || end > x.cols() {
        return shape_err("slice_cols", x.shape(), &[start, end]);
    }
    let mut out = Vec::with_capacity(x.rows() * (end - start));
    for i in 0..x.rows() {
        out.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::new(&[x.rows(), end - start], out)
}

/// Row slice `[start, end)` of a matrix.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || start >= end || end > x.rows() {
        return shape_err("slice_rows", x.shape(), &[start, end]);
    }
    let c = x.cols();
    Tensor::new(&[end - start, c], x.data[start * c..end * c].to_vec())
}

/// Gathers the listed rows of a matrix.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let c = x.cols();
    if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
        return Err(Error::Input(format!("row index out of range for {:?}", x.shape())));
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), c], out)
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> T {
    x.data.iter().copied().sum()
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
        grad: None,
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        grad: None,
    })
}
