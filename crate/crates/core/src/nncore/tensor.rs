//! Dense row-major tensors and the strided matrix product everything else is built on.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NnError;

/// Floating-point element type. Training runs in `f32`; gradient checks run the
/// same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// All pointers must be valid for every index reachable through the given
    /// shapes and strides. Callers go through [`gemm`], which checks this.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Plain row-major `rows × cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs: 1 }
    }
}

/// `C = alpha·A·B + beta·C` with bounds checked against the backing slices.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.cols == 0 || a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.rows == 0 || b.last_index() < b.data.len(), "gemm rhs out of bounds");
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm output out of bounds");
    // SAFETY: every reachable index was bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The 32-bit tensor used throughout training and inference.
pub type TensorF = Tensor<f32>;

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
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

    /// Leading dimension of a matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing dimension of a matrix.
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

    pub fn as_mat(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }

    pub fn as_mat_mut(&mut self) -> MatMut<'_, T> {
        let (r, c) = (self.rows(), self.cols());
        MatMut::new(&mut self.data, r, c)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Fails with [`NnError::NonFinite`] naming `op` when any value is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<(), NnError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite(op.to_string()))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

/// `a·b` for row-major matrices, allocating the output.
pub fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[a.rows, b.cols]);
    gemm(T::one(), a, b, T::zero(), out.as_mat_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let c = matmul(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5));
        let want = naive(&a, &b, 3, 4, 5);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (Bᵀ Aᵀ)ᵀ = A B
        let ct = matmul(MatRef::new(&b, 4, 5).t(), MatRef::new(&a, 3, 4).t());
        for i in 0..3 {
            for j in 0..5 {
                assert!((ct.data()[j * 3 + i] - want[i * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_column_block() {
        // take columns 2..4 of a 3×6 matrix
        let a: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let c = matmul(MatRef::strided(&a, 2, 3, 2, 6), MatRef::new(&eye, 2, 2));
        assert_eq!(c.data(), &[2.0, 3.0, 8.0, 9.0, 14.0, 15.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(NnError::NonFinite(_))));
        assert!(Tensor::<f32>::from_vec(&[3], vec![0.0]).is_err());
    }
}
