//! Dense row-major `f64` tensors, the GEMM lowering of weight tensors, and a
//! small strided-matrix view used by the layer kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(format!(
                "dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} describe {expected} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Shape of the GEMM-lowered view: `(dims[0], product(dims[1..]))`.
    pub fn lowered_shape(&self) -> (usize, usize) {
        lowered_shape(&self.dims)
    }

    /// Row `r` of the lowered matrix.
    pub fn lowered_row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.lowered_shape();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn lowered_row_mut(&mut self, r: usize) -> &mut [f64] {
        let (_, cols) = self.lowered_shape();
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

/// `(rows, cols)` of the lowered matrix for weight dims `[F, ...]`.
pub fn lowered_shape(dims: &[usize]) -> (usize, usize) {
    let rows = dims.first().copied().unwrap_or(1);
    let cols = dims.iter().skip(1).product();
    (rows, cols)
}

/// Lowers a `[F, C, Kh, Kw]` filter bank to its `F x (C*Kh*Kw)` GEMM matrix.
///
/// Row `f` is filter `f` flattened channel-major, then kernel row, then kernel
/// column, which is exactly the row-major storage order, so the lowering never
/// moves data.
pub fn im2col_lower(weights: &Tensor) -> Result<Tensor> {
    if weights.rank() != 4 {
        return Err(Error::shape(format!(
            "im2col lowering needs a rank-4 filter bank, got dims {:?}",
            weights.dims()
        )));
    }
    let (rows, cols) = weights.lowered_shape();
    Tensor::new(vec![rows, cols], weights.data().to_vec())
}

/// Inverse of [`im2col_lower`].
pub fn raise_lowered(matrix: &Tensor, dims: &[usize]) -> Result<Tensor> {
    if matrix.rank() != 2 {
        return Err(Error::shape(format!(
            "expected a lowered matrix, got dims {:?}",
            matrix.dims()
        )));
    }
    if lowered_shape(dims) != (matrix.dims()[0], matrix.dims()[1]) {
        return Err(Error::shape(format!("cannot raise {:?} to {dims:?}", matrix.dims())));
    }
    Tensor::new(dims.to_vec(), matrix.data().to_vec())
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: both views were bounds-checked at construction for their
    // row-major extent and transposition only swaps strides; `c` holds at
    // least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowering_of_two_filters() {
        let w = Tensor::new(vec![2, 1, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let m = im2col_lower(&w).unwrap();
        assert_eq!(m.dims(), &[2, 4]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn lowering_zero_bank() {
        let m = im2col_lower(&Tensor::zeros(&[3, 2, 5, 5])).unwrap();
        assert_eq!(m.dims(), &[3, 50]);
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lowering_rejects_other_ranks() {
        assert!(matches!(im2col_lower(&Tensor::zeros(&[3, 4])), Err(Error::Shape(_))));
        assert!(matches!(
            im2col_lower(&Tensor::zeros(&[1, 3, 4, 4, 1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            1.0,
            MatRef::row_major(&a, 2, 2),
            MatRef::row_major(&b, 2, 2),
            0.0,
            &mut c,
        );
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(
            1.0,
            MatRef::row_major(&a, 2, 2).t(),
            MatRef::row_major(&b, 2, 2),
            0.0,
            &mut c,
        );
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(
            1.0,
            MatRef::row_major(&a, 2, 2),
            MatRef::row_major(&b, 2, 2).t(),
            1.0,
            &mut c,
        );
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
