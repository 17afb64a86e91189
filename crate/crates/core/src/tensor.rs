//! Dense row-major tensors and the raw kernels the tape is built on.
//!
//! Everything here is value-level: no gradient bookkeeping. The differentiable
//! wrappers live in [`crate::autodiff`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type used throughout the crate.
pub type Scalar = f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Usage(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Scalar) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `rows x cols` matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<Scalar>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// A `1 x n` row vector.
    pub fn row(values: &[Scalar]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// An `n x 1` column vector.
    pub fn column(values: &[Scalar]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count when viewed as a matrix (all leading axes folded together).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn get(&self, r: usize, c: usize) -> Scalar {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[Scalar] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Scalar, Scalar) -> Scalar) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (r, k) = (self.rows(), self.cols());
        let (k2, c) = (rhs.rows(), rhs.cols());
        if k != k2 || self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(shape_err("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(&self.data, &rhs.data, &mut out, r, k, c);
        Ok(Self {
            shape: vec![r, c],
            data: out,
        })
    }

    /// Copies columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        assert!(start < end && end <= c);
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows() * w);
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        Self {
            shape: vec![self.rows(), w],
            data,
        }
    }

    /// Copies the listed columns in order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.rows() * cols.len());
        for row in self.data.chunks(c) {
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self {
            shape: vec![self.rows(), cols.len()],
            data,
        }
    }

    /// Copies the listed rows in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Self {
            shape: vec![rows.len(), c],
            data,
        }
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Scalar {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// `max|a-b| / max(max|b|, tiny)`, the relative error used by tests.
    pub fn rel_diff(&self, reference: &Self) -> Scalar {
        let scale = reference.data.iter().map(|x| x.abs()).fold(0.0, Scalar::max);
        self.max_abs_diff(reference) / scale.max(1e-300)
    }
}

/// `out[r x c] += a[r x k] · b[k x c]`
pub(crate) fn gemm_nn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r x c] += a[r x k] · b[c x k]ᵀ`
pub(crate) fn gemm_nt(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * c + j] += acc;
        }
    }
}

/// `out[k x c] += a[r x k]ᵀ · b[r x c]`
pub(crate) fn gemm_tn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * c..(i + 1) * c];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
