//! Dense 64-bit float tensors of rank 0, 1 or 2, row-major.
//!
//! All parameters and activations in the crate are carried by [`Tensor`].
//! Arithmetic lives on the tape (`tape` module); this module provides the
//! storage type, shape checking, and the plain (non-recorded) matrix
//! product used by callers that do not need gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Tensor shape, at most rank 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(_, _) => 2,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Option<Shape> {
        match dims {
            [] => Some(Shape::Scalar),
            [n] => Some(Shape::Vector(*n)),
            [r, c] => Some(Shape::Matrix(*r, *c)),
            _ => None,
        }
    }
}

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: Shape::Scalar, data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    /// Builds a matrix from row-major data; errors if the length disagrees.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(Shape::Matrix(rows, cols), data)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, shape.numel(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(Shape::Matrix(n, n));
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row and column counts; scalars are 1x1, vectors 1xn.
    pub fn rows(&self) -> usize {
        match self.shape {
            Shape::Matrix(r, _) => r,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(_, c) => c,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Health check: every entry finite.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Standard matrix product; accepts matrix/matrix and matrix/vector
    /// operand pairs with agreeing inner dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape, other.shape) {
            (Shape::Matrix(p, q), Shape::Matrix(q2, r)) => {
                if q != q2 {
                    return Err(shape_err("matmul", self.shape, other.shape));
                }
                let mut out = Tensor::zeros(Shape::Matrix(p, r));
                matmul_into(&self.data, &other.data, p, q, r, &mut out.data);
                Ok(out)
            }
            (Shape::Matrix(p, q), Shape::Vector(q2)) => {
                if q != q2 {
                    return Err(shape_err("matmul", self.shape, other.shape));
                }
                let mut out = Tensor::zeros(Shape::Vector(p));
                for (o, row) in out.data.iter_mut().zip(self.data.chunks_exact(q)) {
                    *o = dot(row, &other.data);
                }
                Ok(out)
            }
            _ => Err(shape_err("matmul", self.shape, other.shape)),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn shape_err(op: &'static str, a: Shape, b: Shape) -> Error {
    Error::ShapeMismatch { op, detail: format!("{a:?} vs {b:?}") }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the loop vectorizable.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut sum = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// C += A·B with A p×q, B q×r, all row-major. ikj order so the inner loop
/// runs over contiguous rows of B and C.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            axpy(a[i * q + k], &b[k * r..(k + 1) * r], c_row);
        }
    }
}

/// C += A·Bᵀ with A n×q, B r×q: each output entry is a dot of two rows.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], n: usize, q: usize, r: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), n * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(c.len(), n * r);
    for i in 0..n {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            c[i * r + j] += dot(a_row, &b[j * q..(j + 1) * q]);
        }
    }
}
