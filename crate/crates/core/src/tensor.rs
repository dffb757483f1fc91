//! Minimal dense-tensor kernels: row-major f32 tensors, matmul, numerically
//! stable row softmax, and the L2 distance used for fingerprint retrieval.
//!
//! Layout is row-major and the element type is f32 everywhere; the on-disk
//! bank format serializes these buffers verbatim (little-endian), so the
//! layout is part of the file-format contract.

use crate::error::{Error, Result};

/// Dense row-major f32 tensor with an explicit shape.
///
/// Invariants: `data.len()` equals the product of `shape`, and every public
/// operation keeps all values finite given finite inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Parameter {
                name: "shape",
                message: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if data.len() != expected {
            return Err(Error::Parameter {
                name: "data",
                message: format!(
                    "data length {} does not match shape {:?} (expects {})",
                    data.len(),
                    shape,
                    expected
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D constructor, the common case throughout the engine.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 {
            return Err(Error::Parameter {
                name: "rows",
                message: "matrix must be non-empty".into(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Parameter {
                    name: "rows",
                    message: format!("ragged rows: {} vs {}", row.len(), n),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has a shape")
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape_string(&self) -> String {
        format!("{:?}", self.shape)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise scale by a scalar.
    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`, the fusion accumulation primitive.
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "add_scaled",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Columns `lo..hi` of a 2-D tensor, copied out (per-head slicing).
    pub fn col_slice(&self, lo: usize, hi: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        debug_assert!(lo < hi && hi <= n);
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Tensor {
            shape: vec![m, w],
            data,
        }
    }

    /// Writes `block` into columns `lo..` of a 2-D tensor (head concat).
    pub fn set_col_block(&mut self, lo: usize, block: &Tensor) {
        let n = self.cols();
        let w = block.cols();
        debug_assert!(lo + w <= n && block.rows() == self.rows());
        for i in 0..block.rows() {
            self.data[i * n + lo..i * n + lo + w].copy_from_slice(block.row(i));
        }
    }
}

/// Standard matrix product of `a` `[m x p]` and `b` `[p x n]`, row-major.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape_string(),
            right: b.shape_string(),
        });
    }
    let (m, p, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    // ikj order keeps the inner loop contiguous over b and out.
    for i in 0..m {
        for k in 0..p {
            let aik = a.data[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data: out,
    };
    debug_assert!(out.is_finite());
    Ok(out)
}

/// `a . b^T` for 2-D tensors with matching column counts, used for
/// attention scores without materializing the transpose.
pub fn matmul_transpose_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op: "matmul_transpose_b",
            left: a.shape_string(),
            right: b.shape_string(),
        });
    }
    let (m, p, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = &b.data[j * p..(j + 1) * p];
            let mut acc = 0.0f32;
            for k in 0..p {
                acc += arow[k] * brow[k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction; each output row is non-negative
/// and sums to 1 for any finite input, including extreme logits.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let out = &mut data[i * n..(i + 1) * n];
        let mut sum = 0.0f32;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data,
    };
    debug_assert!(out.is_finite());
    out
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op: "l2_distance",
            left: format!("[{}]", a.len()),
            right: format!("[{}]", b.len()),
        });
    }
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc.sqrt())
}
