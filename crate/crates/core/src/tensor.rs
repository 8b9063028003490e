//! Dense row-major f32 tensors.
//!
//! Storage is reference counted and immutable; every operation returns a new
//! tensor. Buffers report their size to the [`meter`](crate::meter) so peak
//! live bytes can be measured without relying on the OS.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::meter;

/// Denominator guard shared by every normalization.
pub const EPS: f32 = 1e-6;

struct Buffer(Vec<f32>);

impl Buffer {
    fn new(data: Vec<f32>) -> Self {
        meter::on_alloc(data.len() * 4);
        Buffer(data)
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        meter::on_free(self.0.len() * 4);
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buffer>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        if d.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, d)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, d.len())
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

/// Boolean mask with the same row/column layout as a 2-D tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Every query may attend to the keys flagged valid.
    pub fn from_key_valid(rows: usize, valid: &[bool]) -> Self {
        let cols = valid.len();
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(valid);
        }
        Mask { rows, cols, allowed }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Elementwise conjunction.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op: "mask_and",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let allowed = self
            .allowed
            .iter()
            .zip(&other.allowed)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            allowed,
        })
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(Buffer::new(data)),
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], d)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data.0
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data().len()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * 4
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data()[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data()[i * self.cols() + j]
    }

    pub fn item(&self) -> f32 {
        self.data()[0]
    }

    /// Same storage, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data().iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f32 {
        self.data().iter().map(|&x| x as f64).sum::<f64>() as f32
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_2d("transpose")?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Batched matrix product over the last two axes with broadcast of the
    /// leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.shape.len() < 2 || other.shape.len() < 2 {
            return Err(err());
        }
        let (m, k) = (self.shape[self.shape.len() - 2], self.cols());
        let (k2, n) = (other.shape[other.shape.len() - 2], other.cols());
        if k != k2 {
            return Err(err());
        }
        let ba = &self.shape[..self.shape.len() - 2];
        let bb = &other.shape[..other.shape.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let nb: usize = batch.iter().product();
        let mut out = vec![0.0f32; nb * m * n];
        for (idx, chunk) in out.chunks_mut(m * n).enumerate() {
            let ia = broadcast_index(idx, &batch, ba);
            let ib = broadcast_index(idx, &batch, bb);
            let a = &self.data()[ia * m * k..(ia + 1) * m * k];
            let b = &other.data()[ib * k * n..(ib + 1) * k * n];
            gemm_into(a, false, b, false, m, k, n, 1.0, chunk);
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(Self::from_parts(shape, out))
    }

    /// `alpha * op(a) * op(b)` for 2-D operands, `op` being an optional transpose.
    pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, alpha: f32) -> Result<Tensor> {
        let (ar, ac) = a.require_2d("gemm")?;
        let (br, bc) = b.require_2d("gemm")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        gemm_into(a.data(), ta, b.data(), tb, m, k, n, alpha, &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Row-wise softmax over the last axis. Masked-out entries are exactly zero.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Tensor> {
        let c = self.cols();
        let r = self.rows();
        if let Some(m) = mask {
            if m.rows != r || m.cols != c {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: self.shape.clone(),
                    rhs: vec![m.rows, m.cols],
                });
            }
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed[i * c + j]);
            let mut max = f32::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0f32;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum.max(EPS);
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_2d("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Param(format!("row slice {start}+{len} out of {r}")));
        }
        Ok(Self::from_parts(
            vec![len, c],
            self.data()[start * c..(start + len) * c].to_vec(),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_2d("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Param(format!("column slice {start}+{len} out of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data()[i * c + start..i * c + start + len]);
        }
        Ok(Self::from_parts(vec![r, len], out))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.require_2d("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Param(format!("row index {i} out of {r}")));
            }
            out.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(&[idx.len(), c], out)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().ok_or(Error::Empty("concat_rows"))?.cols();
        let mut rows = 0;
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            let (r, pc) = p.require_2d("concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(vec![rows, c], out))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let r = parts.first().ok_or(Error::Empty("concat_cols"))?.rows();
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_2d("concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_parts(vec![r, total], out))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let x = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let y = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps a flat index into the broadcast batch onto the flat index of an operand.
fn broadcast_index(flat: usize, batch: &[usize], operand: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0;
    let mut stride = 1;
    let off = batch.len() - operand.len();
    for ax in (0..batch.len()).rev() {
        let coord = rem % batch[ax];
        rem /= batch[ax];
        if ax >= off {
            let ext = operand[ax - off];
            if ext != 1 {
                idx += coord * stride;
            }
            stride *= ext;
        }
    }
    idx
}

/// `out = alpha * op(a) op(b)`; `a` is stored m×k (or k×m when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    out: &mut [f32],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
