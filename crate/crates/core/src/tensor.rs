//! Dense row-major kernels.
//!
//! Values are stored as `f64`. A tensor tagged [`Precision::F32`] rounds
//! every kernel output to the nearest `f32`, so 32-bit runs see 32-bit
//! storage precision while gradient checks can run the same code paths at
//! full double precision. All reductions run sequentially in index order,
//! which keeps results bit-identical between runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    /// The coarser of two precisions.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::param(format!("unknown precision {other:?}"))),
        }
    }
}

/// A dense row-major tensor.
///
/// Zero-length dimensions are allowed; they stand for empty row sets such as
/// an empty KV history.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        precision.round_slice(&mut data);
        Ok(Tensor { shape, data, precision })
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], precision }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![rows, cols], data, precision)
    }

    pub fn vector(data: Vec<f64>, precision: Precision) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data, precision).expect("vector shape always matches")
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data, precision)
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut t = Tensor::zeros(vec![n, n], precision);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Re-tags the tensor, rounding when narrowing to 32 bits.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        precision.round_slice(&mut self.data);
        self.precision = precision;
        self
    }

    /// Row count of a matrix (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Length of the innermost dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("{what}: expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Selects rows by index into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data, precision: self.precision }
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(Error::shape(format!("vstack: {} vs {} columns", self.cols(), other.cols())));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: vec![self.rows() + other.rows(), self.cols()],
            data,
            precision: self.precision.join(other.precision),
        })
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dimensions {k} vs {k2}")));
    }
    if a.precision != b.precision {
        return Err(Error::shape("matmul operands differ in precision".to_string()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::matrix(m, n, out, a.precision)
}

/// Accumulating product on raw slices: `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Row-wise `softmax(scores + mask)` with an additive 0/−∞ mask.
pub fn softmax_rows(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if scores.shape() != mask.shape() {
        return Err(Error::shape(format!("softmax: scores {:?} vs mask {:?}", scores.shape(), mask.shape())));
    }
    let cols = scores.cols();
    let mut out = vec![0.0; scores.len()];
    for r in 0..scores.rows() {
        let s = scores.row(r);
        let m = mask.row(r);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (&x, &mk) in s.iter().zip(m) {
            if mk == f64::NEG_INFINITY {
                continue;
            }
            if mk != 0.0 {
                return Err(Error::param(format!("mask entries must be 0 or -inf, got {mk}")));
            }
            max = max.max(x);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::param(format!("attention row {r} is fully masked")));
        }
        let mut sum = 0.0;
        for ((o, &x), &mk) in o.iter_mut().zip(s).zip(m) {
            if mk == 0.0 {
                *o = (x - max).exp();
                sum += *o;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(scores.shape.clone(), out, scores.precision)
}

/// In-place stable softmax of one row; returns nothing, rows never empty.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log(Σ exp(xs))`, computed stably.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Per-row normalization to zero mean and unit variance followed by an affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::param("layer_norm eps must be positive"));
    }
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!("layer_norm: width {d}, gain {}, bias {}", gain.len(), bias.len())));
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let (mean, rstd) = row_moments(x.row(r), eps);
        for (i, (o, &v)) in out[r * d..(r + 1) * d].iter_mut().zip(x.row(r)).enumerate() {
            *o = (v - mean) * rstd * gain.data[i] + bias.data[i];
        }
    }
    Tensor::new(x.shape.clone(), out, x.precision)
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// The `k` largest logits, sorted descending, ties broken by lower token id.
pub fn topk(logits: &[f64], k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 || k > logits.len() {
        return Err(Error::param(format!("topk: k={k} out of range 1..={}", logits.len())));
    }
    let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
    for (id, &v) in logits.iter().enumerate() {
        // Strict comparison keeps the earlier (lower) id ahead on ties.
        let pos = best.iter().position(|&(_, b)| v > b).unwrap_or(best.len());
        if pos < k {
            best.insert(pos, (id as u32, v));
            best.truncate(k);
        }
    }
    Ok(best)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
