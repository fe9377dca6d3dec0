//! Dense linear algebra, probability primitives, seeded sampling and a small
//! reverse-mode gradient tape.
//!
//! Everything here works in `f64`. Storage formats narrow to `f32` only at
//! the file boundary.

pub mod rng;
pub mod tape;

use crate::error::{invalid, CilError, Result};

pub use rng::SeededRng;
pub use tape::{GradTape, NodeId};

/// Sum-to-one tolerance for probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("matrix data length {} does not match {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(invalid(format!("matvec: vector length {} does not match {} columns", x.len(), self.cols)));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!("matmul: {}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A categorical distribution: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_probabilities(&values)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn validate_probabilities(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(invalid("probability vector is empty"));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("probability entry {v} outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Lowest index of the maximum; NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(invalid("cannot normalize a zero-norm or non-finite vector"));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `log Σ exp(x)` with max-shift.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax logits must be finite"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

/// Softmax without validation; callers guarantee finite, non-empty input.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Shannon entropy in nats, `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_probabilities(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Lower-triangular `L` with `L·Lᵀ = s`.
pub fn cholesky(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    if s.cols() != n {
        return Err(invalid(format!("cholesky of a non-square {}x{} matrix", n, s.cols())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let diag = s.get(j, j) - dot(&lj[..j], &lj[..j]);
        if diag <= 0.0 || !diag.is_finite() {
            return Err(CilError::DecompositionFailed { pivot: j, value: diag });
        }
        let d = diag.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let v = (s.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j])) / d;
            l.set(i, j, v);
        }
    }
    Ok(l)
}
