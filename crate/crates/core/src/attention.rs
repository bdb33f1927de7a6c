//! Dense row-major kernels: row softmax and single-head scaled dot-product
//! attention over a compacted cache.
//!
//! Everything here is f32 storage with max-subtracted softmax. The decoder
//! calls the slice-level helpers ([`dot`], [`softmax_in_place`]) directly on
//! its cache buffers; [`RowMatrix`] is the checked public surface.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent lanes let the compiler vectorise without fast-math.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Max-subtracted softmax over a non-empty slice, in place.
#[inline]
pub fn softmax_in_place(xs: &mut [f32]) {
    debug_assert!(!xs.is_empty());
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += f64::from(*x);
    }
    let inv = (1.0 / sum) as f32;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

pub fn softmax_rows(m: &RowMatrix) -> Result<RowMatrix> {
    if m.cols == 0 {
        return Err(Error::EmptySoftmaxDomain);
    }
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// `softmax(q K^T * scale) V` for a single query row.
pub fn attention(q: &RowMatrix, k: &RowMatrix, v: &RowMatrix, scale: f32) -> Result<RowMatrix> {
    if q.rows != 1 || q.cols != k.cols || k.rows != v.rows {
        return Err(Error::ShapeMismatch(format!(
            "q {}x{}, K {}x{}, V {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    if k.rows == 0 {
        return Err(Error::EmptyCache);
    }
    let mut weights = vec![0.0f32; k.rows];
    scaled_logits(q.row(0), &k.data, k.cols, scale, &mut weights);
    softmax_in_place(&mut weights);
    let mut out = vec![0.0f32; v.cols];
    weighted_sum(&weights, &v.data, v.cols, &mut out);
    RowMatrix::new(1, v.cols, out)
}

/// Default `1/sqrt(d)` scale.
pub fn default_scale(d: usize) -> f32 {
    1.0 / (d as f32).sqrt()
}

/// Writes `dot(q, k_j) * scale` for each row `k_j` of the flat key block.
#[inline]
pub(crate) fn scaled_logits(q: &[f32], keys: &[f32], d: usize, scale: f32, out: &mut [f32]) {
    for (o, k) in out.iter_mut().zip(keys.chunks_exact(d)) {
        *o = dot(q, k) * scale;
    }
}

/// `out += sum_j weights[j] * values[j]`.
#[inline]
pub(crate) fn weighted_sum(weights: &[f32], values: &[f32], dv: usize, out: &mut [f32]) {
    for (&w, v) in weights.iter().zip(values.chunks_exact(dv)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}
