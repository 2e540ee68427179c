//! Elementwise and row-wise kernels with their hand-derived backward passes.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Boolean matrix; `true` marks an entry that takes part in the computation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::dim(
                "Mask::from_vec",
                format!("{} flags for a {rows}x{cols} mask", keep.len()),
            ));
        }
        Ok(Self { rows, cols, keep })
    }

    /// Key-padding mask: entry (i, j) is kept when key `j` is valid.
    pub fn from_keys(rows: usize, valid_keys: &[bool]) -> Self {
        let cols = valid_keys.len();
        let keep = (0..rows).flat_map(|_| valid_keys.iter().copied()).collect();
        Self { rows, cols, keep }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x·σ(x)`.
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: &Matrix) -> Matrix {
    x.map(silu_scalar)
}

/// Gradient of `silu` given the pre-activation input and upstream gradient.
pub fn silu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= silu_grad_scalar(v);
    }
    dx
}

/// Numerically stable softmax over a slice, restricted to `keep` entries.
/// Masked entries come out as exactly zero.
pub(crate) fn softmax_slice(x: &[f64], keep: Option<&[bool]>, out: &mut [f64]) -> Option<()> {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = (0..x.len())
        .filter(|&j| kept(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for j in 0..x.len() {
        out[j] = if kept(j) {
            let e = (x[j] - max).exp();
            sum += e;
            e
        } else {
            0.0
        };
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some(())
}

/// Row-wise softmax with max subtraction. Masked entries are exactly zero.
pub fn softmax_rows(x: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::dim(
                "softmax_rows",
                format!("mask {:?} vs input {:?}", m.shape(), x.shape()),
            ));
        }
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for i in 0..x.rows() {
        let keep = mask.map(|m| &m.keep[i * cols..(i + 1) * cols]);
        softmax_slice(x.row(i), keep, out.row_mut(i)).ok_or(Error::FullyMasked { row: i })?;
    }
    Ok(out)
}

/// Backward of a row softmax given its output `y`.
pub(crate) fn softmax_slice_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yj), &dyj) in dx.iter_mut().zip(y).zip(dy) {
        *d = yj * (dyj - inner);
    }
}

pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        softmax_slice_backward(y.row(i), dy.row(i), dx.row_mut(i));
    }
    dx
}

/// Row layer normalization `(x - μ) / √(σ² + eps)` with no learned affine.
pub fn layer_norm(x: &Matrix, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        layer_norm_slice(x.row(i), eps, out.row_mut(i));
    }
    out
}

pub(crate) fn layer_norm_slice(x: &[f64], eps: f64, out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

pub(crate) fn layer_norm_slice_backward(x: &[f64], dy: &[f64], eps: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_xhat = x
        .iter()
        .zip(dy)
        .map(|(v, d)| (v - mean) * inv * d)
        .sum::<f64>()
        / n;
    for ((o, v), d) in dx.iter_mut().zip(x).zip(dy) {
        let xhat = (v - mean) * inv;
        *o = inv * (d - mean_dy - xhat * mean_dy_xhat);
    }
}

pub fn layer_norm_backward(x: &Matrix, dy: &Matrix, eps: f64) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        layer_norm_slice_backward(x.row(i), dy.row(i), eps, dx.row_mut(i));
    }
    dx
}
