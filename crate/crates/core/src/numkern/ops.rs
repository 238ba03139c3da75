//! Activations, normalization and similarity kernels.
//!
//! Transcendentals go through `libm` so results do not depend on the host C
//! library.

use crate::error::{shape_err, Error, Result};

use super::matrix::{dot, Matrix};

/// √(2/π)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Gaussian-error linear unit, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = libm::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Population-variance layer normalization of a single vector.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(shape_err(format!("layer_norm lengths x={} gamma={} beta={}", x.len(), gamma.len(), beta.len())));
    }
    if x.is_empty() {
        return Err(shape_err("layer_norm of an empty vector"));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `(mean, inv_std)`.
pub(crate) fn layer_norm_into(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    // Zero variance with eps = 0: every centred value is exactly zero.
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (v - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

/// Row-wise layer normalization.
pub fn layer_norm_rows(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    if x.cols() != gamma.len() || x.cols() != beta.len() {
        return Err(shape_err(format!(
            "layer_norm over {} columns with gamma={} beta={}",
            x.cols(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        layer_norm_into(x.row(r), gamma, beta, eps, out.row_mut(r));
    }
    Ok(out)
}

/// Sum that does not depend on the order of `values`: the terms are sorted
/// before accumulation, so any permutation of the input yields the same bits.
pub fn sum_order_invariant(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Max-subtracted softmax applied to each row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut scratch = Vec::with_capacity(m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
        scratch.clear();
        scratch.extend_from_slice(&exps);
        let total = sum_order_invariant(&mut scratch);
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = e / total;
        }
    }
    out
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("cosine".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit length; zero vectors are returned unchanged.
pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}
