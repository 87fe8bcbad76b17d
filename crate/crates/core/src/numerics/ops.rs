//! Scalar kernels and the loss primitives with their analytic gradients.

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Dot product with four independent accumulators.
///
/// The summation order is fixed, so results are reproducible across runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in split..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the forward activation was clamped.
pub fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if x.is_empty() || n <= MIN_NORM || !n.is_finite() {
        return Err(Error::NearZeroNorm { norm: n });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Gradient of `y = x / |x|` given the output `y`, the input norm, and `dL/dy`.
pub fn l2_normalize_backward(y: &[f64], input_norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, gi)| (gi - yi * proj) / input_norm)
        .collect()
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| v - lse).collect()
}

/// Returns `(−log softmax(logits)[target], softmax − onehot)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let lse = logsumexp(logits);
    let loss = (lse - logits[target]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy against a set of acceptable classes: `−log Σ_{k∈S} p_k`.
///
/// Used to collapse object classes into one "foreground" target.
pub fn softmax_cross_entropy_set(logits: &[f64], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: logits.len(),
        });
    }
    let lse = logsumexp(logits);
    let sel: Vec<f64> = targets.iter().map(|&t| logits[t]).collect();
    let lse_sel = logsumexp(&sel);
    let loss = (lse - lse_sel).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    for &t in targets {
        grad[t] -= (logits[t] - lse_sel).exp();
    }
    Ok((loss, grad))
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    // log(1 + e^x) computed without overflow
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    let loss = softplus - target * logit;
    let p = sigmoid(logit);
    (loss, p - target)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximal element (row-major tie-break).
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
