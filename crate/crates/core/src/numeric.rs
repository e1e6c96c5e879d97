//! Scalar/vector kernels shared by every loss: normalization, temperature
//! softmax, entropy, symmetric KL divergence, cosine similarity and a
//! deterministic argmax.
//!
//! All logarithms are natural. Probabilities are clamped below by
//! [`PROB_EPSILON`] before any log so that exact zeros never produce -inf;
//! the clamp sits well below every test tolerance in the crate.

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPSILON: f64 = 1e-12;

/// ln(max(x, eps)). Combined with a leading multiplier of `x` itself this
/// realizes the 0·ln 0 = 0 convention for exact zeros.
#[inline]
pub fn safe_ln(x: f64) -> f64 {
    x.max(PROB_EPSILON).ln()
}

/// Scale `v` to unit Euclidean norm.
///
/// A zero vector cannot be normalized; it is returned unchanged and flagged
/// so callers can treat the sample as degenerate.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    // A vector whose squared norm overflows is as unusable as the zero
    // vector; both are flagged rather than silently mangled.
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        return (v.to_vec(), true);
    }
    let inv = 1.0 / norm_sq.sqrt();
    (v.iter().map(|x| x * inv).collect(), false)
}

/// Temperature softmax: exp(z_i/sigma) / sum_j exp(z_j/sigma), computed with
/// max-subtraction so small temperatures cannot overflow.
pub fn softmax_temperature(logits: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive, got {sigma}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax over empty logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / sigma).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Shannon entropy -sum p ln p of a probability vector, in [0, ln k].
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * safe_ln(x);
        }
    }
    h.max(0.0)
}

/// Symmetric KL divergence (KL(p||q) + KL(q||p)) / 2 with clamped logs.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "symmetric_kl length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        let diff = safe_ln(a) - safe_ln(b);
        acc += 0.5 * (a * diff - b * diff);
    }
    Ok(acc.max(0.0))
}

/// Cosine similarity u.v / (|u||v|), clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "cosine length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidInput(
            "cosine similarity undefined for a zero vector".into(),
        ));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Index of the maximum value; ties break to the smallest index.
pub fn argmax_tiebreak(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::InvalidInput("argmax over empty slice".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Dot product of two equal-length slices. Hot path; no length check.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ---------------------------------------------------------------------------
// Gradient helpers used by the losses. Each works on the softmax output `p`
// of some logits `z` and converts d(loss)/dp into d(loss)/dz via the softmax
// Jacobian: dL/dz_k = p_k (dL/dp_k - sum_m p_m dL/dp_m).
// ---------------------------------------------------------------------------

/// Given softmax output `p` and dL/dp, write dL/dz into `out` (accumulating).
pub fn softmax_backward_into(p: &[f64], dl_dp: &[f64], out: &mut [f64]) {
    let inner: f64 = p.iter().zip(dl_dp.iter()).map(|(&a, &b)| a * b).sum();
    for k in 0..p.len() {
        out[k] += p[k] * (dl_dp[k] - inner);
    }
}

/// d(entropy)/dp_m for the clamped entropy above.
#[inline]
pub fn entropy_grad_wrt_p(p_m: f64) -> f64 {
    let indicator = if p_m >= PROB_EPSILON { 1.0 } else { 0.0 };
    -(safe_ln(p_m) + indicator)
}

/// Fill dS/dp and dS/dq for the clamped symmetric KL above.
pub fn symmetric_kl_grads(p: &[f64], q: &[f64], dp: &mut [f64], dq: &mut [f64]) {
    for m in 0..p.len() {
        let lp = safe_ln(p[m]);
        let lq = safe_ln(q[m]);
        let ip = if p[m] >= PROB_EPSILON { 1.0 } else { 0.0 };
        let iq = if q[m] >= PROB_EPSILON { 1.0 } else { 0.0 };
        dp[m] = 0.5 * (lp - lq + ip * (1.0 - q[m] / p[m].max(PROB_EPSILON)));
        dq[m] = 0.5 * (lq - lp + iq * (1.0 - p[m] / q[m].max(PROB_EPSILON)));
    }
}
