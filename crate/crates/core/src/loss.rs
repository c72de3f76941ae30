//! Softmax, KL divergence and cross-entropy with logit gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Floor applied to the second KL argument before taking its log.
pub const KL_FLOOR: f64 = 1e-12;

pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp_libm()).sum::<T>().ln_libm() + max;
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(T::exp_libm).collect()
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (libm::log(pi) - libm::log(qi.max(KL_FLOOR))))
        .sum())
}

/// `KL(softmax(z), u)` for the uniform `u`, and its gradient in `z`.
///
/// With `p = softmax(z)` the value is `sum p ln p + ln n` and
/// `d/dz_j = p_j (ln p_j - sum_k p_k ln p_k)`.
pub fn kl_to_uniform_with_grad<T: Real>(logits: &[T]) -> (T, Vec<T>) {
    let logp = log_softmax(logits);
    let p: Vec<T> = logp.iter().map(|&l| l.exp_libm()).collect();
    let neg_entropy: T = p.iter().zip(&logp).map(|(&pi, &li)| pi * li).sum();
    let value = neg_entropy + T::of(libm::log(logits.len() as f64));
    let grad = p
        .iter()
        .zip(&logp)
        .map(|(&pi, &li)| pi * (li - neg_entropy))
        .collect();
    (value, grad)
}

/// Cross-entropy of `softmax(z)` against `label`, and its gradient in `z`.
pub fn cross_entropy_with_grad<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let logp = log_softmax(logits);
    let loss = -logp[label];
    let mut grad: Vec<T> = logp.iter().map(|&l| l.exp_libm()).collect();
    grad[label] -= T::one();
    (loss, grad)
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
