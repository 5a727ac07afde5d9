//! Language-modeling loss and the three routing regularizers.
//!
//! Every loss has a `*_grad` twin returning the value together with its
//! analytic gradient; the finite-difference harness in [`crate::gradcheck`]
//! checks each pair.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cosine, dot, log_sum_exp, norm, softmax_into, Matrix};
use crate::router::COSINE_EPS;

/// Denominator guard in the squared-CV balance loss.
pub const BALANCE_EPS: f64 = 1e-8;

fn check_targets(logits: &Matrix, targets: &[u32]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "lm targets",
            expected: logits.rows(),
            actual: targets.len(),
        });
    }
    let v = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab_size: v,
        });
    }
    Ok(())
}

/// Mean next-token cross-entropy in nats.
pub fn lm_loss(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    check_targets(logits, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            log_sum_exp(row) - row[y as usize]
        })
        .sum();
    Ok(total / targets.len() as f64)
}

/// Cross-entropy and `d loss / d logits`.
pub fn lm_loss_grad(logits: &Matrix, targets: &[u32]) -> Result<(f64, Matrix)> {
    check_targets(logits, targets)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if targets.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        total += log_sum_exp(row) - row[y as usize];
        let g = grad.row_mut(t);
        softmax_into(row, g);
        g[y as usize] -= 1.0;
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grad))
}

fn mean_probs(scores: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if scores.rows() == 0 {
        return Err(invalid("routing loss needs at least one token"));
    }
    let n = scores.cols();
    let mut probs = Matrix::zeros(scores.rows(), n);
    let mut p_mean = vec![0.0; n];
    for t in 0..scores.rows() {
        softmax_into(scores.row(t), probs.row_mut(t));
        for (m, p) in p_mean.iter_mut().zip(probs.row(t)) {
            *m += p;
        }
    }
    let inv = 1.0 / scores.rows() as f64;
    p_mean.iter_mut().for_each(|m| *m *= inv);
    Ok((p_mean, probs))
}

/// `N · Var(p) / (Mean(p)² + eps)` with population variance.
pub fn balance_from_mean_probs(p_mean: &[f64]) -> f64 {
    let n = p_mean.len() as f64;
    let mu = p_mean.iter().sum::<f64>() / n;
    let var = p_mean.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
    n * var / (mu * mu + BALANCE_EPS)
}

/// Squared coefficient of variation of the mean routing distribution.
pub fn balance_loss(scores: &Matrix) -> Result<f64> {
    let (p_mean, _) = mean_probs(scores)?;
    Ok(balance_from_mean_probs(&p_mean))
}

pub fn balance_loss_grad(scores: &Matrix) -> Result<(f64, Matrix)> {
    let (p_mean, probs) = mean_probs(scores)?;
    let n = p_mean.len();
    let nf = n as f64;
    let mu = p_mean.iter().sum::<f64>() / nf;
    let var = p_mean.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / nf;
    let den = mu * mu + BALANCE_EPS;
    let value = nf * var / den;
    // dL/dp_i; the variance's own dependence on μ cancels since Σ(p - μ) = 0.
    let dp: Vec<f64> = p_mean
        .iter()
        .map(|p| nf * ((2.0 / nf) * (p - mu) * den - var * 2.0 * mu / nf) / (den * den))
        .collect();
    let inv_t = 1.0 / scores.rows() as f64;
    let mut grad = Matrix::zeros(scores.rows(), n);
    for t in 0..scores.rows() {
        let s = probs.row(t);
        let inner = dot(s, &dp);
        for (j, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = inv_t * s[j] * (dp[j] - inner);
        }
    }
    Ok((value, grad))
}

fn check_anchor_rows(anchors: &Matrix) -> Result<()> {
    if anchors.rows() < 2 {
        return Err(invalid(format!(
            "dispersion needs at least 2 anchors, got {}",
            anchors.rows()
        )));
    }
    Ok(())
}

/// Mean cosine similarity over all ordered pairs of distinct anchors.
pub fn dispersion_loss(anchors: &Matrix) -> Result<f64> {
    check_anchor_rows(anchors)?;
    let n = anchors.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine(anchors.row(i), anchors.row(j), COSINE_EPS);
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

pub fn dispersion_loss_grad(anchors: &Matrix) -> Result<(f64, Matrix)> {
    check_anchor_rows(anchors)?;
    let n = anchors.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(anchors.row(i))).collect();
    let pair_weight = 2.0 / (n * (n - 1)) as f64;
    let mut grad = Matrix::zeros(n, anchors.cols());
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (anchors.row(i), anchors.row(j));
            let den = norms[i] * norms[j] + COSINE_EPS;
            let num = dot(a, b);
            sum += num / den;
            let c = num / (den * den);
            let ca = if norms[i] > 0.0 {
                c * norms[j] / norms[i]
            } else {
                0.0
            };
            let cb = if norms[j] > 0.0 {
                c * norms[i] / norms[j]
            } else {
                0.0
            };
            for d in 0..anchors.cols() {
                let ga = b[d] / den - ca * a[d];
                let gb = a[d] / den - cb * b[d];
                grad.as_mut_slice()[i * anchors.cols() + d] += pair_weight * ga;
                grad.as_mut_slice()[j * anchors.cols() + d] += pair_weight * gb;
            }
        }
    }
    Ok((pair_weight * sum, grad))
}

/// Mean squared log-sum-exp of each token's score row.
pub fn z_loss(scores: &Matrix) -> Result<f64> {
    if scores.rows() == 0 {
        return Err(invalid("z-loss needs at least one token"));
    }
    let total: f64 = (0..scores.rows())
        .map(|t| {
            let lse = log_sum_exp(scores.row(t));
            lse * lse
        })
        .sum();
    Ok(total / scores.rows() as f64)
}

pub fn z_loss_grad(scores: &Matrix) -> Result<(f64, Matrix)> {
    if scores.rows() == 0 {
        return Err(invalid("z-loss needs at least one token"));
    }
    let inv_t = 1.0 / scores.rows() as f64;
    let mut grad = Matrix::zeros(scores.rows(), scores.cols());
    let mut total = 0.0;
    for t in 0..scores.rows() {
        let row = scores.row(t);
        let lse = log_sum_exp(row);
        total += lse * lse;
        let g = grad.row_mut(t);
        softmax_into(row, g);
        g.iter_mut().for_each(|x| *x *= 2.0 * lse * inv_t);
    }
    Ok((total * inv_t, grad))
}

/// Coefficients on the balance, dispersion and z terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.6,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub balance: f64,
    pub dispersion: f64,
    pub z: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// First non-finite component, in evaluation order.
    pub fn check_finite(&self) -> Result<()> {
        for (component, value) in [
            ("lm", self.lm),
            ("balance", self.balance),
            ("dispersion", self.dispersion),
            ("z", self.z),
            ("total", self.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { component, value });
            }
        }
        Ok(())
    }
}

/// `lm + α·balance + β·dispersion + γ·z`.
pub fn total_loss(
    lm: f64,
    balance: f64,
    dispersion: f64,
    z: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let LossWeights { alpha, beta, gamma } = weights;
    if !(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0) {
        return Err(invalid("loss coefficients must be nonnegative"));
    }
    Ok(LossBreakdown {
        lm,
        balance,
        dispersion,
        z,
        total: lm + alpha * balance + beta * dispersion + gamma * z,
        alpha,
        beta,
        gamma,
    })
}
