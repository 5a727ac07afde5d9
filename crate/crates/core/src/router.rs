//! Cosine-anchor routing.
//!
//! Each expert owns a learnable direction (its *anchor*). A token is scored
//! against every anchor by cosine similarity, the `k` best experts are chosen
//! (optionally after Gaussian perturbation), and their outputs are mixed with
//! softmax weights over the selected scores.
//!
//! The top-k and mixing half of this module is shared with the learned-gate
//! baseline, which only differs in how the score row is produced.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::Rng;

use crate::error::{ensure_len, invalid, Result};
use crate::linalg::{dot, householder_q, norm, softmax, Matrix};
use crate::record::{LayerRecord, RouteEntry};
use crate::rng;

/// Guard added to the norm product in every cosine.
pub const COSINE_EPS: f64 = 1e-8;

/// Bound on |score| beyond 1 tolerated from rounding.
pub const SCORE_TOL: f64 = 1e-5;

/// Learnable N×D anchor matrix, one row per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Matrix,
    eps: f64,
}

impl AnchorSet {
    pub fn new(anchors: Matrix) -> Result<Self> {
        let (n, d) = anchors.shape();
        if n < 2 {
            return Err(invalid(format!("need at least 2 anchors, got {n}")));
        }
        if d < 1 {
            return Err(invalid("anchor dimension must be positive"));
        }
        for i in 0..n {
            let row = anchors.row(i);
            if !row.iter().all(|x| x.is_finite()) {
                return Err(invalid(format!("anchor {i} has non-finite entries")));
            }
            if norm(row) <= COSINE_EPS {
                return Err(invalid(format!("anchor {i} is the zero vector")));
            }
        }
        Ok(Self {
            anchors,
            eps: COSINE_EPS,
        })
    }

    /// Unvalidated zero set, used as a gradient accumulator.
    pub(crate) fn zeros(n: usize, d: usize) -> Self {
        Self {
            anchors: Matrix::zeros(n, d),
            eps: COSINE_EPS,
        }
    }

    /// Orthonormal rows drawn from a Gaussian matrix.
    ///
    /// With more experts than dimensions the rows come in consecutive blocks
    /// of at most `dim` rows, each block orthonormal on its own.
    pub fn orthogonal(n_experts: usize, dim: usize, seed: u64) -> Result<Self> {
        check_shape(n_experts, dim)?;
        let mut rng = rng::seeded(seed);
        let mut anchors = Matrix::zeros(n_experts, dim);
        let mut start = 0;
        while start < n_experts {
            let rows = (n_experts - start).min(dim);
            let mut gaussian = Matrix::zeros(dim, rows);
            for x in gaussian.as_mut_slice() {
                *x = rng::standard_normal(&mut rng);
            }
            let q = householder_q(&gaussian);
            for r in 0..rows {
                let out = anchors.row_mut(start + r);
                for (c, x) in out.iter_mut().enumerate() {
                    *x = q.get(c, r);
                }
            }
            start += rows;
        }
        Self::new(anchors)
    }

    /// Uniform on `[-b, b]` with `b = sqrt(6 / dim)` (fan-in = dim).
    pub fn kaiming(n_experts: usize, dim: usize, seed: u64) -> Result<Self> {
        check_shape(n_experts, dim)?;
        let bound = kaiming_bound(dim);
        let mut rng = rng::seeded(seed);
        let mut anchors = Matrix::zeros(n_experts, dim);
        for x in anchors.as_mut_slice() {
            *x = rng.gen_range(-bound..=bound);
        }
        Self::new(anchors)
    }

    pub fn n_experts(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn matrix(&self) -> &Matrix {
        &self.anchors
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.anchors
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        self.anchors.row(i)
    }
}

pub fn kaiming_bound(dim: usize) -> f64 {
    libm::sqrt(6.0 / dim as f64)
}

fn check_shape(n_experts: usize, dim: usize) -> Result<()> {
    if n_experts < 2 {
        return Err(invalid(format!("need at least 2 experts, got {n_experts}")));
    }
    if dim < 1 {
        return Err(invalid("anchor dimension must be positive"));
    }
    Ok(())
}

/// Cosine similarity of one token against every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceScores(Vec<f64>);

impl ResonanceScores {
    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ResonanceScores {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn resonance(token_repr: &[f64], anchors: &AnchorSet) -> Result<ResonanceScores> {
    ensure_len("resonance token", anchors.dim(), token_repr.len())?;
    let h_norm = norm(token_repr);
    let scores = (0..anchors.n_experts())
        .map(|i| {
            let a = anchors.anchor(i);
            dot(token_repr, a) / (h_norm * norm(a) + anchors.eps)
        })
        .collect();
    Ok(ResonanceScores(scores))
}

/// Resonance for a T×D batch of tokens, returning a T×N score matrix.
pub fn resonance_matrix(tokens: &Matrix, anchors: &AnchorSet) -> Result<Matrix> {
    ensure_len("resonance token", anchors.dim(), tokens.cols())?;
    let n = anchors.n_experts();
    let anchor_norms: Vec<f64> = (0..n).map(|i| norm(anchors.anchor(i))).collect();
    let mut scores = Matrix::zeros(tokens.rows(), n);
    for t in 0..tokens.rows() {
        let h = tokens.row(t);
        let h_norm = norm(h);
        let out = scores.row_mut(t);
        for (i, s) in out.iter_mut().enumerate() {
            *s = dot(h, anchors.anchor(i)) / (h_norm * anchor_norms[i] + anchors.eps);
        }
    }
    Ok(scores)
}

/// Backpropagates `dscores` (T×N) through [`resonance_matrix`], accumulating
/// into `dtokens` (T×D) and `danchors` (N×D).
pub fn resonance_backward(
    tokens: &Matrix,
    anchors: &AnchorSet,
    dscores: &Matrix,
    dtokens: &mut Matrix,
    danchors: &mut Matrix,
) {
    let n = anchors.n_experts();
    let anchor_norms: Vec<f64> = (0..n).map(|i| norm(anchors.anchor(i))).collect();
    for t in 0..tokens.rows() {
        let h = tokens.row(t);
        let h_norm = norm(h);
        for i in 0..n {
            let g = dscores.get(t, i);
            if g == 0.0 {
                continue;
            }
            let a = anchors.anchor(i);
            let a_norm = anchor_norms[i];
            let den = h_norm * a_norm + anchors.eps;
            let num = dot(h, a);
            let c = num / (den * den);
            // d/dh: a/den - num/den² · ‖a‖ · h/‖h‖   (h = 0 contributes only a/den)
            let h_coef = if h_norm > 0.0 {
                c * a_norm / h_norm
            } else {
                0.0
            };
            let a_coef = if a_norm > 0.0 {
                c * h_norm / a_norm
            } else {
                0.0
            };
            let dh = dtokens.row_mut(t);
            for d in 0..h.len() {
                dh[d] += g * (a[d] / den - h_coef * h[d]);
            }
            let da = danchors.row_mut(i);
            for d in 0..h.len() {
                da[d] += g * (h[d] / den - a_coef * a[d]);
            }
        }
    }
}

/// Outcome of top-k selection for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, best first.
    pub indices: Vec<usize>,
    /// Softmax over the selected (perturbed) scores, aligned with `indices`.
    pub weights: Vec<f64>,
    /// Perturbed scores of the selected experts, aligned with `indices`.
    pub selected_scores: Vec<f64>,
    pub noise_sigma: f64,
}

/// Picks the `k` largest of `scores + η`, `η ~ N(0, σ²)`, ties to the lowest index.
///
/// No random numbers are drawn when `noise_sigma == 0`.
pub fn select_topk<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<RoutingDecision> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(invalid(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise sigma must be nonnegative"));
    }
    let perturbed: Vec<f64> = if noise_sigma > 0.0 {
        scores
            .iter()
            .map(|&s| s + noise_sigma * rng::standard_normal(rng))
            .collect()
    } else {
        scores.to_vec()
    };
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if perturbed[i] > perturbed[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("k <= n leaves a candidate");
        taken[b] = true;
        indices.push(b);
    }
    let selected_scores: Vec<f64> = indices.iter().map(|&i| perturbed[i]).collect();
    let weights = softmax(&selected_scores);
    Ok(RoutingDecision {
        indices,
        weights,
        selected_scores,
        noise_sigma,
    })
}

/// Gradient of the mixing weights w.r.t. the selected scores, added into
/// the full score row `dscores` (length N).
pub fn topk_backward(decision: &RoutingDecision, dweights: &[f64], dscores: &mut [f64]) {
    let inner: f64 = decision
        .weights
        .iter()
        .zip(dweights)
        .map(|(w, g)| w * g)
        .sum();
    for (slot, &e) in decision.indices.iter().enumerate() {
        dscores[e] += decision.weights[slot] * (dweights[slot] - inner);
    }
}

/// A bank of N maps Rᴰ → Rᴰ.
pub trait ExpertBank {
    fn n_experts(&self) -> usize;
    fn dim(&self) -> usize;
    fn apply(&self, expert: usize, input: &[f64], output: &mut [f64]);
}

/// Result of one routed layer over a batch of tokens.
#[derive(Debug, Clone)]
pub struct CsrOutput {
    pub outputs: Matrix,
    pub record: LayerRecord,
    pub decisions: Vec<RoutingDecision>,
    /// Pre-noise resonance scores, T×N.
    pub scores: Matrix,
}

/// Scores every token against the anchors, selects `k` experts per token and
/// returns the weighted mixture of their outputs.
pub fn csr_forward<E: ExpertBank + ?Sized, R: Rng + ?Sized>(
    token_reprs: &Matrix,
    anchors: &AnchorSet,
    experts: &E,
    k: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<CsrOutput> {
    ensure_len("expert bank size", anchors.n_experts(), experts.n_experts())?;
    ensure_len("expert dimension", token_reprs.cols(), experts.dim())?;
    let scores = resonance_matrix(token_reprs, anchors)?;
    let d = token_reprs.cols();
    let mut outputs = Matrix::zeros(token_reprs.rows(), d);
    let mut record = LayerRecord::default();
    let mut decisions = Vec::with_capacity(token_reprs.rows());
    let mut buf = vec![0.0; d];
    for t in 0..token_reprs.rows() {
        let decision = select_topk(scores.row(t), k, noise_sigma, rng)?;
        let h = token_reprs.row(t);
        for (&e, &w) in decision.indices.iter().zip(&decision.weights) {
            buf.iter_mut().for_each(|x| *x = 0.0);
            experts.apply(e, h, &mut buf);
            for (o, &y) in outputs.row_mut(t).iter_mut().zip(&buf) {
                *o += w * y;
            }
        }
        record.entries.push(RouteEntry {
            position: t,
            token: None,
            experts: decision.indices.clone(),
            weights: decision.weights.clone(),
        });
        decisions.push(decision);
    }
    Ok(CsrOutput {
        outputs,
        record,
        decisions,
        scores,
    })
}
