//! The full training objective over a model: forward, loss terms, backward.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{log_sum_exp, Matrix};
use crate::losses::{
    balance_loss, balance_loss_grad, dispersion_loss, dispersion_loss_grad, lm_loss, lm_loss_grad,
    total_loss, z_loss, z_loss_grad, LossBreakdown, LossWeights,
};
use crate::model::{FeedForward, ForwardOptions, ForwardPass, Model, Router};
use crate::record::RoutingRecord;

/// A batch of `lanes × seq_len` inputs and their next-token targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [u32],
    pub targets: &'a [u32],
    pub lanes: usize,
    pub seq_len: usize,
}

pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: Model,
    pub records: RoutingRecord,
}

/// Balance and z averaged over mixture layers, dispersion over anchor sets.
/// Zero for terms with no contributing layer.
pub fn auxiliary_losses(model: &Model, scores: &[Matrix]) -> Result<(f64, f64, f64)> {
    let n = scores.len() as f64;
    let (mut balance, mut z) = (0.0, 0.0);
    for s in scores {
        balance += balance_loss(s)? / n;
        z += z_loss(s)? / n;
    }
    let anchors = model.anchor_sets();
    let mut dispersion = 0.0;
    for a in &anchors {
        dispersion += dispersion_loss(a.matrix())? / anchors.len() as f64;
    }
    Ok((balance, dispersion, z))
}

fn breakdown(
    model: &Model,
    pass: &ForwardPass,
    targets: &[u32],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let lm = lm_loss(&pass.logits, targets)?;
    let (balance, dispersion, z) = auxiliary_losses(model, &pass.scores)?;
    total_loss(lm, balance, dispersion, z, weights)
}

/// Loss terms without gradients.
pub fn loss<R: Rng + ?Sized>(
    model: &Model,
    batch: Batch<'_>,
    opts: ForwardOptions,
    weights: LossWeights,
    rng: &mut R,
) -> Result<(LossBreakdown, RoutingRecord)> {
    ensure_len("targets", batch.inputs.len(), batch.targets.len())?;
    let pass = model.forward(batch.inputs, batch.lanes, batch.seq_len, opts, rng)?;
    let b = breakdown(model, &pass, batch.targets, weights)?;
    Ok((b, pass.records))
}

/// Total loss and its gradient with respect to every parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    model: &Model,
    batch: Batch<'_>,
    opts: ForwardOptions,
    weights: LossWeights,
    rng: &mut R,
) -> Result<StepOutput> {
    ensure_len("targets", batch.inputs.len(), batch.targets.len())?;
    let pass = model.forward(batch.inputs, batch.lanes, batch.seq_len, opts, rng)?;
    let (lm, dlogits) = lm_loss_grad(&pass.logits, batch.targets)?;

    let n_moe = pass.scores.len() as f64;
    let mut balance = 0.0;
    let mut z = 0.0;
    let mut dscores = Vec::with_capacity(pass.scores.len());
    for s in &pass.scores {
        let (b, mut g) = balance_loss_grad(s)?;
        let (zv, gz) = z_loss_grad(s)?;
        balance += b / n_moe;
        z += zv / n_moe;
        let (ca, cg) = (weights.alpha / n_moe, weights.gamma / n_moe);
        g.as_mut_slice()
            .iter_mut()
            .zip(gz.as_slice())
            .for_each(|(x, y)| *x = ca * *x + cg * y);
        dscores.push(g);
    }

    let mut grads = model.backward(&pass.cache, &dlogits, &dscores)?;

    let n_sra = model.anchor_sets().len() as f64;
    let mut dispersion = 0.0;
    for (block, gblock) in model.blocks.iter().zip(grads.blocks.iter_mut()) {
        if let (
            FeedForward::Moe {
                router: Router::Resonance(a),
                ..
            },
            FeedForward::Moe {
                router: Router::Resonance(ga),
                ..
            },
        ) = (&block.ffn, &mut gblock.ffn)
        {
            let (dv, dg) = dispersion_loss_grad(a.matrix())?;
            dispersion += dv / n_sra;
            let c = weights.beta / n_sra;
            ga.matrix_mut()
                .as_mut_slice()
                .iter_mut()
                .zip(dg.as_slice())
                .for_each(|(x, y)| *x += c * y);
        }
    }

    let breakdown = total_loss(lm, balance, dispersion, z, weights)?;
    Ok(StepOutput {
        breakdown,
        grads,
        records: pass.records,
    })
}

/// Sum of `−log softmax(logits[t])[targets[t]]` over the first `targets.len()` rows.
pub fn nll_sum(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.len() > logits.rows() {
        return Err(Error::DimensionMismatch {
            context: "targets",
            expected: logits.rows(),
            actual: targets.len(),
        });
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        if y as usize >= row.len() {
            return Err(Error::TokenOutOfRange {
                id: y,
                vocab_size: row.len(),
            });
        }
        total += log_sum_exp(row) - row[y as usize];
    }
    Ok(total)
}

/// Mean cross-entropy and routing of a whole token stream in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEval {
    pub nll_sum: f64,
    pub n_targets: usize,
    /// One entry per token of the stream, positions relative to its start.
    pub records: RoutingRecord,
}

impl StreamEval {
    /// NaN for a single-token stream, which has no targets.
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.n_targets as f64
    }

    pub fn perplexity(&self) -> f64 {
        libm::exp(self.mean_nll())
    }
}

/// Runs `ids` through the model in consecutive windows of `seq_len` tokens
/// (see [`eval_chunks`](crate::batch::eval_chunks)) with routing noise and
/// dropout off.
pub fn evaluate_stream(model: &Model, ids: &[u32], seq_len: usize, k: usize) -> Result<StreamEval> {
    if ids.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let mut out = StreamEval {
        nll_sum: 0.0,
        n_targets: 0,
        records: RoutingRecord::default(),
    };
    let mut unused = crate::rng::seeded(0);
    for chunk in crate::batch::eval_chunks(ids, seq_len)? {
        let pass = model.forward(
            &chunk.inputs,
            1,
            chunk.inputs.len(),
            ForwardOptions::eval(k),
            &mut unused,
        )?;
        out.nll_sum += nll_sum(&pass.logits, &chunk.targets)?;
        out.n_targets += chunk.targets.len();
        out.records.extend_shifted(pass.records, chunk.start);
    }
    Ok(out)
}
