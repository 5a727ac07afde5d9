//! Utilization, specialization, anchor geometry and routing traces.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cosine, Matrix};
use crate::model::{FeedForward, Model};
use crate::objective::evaluate_stream;
use crate::record::{LayerRecord, RoutingRecord};
use crate::router::COSINE_EPS;
use crate::tokenizer::Tokenizer;

pub const HISTOGRAM_BUCKETS: usize = 20;

/// Slot counts of one layer: a token routed to k experts counts k times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub layer: usize,
    pub tokens: usize,
    pub counts: Vec<u64>,
    /// Population std of `counts` over their mean.
    pub cv: f64,
    pub dead: usize,
    pub dead_ids: Vec<usize>,
}

pub fn layer_utilization(
    layer: usize,
    record: &LayerRecord,
    n_experts: usize,
) -> Result<LayerUtilization> {
    if record.is_empty() {
        return Err(Error::EmptyLayer { layer });
    }
    let mut counts = vec![0u64; n_experts];
    for e in &record.entries {
        for &x in &e.experts {
            *counts.get_mut(x).ok_or_else(|| {
                invalid(format!(
                    "layer {layer}: expert {x} out of range for N = {n_experts}"
                ))
            })? += 1;
        }
    }
    let n = n_experts as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean) * (c as f64 - mean))
        .sum::<f64>()
        / n;
    let dead_ids: Vec<usize> = (0..n_experts).filter(|&i| counts[i] == 0).collect();
    Ok(LayerUtilization {
        layer,
        tokens: record.len(),
        cv: libm::sqrt(var) / mean,
        dead: dead_ids.len(),
        dead_ids,
        counts,
    })
}

pub fn utilization(records: &RoutingRecord, n_experts: usize) -> Result<Vec<LayerUtilization>> {
    records
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_utilization(i, l, n_experts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub id: u32,
    pub count: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTokens {
    pub expert: usize,
    pub tokens: Vec<RankedToken>,
}

/// For each expert, the `top_m` token ids it received most often (ties to
/// the smaller id). Entries without a token id are skipped.
pub fn specialization_table(
    record: &LayerRecord,
    n_experts: usize,
    tok: Option<&Tokenizer>,
    top_m: usize,
) -> Result<Vec<ExpertTokens>> {
    if top_m == 0 {
        return Err(invalid("top_m must be at least 1"));
    }
    let mut per_expert: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); n_experts];
    for e in &record.entries {
        let Some(id) = e.token else { continue };
        for &x in &e.experts {
            let slot = per_expert
                .get_mut(x)
                .ok_or_else(|| invalid(format!("expert {x} out of range for N = {n_experts}")))?;
            *slot.entry(id).or_insert(0) += 1;
        }
    }
    Ok(per_expert
        .into_iter()
        .enumerate()
        .map(|(expert, counts)| {
            let mut ranked: Vec<(u32, u64)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(top_m);
            ExpertTokens {
                expert,
                tokens: ranked
                    .into_iter()
                    .map(|(id, count)| RankedToken {
                        id,
                        count,
                        text: tok.map_or_else(|| format!("{id}"), |t| t.display(id)),
                    })
                    .collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub n_pairs: usize,
    pub mean: f64,
    pub std: f64,
    /// Counts over [−1, 1] in equal buckets; the top edge falls in the last.
    pub histogram: Vec<u64>,
}

impl DispersionStats {
    /// Lower edge of bucket `i`.
    pub fn bucket_start(i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / HISTOGRAM_BUCKETS as f64
    }
}

/// Mean and population std of the unordered pairwise anchor cosines.
pub fn anchor_dispersion_stats(anchors: &Matrix) -> Result<DispersionStats> {
    let n = anchors.rows();
    if n < 2 {
        return Err(invalid(format!(
            "dispersion statistics need at least 2 anchors, got {n}"
        )));
    }
    let mut sims = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            sims.push(cosine(anchors.row(i), anchors.row(j), COSINE_EPS));
        }
    }
    let m = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / m;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / m;
    let mut histogram = vec![0u64; HISTOGRAM_BUCKETS];
    for s in &sims {
        let b = ((s + 1.0) / 2.0 * HISTOGRAM_BUCKETS as f64) as isize;
        histogram[b.clamp(0, HISTOGRAM_BUCKETS as isize - 1) as usize] += 1;
    }
    Ok(DispersionStats {
        n_pairs: sims.len(),
        mean,
        std: libm::sqrt(var),
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub position: usize,
    pub id: u32,
    pub token: String,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Eval-mode routing of `text` at `layer` (an index among all layers).
pub fn routing_trace(
    model: &Model,
    tok: &Tokenizer,
    text: &str,
    layer: usize,
    seq_len: usize,
    k: usize,
) -> Result<Vec<TraceRow>> {
    let n_layers = model.blocks.len();
    if layer >= n_layers {
        return Err(invalid(format!(
            "layer {layer} out of range; the model has {n_layers} layers"
        )));
    }
    if matches!(model.blocks[layer].ffn, FeedForward::Dense(_)) {
        return Err(invalid("the dense variant has no router to trace"));
    }
    let moe_index = model.blocks[..layer]
        .iter()
        .filter(|b| matches!(b.ffn, FeedForward::Moe { .. }))
        .count();
    let ids = tok.encode(text.as_bytes());
    if ids.is_empty() {
        return Err(invalid("trace text encodes to no tokens"));
    }
    let mut eval = evaluate_stream(model, &ids, seq_len, k)?;
    let record = core::mem::take(&mut eval.records.layers[moe_index]);
    Ok(record
        .entries
        .into_iter()
        .map(|e| {
            let id = e.token.expect("model records carry token ids");
            TraceRow {
                position: e.position,
                id,
                token: tok.display(id),
                experts: e.experts,
                weights: e.weights,
            }
        })
        .collect())
}
