//! Contiguous-lane batching and the train/validation split.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Fraction of the token stream held out for validation, taken from the end.
pub const VALIDATION_FRACTION: f64 = 0.05;

/// One batch: `batch_size` lanes of `seq_len` inputs, targets shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major B×L.
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl BatchPlan {
    pub fn lane(&self, b: usize) -> (&[u32], &[u32]) {
        let r = b * self.seq_len..(b + 1) * self.seq_len;
        (&self.inputs[r.clone()], &self.targets[r])
    }
}

/// The stream cut into `batch_size` contiguous lanes; batch `j` reads
/// positions `j·L .. j·L + L` of every lane.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    ids: &'a [u32],
    batch_size: usize,
    seq_len: usize,
    lane_len: usize,
    order: Vec<usize>,
}

/// Lanes are `ids` split into `batch_size` equal runs (remainder dropped);
/// the final partial chunk of each lane is dropped. `seed = None` keeps
/// batches in stream order, otherwise their order is shuffled.
pub fn make_batches(
    ids: &[u32],
    batch_size: usize,
    seq_len: usize,
    seed: Option<u64>,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(invalid("batch size and sequence length must be positive"));
    }
    let needed = batch_size * (seq_len + 1);
    if ids.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            available: ids.len(),
        });
    }
    let lane_len = ids.len() / batch_size;
    let n_batches = (lane_len - 1) / seq_len;
    let mut order: Vec<usize> = (0..n_batches).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut rng::seeded(seed));
    }
    Ok(BatchStream {
        ids,
        batch_size,
        seq_len,
        lane_len,
        order,
    })
}

impl BatchStream<'_> {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `i`-th batch in stream order (after any shuffling).
    pub fn get(&self, i: usize) -> Option<BatchPlan> {
        let j = *self.order.get(i)?;
        let (b, l) = (self.batch_size, self.seq_len);
        let mut inputs = Vec::with_capacity(b * l);
        let mut targets = Vec::with_capacity(b * l);
        for lane in 0..b {
            let start = lane * self.lane_len + j * l;
            inputs.extend_from_slice(&self.ids[start..start + l]);
            targets.extend_from_slice(&self.ids[start + 1..start + l + 1]);
        }
        Some(BatchPlan {
            batch_size: b,
            seq_len: l,
            inputs,
            targets,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = BatchPlan> + '_ {
        (0..self.len()).map(|i| self.get(i).expect("index in range"))
    }
}

/// Splits off the final [`VALIDATION_FRACTION`] of the stream.
pub fn split_validation(ids: &[u32]) -> Result<(&[u32], &[u32])> {
    let n_val = (ids.len() as f64 * VALIDATION_FRACTION) as usize;
    if n_val < 2 {
        return Err(Error::InsufficientData {
            needed: (2.0 / VALIDATION_FRACTION) as usize,
            available: ids.len(),
        });
    }
    Ok(ids.split_at(ids.len() - n_val))
}

/// Consecutive windows of at most `seq_len` inputs covering every token of
/// `ids` once; the last window has one target fewer than inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalChunk {
    pub start: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

pub fn eval_chunks(ids: &[u32], seq_len: usize) -> Result<Vec<EvalChunk>> {
    if seq_len == 0 {
        return Err(invalid("sequence length must be positive"));
    }
    Ok((0..ids.len())
        .step_by(seq_len)
        .map(|start| {
            let end = (start + seq_len).min(ids.len());
            EvalChunk {
                start,
                inputs: ids[start..end].to_vec(),
                targets: ids[start + 1..(end + 1).min(ids.len())].to_vec(),
            }
        })
        .collect())
}
