//! Routing records as written by `eval` and read by `analyze`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sra_core::model::{Model, Variant};
use sra_core::record::LayerRecord;

use crate::error::Result;
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordsFile {
    pub variant: Variant,
    pub n_experts: usize,
    /// Experts per token when the records were taken.
    pub k: usize,
    /// Tokens routed per layer.
    pub n_tokens: usize,
    /// One per routed layer, in model order.
    pub layers: Vec<LayerRecord>,
    /// Anchor matrices (N rows of length D) of every resonance layer.
    pub anchors: Vec<Vec<Vec<f64>>>,
    /// Tokenizer used to produce the token ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
}

impl RecordsFile {
    pub fn anchors_of(model: &Model) -> Vec<Vec<Vec<f64>>> {
        model
            .anchor_sets()
            .iter()
            .map(|a| (0..a.n_experts()).map(|i| a.anchor(i).to_vec()).collect())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json_compact(path, self)
    }
}
