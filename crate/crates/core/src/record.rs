use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One routed token: where it sat, what it was, and where it went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<u32>,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub entries: Vec<RouteEntry>,
}

impl LayerRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Token-to-expert assignment log for every routed layer of a model.
///
/// Dense models produce a record with no layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub n_experts: usize,
    pub layers: Vec<LayerRecord>,
}

impl RoutingRecord {
    pub fn new(n_experts: usize, n_layers: usize) -> Self {
        Self {
            n_experts,
            layers: (0..n_layers).map(|_| LayerRecord::default()).collect(),
        }
    }

    /// Appends `other`'s entries layer by layer, shifting positions by `offset`.
    pub fn extend_shifted(&mut self, other: RoutingRecord, offset: usize) {
        if self.layers.is_empty() {
            self.n_experts = other.n_experts;
            self.layers = (0..other.layers.len())
                .map(|_| LayerRecord::default())
                .collect();
        }
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            mine.entries.extend(theirs.entries.into_iter().map(|mut e| {
                e.position += offset;
                e
            }));
        }
    }

    pub fn routed_tokens(&self) -> usize {
        self.layers.first().map_or(0, LayerRecord::len)
    }
}
