use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cosine-anchor routing.
    Sra,
    /// Learned linear gate feeding the same top-k path.
    StandardMoe,
    /// Single FFN of width `2 · d_ff`.
    Dense,
}

impl Variant {
    pub fn is_moe(self) -> bool {
        !matches!(self, Variant::Dense)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sra => "sra",
            Variant::StandardMoe => "standard_moe",
            Variant::Dense => "dense",
        }
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sra" => Ok(Variant::Sra),
            "standard_moe" => Ok(Variant::StandardMoe),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorInit {
    Orthogonal,
    Kaiming,
}

pub const ROPE_BASE: f64 = 10_000.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub anchor_init: AnchorInit,
    /// Standard deviation of the Gaussian used for every weight matrix.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// Parameter totals for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: u64,
    pub active_per_token: u64,
}

impl ModelConfig {
    /// D=512, 4 layers, 8 heads, 128 experts per layer, top-2, D_ff=1024, V=32000.
    pub fn full_scale_sra() -> Self {
        Self {
            dim: 512,
            n_layers: 4,
            n_heads: 8,
            n_experts: 128,
            top_k: 2,
            d_ff: 1024,
            vocab_size: 32_000,
            max_seq_len: 256,
            dropout: 0.1,
            variant: Variant::Sra,
            anchor_init: AnchorInit::Orthogonal,
            init_std: default_init_std(),
        }
    }

    pub fn full_scale_standard_moe() -> Self {
        Self {
            variant: Variant::StandardMoe,
            ..Self::full_scale_sra()
        }
    }

    /// The dense FFN is `2 · d_ff = 2048` wide.
    pub fn full_scale_dense() -> Self {
        Self {
            variant: Variant::Dense,
            ..Self::full_scale_sra()
        }
    }

    /// Desk-scale configuration: D=64, 2 layers, 4 heads, 8 experts, V=2000.
    pub fn toy(variant: Variant) -> Self {
        Self {
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            n_experts: 8,
            top_k: 2,
            d_ff: 128,
            vocab_size: 2000,
            max_seq_len: 64,
            dropout: 0.1,
            variant,
            anchor_init: AnchorInit::Orthogonal,
            init_std: default_init_std(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Hidden width of the dense FFN, doubled relative to one expert.
    pub fn dense_hidden(&self) -> usize {
        2 * self.d_ff
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return bad(
                "dim, n_layers, n_heads, d_ff, vocab_size and max_seq_len must be positive",
            );
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return bad("dim must be divisible by n_heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head dimension must be even for rotary embeddings");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        if self.variant.is_moe() {
            if self.n_experts < 2 {
                return bad("mixture variants need at least 2 experts");
            }
            if self.top_k == 0 || self.top_k > self.n_experts {
                return bad("top_k must lie in [1, n_experts]");
            }
        }
        Ok(())
    }

    fn expert_params(&self, hidden: usize) -> u64 {
        let (d, f) = (self.dim as u64, hidden as u64);
        d * f + f + f * d + d
    }

    /// Totals derived from the configuration alone, without allocating.
    ///
    /// Active parameters count embeddings, attention, norms, the router and
    /// exactly `top_k` experts per routed layer.
    pub fn parameter_counts(&self) -> ParamCounts {
        let d = self.dim as u64;
        let embedding = self.vocab_size as u64 * d;
        let attention = 4 * d * d;
        let norms = 2 * 2 * d;
        let final_norm = 2 * d;
        let (layer_total, layer_active) = match self.variant {
            Variant::Dense => {
                let ffn = self.expert_params(self.dense_hidden());
                (attention + norms + ffn, attention + norms + ffn)
            }
            Variant::Sra | Variant::StandardMoe => {
                let router = self.n_experts as u64 * d;
                let expert = self.expert_params(self.d_ff);
                let shared = attention + norms + router;
                (
                    shared + self.n_experts as u64 * expert,
                    shared + self.top_k as u64 * expert,
                )
            }
        };
        let layers = self.n_layers as u64;
        ParamCounts {
            total: embedding + final_norm + layers * layer_total,
            active_per_token: embedding + final_norm + layers * layer_active,
        }
    }
}
