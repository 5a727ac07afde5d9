#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sra::config::{DataConfig, RunConfig};
use sra_core::model::{ModelConfig, Variant};
use sra_core::optim::TrainConfig;

const WORDS: [&str; 24] = [
    "the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "to", "house", "of", "it", "was",
    "in", "garden", "with", "red", "green", "tree", "bird", "sang", "morning", "light",
];

/// Deterministic pseudo-English of roughly `chars` bytes.
pub fn corpus_text(chars: usize) -> String {
    let mut x: u64 = 0x2545_F491_4F6C_DD1D;
    let mut out = String::new();
    while out.len() < chars {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        out.push_str(WORDS[(x % WORDS.len() as u64) as usize]);
        out.push(if x.is_multiple_of(11) { '\n' } else { ' ' });
    }
    out
}

pub fn write_corpus(dir: &Path, chars: usize) -> PathBuf {
    let path = dir.join("corpus.txt");
    std::fs::write(&path, corpus_text(chars)).unwrap();
    path
}

pub fn tiny_config(corpus: &Path, variant: Variant) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 16,
            vocab_size: 80,
            max_seq_len: 16,
            dropout: 0.1,
            variant,
            anchor_init: sra_core::model::AnchorInit::Orthogonal,
            init_std: 0.02,
        },
        train: TrainConfig {
            lr_peak: 3e-3,
            warmup_steps: 5,
            switch_epoch: 2,
            epochs: 2,
            batch_size: 4,
            seq_len: 16,
            seed: 3,
            noise_sigma: 0.01,
            ..TrainConfig::default()
        },
        data: DataConfig {
            corpus: corpus.to_path_buf(),
            tokenizer: None,
        },
    }
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    sra::fsutil::write_json(&path, cfg).unwrap();
    path
}
