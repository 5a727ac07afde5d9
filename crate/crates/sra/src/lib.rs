//! File formats, training runs and reports for [`sra_core`] models.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod records;
pub mod reports;
pub mod runner;
pub mod tokenizer_io;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sra_core::tokenizer::{alphabet_size, Tokenizer};

pub use error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerManifest {
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub requested_vocab_size: usize,
    pub vocab_size: usize,
    pub alphabet_size: usize,
    pub n_merges: usize,
    pub created_unix: u64,
}

pub const TOKENIZER_MANIFEST_FILE: &str = "manifest.json";

/// Trains a tokenizer on `corpus` and writes its files and a manifest to `out`.
pub fn tokenize(
    corpus: &Path,
    vocab_size: usize,
    out: &Path,
) -> Result<(Tokenizer, TokenizerManifest)> {
    let text = std::fs::read(corpus).map_err(|source| Error::Io {
        path: corpus.to_path_buf(),
        source,
    })?;
    let alphabet = alphabet_size(&text);
    if vocab_size <= alphabet {
        return Err(Error::Usage(format!(
            "vocab size {vocab_size} must exceed the corpus alphabet of {alphabet} (distinct bytes plus <unk>)"
        )));
    }
    let tok = Tokenizer::train(&text, vocab_size)?;
    tokenizer_io::save(&tok, out)?;
    let manifest = TokenizerManifest {
        corpus: std::fs::canonicalize(corpus).unwrap_or_else(|_| corpus.to_path_buf()),
        corpus_sha256: config::sha256_file(corpus)?,
        requested_vocab_size: vocab_size,
        vocab_size: tok.vocab_size(),
        alphabet_size: alphabet,
        n_merges: tok.merges().len(),
        created_unix: fsutil::unix_now(),
    };
    fsutil::write_json(&out.join(TOKENIZER_MANIFEST_FILE), &manifest)?;
    Ok((tok, manifest))
}
