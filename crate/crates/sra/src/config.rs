//! Run configuration files and the `KEY=VAL` override grammar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use sra_core::model::{ModelConfig, Variant};
use sra_core::optim::TrainConfig;

use crate::error::{Error, IoContext, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Plain UTF-8 text.
    pub corpus: PathBuf,
    /// Directory holding `vocab.txt` and `merges.txt`. When absent a
    /// tokenizer of `model.vocab_size` is trained on the corpus.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const SECTIONS: [&str; 3] = ["model", "train", "data"];

impl RunConfig {
    /// Reads a config file; relative data paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = fsutil::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.corpus = rebase(base, &cfg.data.corpus);
        cfg.data.tokenizer = cfg.data.tokenizer.map(|t| rebase(base, &t));
        Ok(cfg)
    }

    /// Applies overrides in order, then re-validates the whole config.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Usage(format!("invalid override: {e}")))?;
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.model.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Usage(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| Error::Usage(e.to_string()))?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Usage(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if let Some(k) = self.train.top_k_only {
            if k > self.model.n_experts {
                return Err(Error::Usage(format!(
                    "top_k_only {k} exceeds n_experts {}",
                    self.model.n_experts
                )));
            }
        }
        Ok(())
    }

    /// Lowercase hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    std::fs::canonicalize(&joined).unwrap_or(joined)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// `KEY=VAL`. `KEY` is `section.field` or a bare field name that occurs in
/// exactly one section. `VAL` is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not of the form KEY=VAL")))?;
    let key = key.trim();
    let path: Vec<&str> = if key.contains('.') {
        key.split('.').collect()
    } else {
        let owners: Vec<&str> = SECTIONS
            .iter()
            .copied()
            .filter(|s| root.get(s).and_then(|v| v.get(key)).is_some())
            .collect();
        match owners.as_slice() {
            [one] => vec![one, key],
            [] => return Err(Error::Usage(format!("unknown config key `{key}`"))),
            many => {
                return Err(Error::Usage(format!(
                    "ambiguous config key `{key}`; qualify it as one of {}",
                    many.iter()
                        .map(|s| format!("{s}.{key}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                )))
            }
        }
    };
    let mut slot = &mut *root;
    for part in &path {
        slot = slot
            .get_mut(*part)
            .ok_or_else(|| Error::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
