//! Checkpoint directories and the tensor container inside them.
//!
//! A container is the 8-byte magic `SRACKPT1`, a little-endian `u32` header
//! length, a JSON header, then every tensor's elements back to back in
//! little-endian order. The header declares the element type and each
//! tensor's name, shape and byte offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sra_core::model::Model;
use sra_core::optim::AdamW;
use sra_core::tokenizer::Tokenizer;

use crate::config::{sha256_file, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::{fsutil, tokenizer_io};

pub const MAGIC: &[u8; 8] = b"SRACKPT1";
pub const MODEL_FILE: &str = "model.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENIZER_DIR: &str = "tokenizer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    tensors: Vec<TensorInfo>,
    meta: Value,
}

pub struct Tensor<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub fn write_container(
    path: &Path,
    dtype: Dtype,
    meta: Value,
    tensors: &[Tensor<'_>],
) -> Result<()> {
    let mut infos = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        infos.push(TensorInfo {
            name: t.name.clone(),
            shape: [t.shape.0, t.shape.1],
            offset,
        });
        offset += (t.data.len() * dtype.width()) as u64;
    }
    let header = serde_json::to_vec(&Header {
        dtype,
        tensors: infos,
        meta,
    })
    .at(path)?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        match dtype {
            Dtype::F64 => t
                .data
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Dtype::F32 => t
                .data
                .iter()
                .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
        }
    }
    fsutil::write(path, &out)
}

pub struct Container {
    pub dtype: Dtype,
    pub meta: Value,
    pub tensors: Vec<(TensorInfo, Vec<f64>)>,
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).at(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint container"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let data_start = 12 + hlen;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..data_start)
            .ok_or_else(|| bad("truncated header"))?,
    )
    .at(path)?;
    let data = &bytes[data_start..];
    let w = header.dtype.width();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n = info.shape[0] * info.shape[1];
        let start = info.offset as usize;
        let raw = data.get(start..start + n * w).ok_or_else(|| {
            bad(&format!(
                "tensor `{}` runs past the end of the file",
                info.name
            ))
        })?;
        let values = match header.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.push((info, values));
    }
    Ok(Container {
        dtype: header.dtype,
        meta: header.meta,
        tensors,
    })
}

/// Where a run stands, saved alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates applied.
    pub step: u64,
    pub epoch: u32,
    pub k_active: usize,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub initial_val_perplexity: Option<f64>,
    pub epoch_val_perplexity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub step: u64,
    pub epoch: u32,
    pub k_active: usize,
    pub dtype: Dtype,
    pub model_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    config: RunConfig,
    state: TrainState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub model: Model,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Writes `dir/{model.bin, optimizer.bin, manifest.json, tokenizer/}`.
    /// Optimizer moments are always stored as f64.
    pub fn save(&self, dir: &Path, dtype: Dtype, tokenizer_dir: &Path) -> Result<()> {
        Self::write(
            dir,
            &self.config,
            &self.state,
            &self.model,
            self.optimizer.as_ref(),
            dtype,
            tokenizer_dir,
        )
    }

    pub fn write(
        dir: &Path,
        config: &RunConfig,
        state: &TrainState,
        model: &Model,
        optimizer: Option<&AdamW>,
        dtype: Dtype,
        tokenizer_dir: &Path,
    ) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta {
            config: config.clone(),
            state: state.clone(),
        })
        .at(dir)?;
        let params = model.params();
        let tensors: Vec<Tensor<'_>> = params
            .iter()
            .map(|p| Tensor {
                name: p.name.clone(),
                shape: p.shape,
                data: p.data,
            })
            .collect();
        let model_path = dir.join(MODEL_FILE);
        write_container(&model_path, dtype, meta, &tensors)?;

        if let Some(opt) = optimizer {
            let meta = serde_json::to_value(OptimizerMeta {
                betas: opt.betas,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                step: opt.step,
            })
            .at(dir)?;
            let mut tensors = Vec::with_capacity(2 * params.len());
            for (prefix, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (p, data) in params.iter().zip(moments.iter()) {
                    tensors.push(Tensor {
                        name: format!("{prefix}.{}", p.name),
                        shape: p.shape,
                        data,
                    });
                }
            }
            write_container(&dir.join(OPTIMIZER_FILE), Dtype::F64, meta, &tensors)?;
        }

        tokenizer_io::copy(tokenizer_dir, &dir.join(TOKENIZER_DIR))?;
        fsutil::write_json(
            &dir.join(MANIFEST_FILE),
            &CheckpointManifest {
                config_hash: config.hash(),
                step: state.step,
                epoch: state.epoch,
                k_active: state.k_active,
                dtype,
                model_sha256: sha256_file(&model_path)?,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "checkpoint directory not found",
                ),
            });
        }
        let model_path = dir.join(MODEL_FILE);
        let c = read_container(&model_path)?;
        let meta: ModelMeta = serde_json::from_value(c.meta).at(&model_path)?;
        let mut model = Model::build(meta.config.model.clone(), 0)?;
        fill(
            &model_path,
            model
                .params_mut()
                .into_iter()
                .map(|p| (p.name, p.shape, p.data)),
            c.tensors,
        )?;

        let opt_path = dir.join(OPTIMIZER_FILE);
        let optimizer = if opt_path.exists() {
            let c = read_container(&opt_path)?;
            let om: OptimizerMeta = serde_json::from_value(c.meta).at(&opt_path)?;
            let params = model.params();
            let mut m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            let mut v = m.clone();
            let slots = params
                .iter()
                .zip(m.iter_mut())
                .map(|(p, d)| (format!("m.{}", p.name), p.shape, d.as_mut_slice()))
                .chain(
                    params
                        .iter()
                        .zip(v.iter_mut())
                        .map(|(p, d)| (format!("v.{}", p.name), p.shape, d.as_mut_slice())),
                );
            fill(&opt_path, slots, c.tensors)?;
            Some(AdamW {
                betas: om.betas,
                eps: om.eps,
                weight_decay: om.weight_decay,
                step: om.step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self {
            config: meta.config,
            state: meta.state,
            model,
            optimizer,
        })
    }

    pub fn tokenizer(dir: &Path) -> Result<Tokenizer> {
        tokenizer_io::load(&dir.join(TOKENIZER_DIR))
    }
}

fn fill<'a>(
    path: &Path,
    slots: impl Iterator<Item = (String, (usize, usize), &'a mut [f64])>,
    tensors: Vec<(TensorInfo, Vec<f64>)>,
) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, (TensorInfo, Vec<f64>)> =
        tensors.into_iter().map(|t| (t.0.name.clone(), t)).collect();
    for (name, shape, data) in slots {
        let (info, values) = by_name
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        if info.shape != [shape.0, shape.1] {
            return Err(Error::format(
                path,
                format!(
                    "tensor `{name}` has shape {:?}, the model expects {:?}",
                    info.shape, shape
                ),
            ));
        }
        data.copy_from_slice(&values);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}
