//! Training, evaluation and tracing over files on disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sra_core::analysis::{routing_trace, TraceRow};
use sra_core::batch::{make_batches, split_validation, BatchStream};
use sra_core::model::{ForwardOptions, Model};
use sra_core::objective::{evaluate_stream, loss_and_grads, Batch, StreamEval};
use sra_core::optim::{clip_global_norm, lr_at, progressive_k, AdamW};
use sra_core::rng;
use sra_core::tokenizer::Tokenizer;

use crate::checkpoint::{Checkpoint, Dtype, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::metrics::{MetricsLog, MetricsRow, METRICS_FILE};
use crate::records::RecordsFile;
use crate::{fsutil, tokenizer_io};

pub const TOKENIZER_DIR: &str = "tokenizer";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Batch order of `epoch` is shuffled with this seed.
pub fn epoch_order_seed(seed: u64, epoch: u32) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Dropout and routing noise for the step taking the model from `step`
/// to `step + 1` updates. Stream 0 is model initialization.
pub fn step_rng(seed: u64, step: u64) -> rng::SeededRng {
    rng::stream(seed, step + 1)
}

pub fn epoch_checkpoint_name(epoch: u32) -> String {
    format!("epoch-{epoch:03}")
}

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:07}")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Recorded in the run manifest.
    pub config_path: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop once this many updates have been applied in total.
    pub stop_after: Option<u64>,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub resumed_from: Option<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub variant: String,
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub initial_val_perplexity: Option<f64>,
    pub epoch_val_perplexity: Vec<f64>,
    pub final_val_perplexity: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// A tokenized corpus.
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub ids: Vec<u32>,
}

impl Corpus {
    pub fn split(&self) -> Result<(&[u32], &[u32])> {
        Ok(split_validation(&self.ids)?)
    }
}

fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read(path).at(path)?;
    if text.is_empty() {
        return Err(Error::format(path, "corpus is empty"));
    }
    Ok(text)
}

fn check_vocab(tok: &Tokenizer, cfg: &RunConfig) -> Result<()> {
    if tok.vocab_size() != cfg.model.vocab_size {
        return Err(Error::Mismatch(format!(
            "tokenizer has {} tokens but the model expects vocab_size {}",
            tok.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

/// Loads the tokenizer from `source`, or trains one on the corpus, and
/// leaves a copy in `save_to`.
fn prepare_corpus(cfg: &RunConfig, source: Option<&Path>, save_to: &Path) -> Result<Corpus> {
    let text = read_corpus(&cfg.data.corpus)?;
    let tokenizer = match source {
        Some(dir) => {
            let tok = tokenizer_io::load(dir)?;
            if fs::canonicalize(dir).ok() != fs::canonicalize(save_to).ok() {
                tokenizer_io::copy(dir, save_to)?;
            }
            tok
        }
        None => {
            let t0 = Instant::now();
            let tok = Tokenizer::train(&text, cfg.model.vocab_size)?;
            info!(
                "trained tokenizer: {} tokens in {:.1?}",
                tok.vocab_size(),
                t0.elapsed()
            );
            tokenizer_io::save(&tok, save_to)?;
            tok
        }
    };
    check_vocab(&tokenizer, cfg)?;
    let ids = tokenizer.encode(&text);
    Ok(Corpus { tokenizer, ids })
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub summary: TrainSummary,
}

/// Runs (or resumes) training and writes metrics, checkpoints, a summary and
/// a manifest under `opts.out`.
pub fn train(cfg: RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let started = fsutil::unix_now();
    let resumed = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.config != cfg {
                return Err(Error::Usage(
                    "the resumed run must use the checkpoint's configuration unchanged".into(),
                ));
            }
            Some(ck)
        }
        None => None,
    };
    cfg.validate()?;
    let out = &opts.out;
    fs::create_dir_all(out).at(out)?;
    let tok_dir = out.join(TOKENIZER_DIR);
    let tok_source = match &opts.resume {
        Some(dir) => Some(dir.join(crate::checkpoint::TOKENIZER_DIR)),
        None => cfg.data.tokenizer.clone(),
    };
    let corpus = prepare_corpus(&cfg, tok_source.as_deref(), &tok_dir)?;
    let (train_ids, val_ids) = corpus.split()?;

    let tc = &cfg.train;
    let (b, l) = (tc.batch_size, tc.seq_len);
    let steps_per_epoch = make_batches(train_ids, b, l, None)?.len() as u64;
    let planned = steps_per_epoch * tc.epochs as u64;
    let total_steps = tc.total_steps.unwrap_or(planned);
    let run_steps = total_steps.min(planned);
    let eval_every = (steps_per_epoch / 4).max(100);
    let weights = tc.loss_weights();
    info!(
        "{} train / {} val tokens, {steps_per_epoch} steps per epoch, {run_steps} steps",
        train_ids.len(),
        val_ids.len()
    );

    let (mut model, mut opt, mut state) = match resumed {
        Some(ck) => {
            let opt = ck.optimizer.ok_or_else(|| {
                Error::Usage("checkpoint has no optimizer state to resume from".into())
            })?;
            (ck.model, opt, ck.state)
        }
        None => {
            let model = Model::build(cfg.model.clone(), tc.seed)?;
            let opt = AdamW::new(&model, tc);
            let k0 = progressive_k(1, tc);
            let initial = evaluate_stream(&model, val_ids, l, k0)?.perplexity();
            info!("untrained validation perplexity {initial:.2}");
            let state = TrainState {
                step: 0,
                epoch: 1,
                k_active: k0,
                steps_per_epoch,
                total_steps,
                initial_val_perplexity: Some(initial),
                epoch_val_perplexity: Vec::new(),
            };
            (model, opt, state)
        }
    };

    let mut metrics = MetricsLog::open(&out.join(METRICS_FILE), state.step)?;
    let ckpt_root = out.join(CHECKPOINT_DIR);
    let mut last_saved: Option<(u64, PathBuf)> = None;
    let mut last_ppl = None;
    let mut stream: Option<(u32, BatchStream<'_>)> = None;
    let t0 = Instant::now();

    while state.step < run_steps {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            break;
        }
        let s = state.step;
        let epoch = (s / steps_per_epoch) as u32 + 1;
        let k = progressive_k(epoch, tc);
        if stream.as_ref().map(|x| x.0) != Some(epoch) {
            stream = Some((
                epoch,
                make_batches(train_ids, b, l, Some(epoch_order_seed(tc.seed, epoch)))?,
            ));
        }
        let plan = stream
            .as_ref()
            .and_then(|(_, st)| st.get((s % steps_per_epoch) as usize))
            .expect("step within epoch");
        let batch = Batch {
            inputs: &plan.inputs,
            targets: &plan.targets,
            lanes: b,
            seq_len: l,
        };
        let mut rng = step_rng(tc.seed, s);
        let step_out = loss_and_grads(
            &model,
            batch,
            ForwardOptions::train(k, tc.noise_sigma),
            weights,
            &mut rng,
        )
        .map_err(|source| Error::Training {
            step: s + 1,
            source,
        })?;
        step_out
            .breakdown
            .check_finite()
            .map_err(|source| Error::Training {
                step: s + 1,
                source,
            })?;
        let mut grads = step_out.grads;
        if let Some(c) = tc.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_at(s + 1, tc, total_steps);
        opt.update(model.params_mut(), grads.params(), lr)?;

        state.step = s + 1;
        state.epoch = epoch;
        state.k_active = k;
        let epoch_end = state.step % steps_per_epoch == 0;
        let val_perplexity = if state.step % eval_every == 0 || epoch_end || state.step == run_steps
        {
            let ppl = evaluate_stream(&model, val_ids, l, k)?.perplexity();
            last_ppl = Some(ppl);
            Some(ppl)
        } else {
            None
        };
        let bd = step_out.breakdown;
        metrics.append(&MetricsRow {
            step: state.step,
            epoch,
            k_active: k,
            lm_loss: bd.lm,
            balance: bd.balance,
            dispersion: bd.dispersion,
            z: bd.z,
            total: bd.total,
            learning_rate: lr,
            val_perplexity,
        })?;
        if state.step % 50 == 0 || val_perplexity.is_some() {
            info!(
                "step {}/{run_steps} epoch {epoch} k={k} lm {:.4} lr {lr:.2e}{} ({:.0?})",
                state.step,
                bd.lm,
                val_perplexity.map_or(String::new(), |p| format!(" val ppl {p:.2}")),
                t0.elapsed()
            );
        }
        if epoch_end {
            state
                .epoch_val_perplexity
                .push(val_perplexity.expect("evaluated at epoch end"));
            let dir = ckpt_root.join(epoch_checkpoint_name(epoch));
            save(&cfg, &state, &model, &opt, &dir, opts.dtype, &tok_dir)?;
            last_saved = Some((state.step, dir));
        }
    }

    if last_saved.as_ref().map(|x| x.0) != Some(state.step) && state.step > 0 {
        let dir = ckpt_root.join(step_checkpoint_name(state.step));
        save(&cfg, &state, &model, &opt, &dir, opts.dtype, &tok_dir)?;
        last_saved = Some((state.step, dir));
    }
    if state.step < run_steps {
        warn!("stopped after {} of {run_steps} steps", state.step);
    }

    let summary = TrainSummary {
        config_hash: cfg.hash(),
        variant: cfg.model.variant.name().to_string(),
        steps: state.step,
        steps_per_epoch,
        total_steps,
        train_tokens: train_ids.len(),
        val_tokens: val_ids.len(),
        initial_val_perplexity: state.initial_val_perplexity,
        epoch_val_perplexity: state.epoch_val_perplexity.clone(),
        final_val_perplexity: last_ppl,
        final_checkpoint: last_saved.map(|x| x.1),
    };
    fsutil::write_json(&out.join(SUMMARY_FILE), &summary)?;
    fsutil::write_json(
        &out.join(RUN_MANIFEST_FILE),
        &RunManifest {
            command: "train".into(),
            config_path: opts.config_path.clone(),
            config_hash: cfg.hash(),
            out_dir: out.clone(),
            seed: tc.seed,
            resumed_from: opts.resume.clone(),
            started_unix: started,
            finished_unix: fsutil::unix_now(),
        },
    )?;
    Ok(TrainOutcome {
        run_dir: out.clone(),
        summary,
    })
}

fn save(
    cfg: &RunConfig,
    state: &TrainState,
    model: &Model,
    opt: &AdamW,
    dir: &Path,
    dtype: Dtype,
    tok_dir: &Path,
) -> Result<()> {
    Checkpoint::write(dir, cfg, state, model, Some(opt), dtype, tok_dir)?;
    info!("saved checkpoint {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub step: u64,
    pub k: usize,
    pub n_tokens: usize,
    pub n_targets: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Eval-mode perplexity and routing of a checkpoint on one corpus split,
/// routed with the checkpoint's active k.
pub fn evaluate(checkpoint: &Path, split: Split) -> Result<(EvalReport, RecordsFile, StreamEval)> {
    let ck = Checkpoint::load(checkpoint)?;
    let tok_dir = checkpoint.join(crate::checkpoint::TOKENIZER_DIR);
    let tokenizer = tokenizer_io::load(&tok_dir)?;
    check_vocab(&tokenizer, &ck.config)?;
    let text = read_corpus(&ck.config.data.corpus)?;
    let ids = tokenizer.encode(&text);
    let (train_ids, val_ids) = split_validation(&ids)?;
    let ids = match split {
        Split::Train => train_ids,
        Split::Val => val_ids,
    };
    let k = ck.state.k_active;
    let ev = evaluate_stream(&ck.model, ids, ck.config.train.seq_len, k)?;
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        split,
        step: ck.state.step,
        k,
        n_tokens: ids.len(),
        n_targets: ev.n_targets,
        mean_nll: ev.mean_nll(),
        perplexity: ev.perplexity(),
    };
    let records = RecordsFile {
        variant: ck.config.model.variant,
        n_experts: ck.config.model.n_experts,
        k,
        n_tokens: ev.records.routed_tokens(),
        layers: ev.records.layers.clone(),
        anchors: RecordsFile::anchors_of(&ck.model),
        tokenizer: Some(fs::canonicalize(&tok_dir).unwrap_or(tok_dir)),
    };
    Ok((report, records, ev))
}

pub struct Trace {
    pub k: usize,
    pub layer: usize,
    pub rows: Vec<TraceRow>,
}

pub fn trace(checkpoint: &Path, text: &str, layer: usize) -> Result<Trace> {
    let ck = Checkpoint::load(checkpoint)?;
    let tokenizer = Checkpoint::tokenizer(checkpoint)?;
    check_vocab(&tokenizer, &ck.config)?;
    let k = ck.state.k_active;
    let rows = routing_trace(
        &ck.model,
        &tokenizer,
        text,
        layer,
        ck.config.train.seq_len,
        k,
    )?;
    Ok(Trace { k, layer, rows })
}
