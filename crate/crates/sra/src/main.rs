use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sra::checkpoint::Dtype;
use sra::config::RunConfig;
use sra::reports::{self, AnalyzeOptions, Report};
use sra::runner::{self, Split, TrainOptions};
use sra::{fsutil, Error, Result};
use sra_core::gradcheck::{self, COMPONENTS};
use sra_core::model::Variant;

#[derive(Parser)]
#[command(
    name = "sra",
    version,
    about = "Train and analyze semantic-resonance mixture-of-experts language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer.
    Tokenize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics, checkpoints and a manifest.
    Train {
        /// JSON run configuration. Not needed with --resume.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "resume")]
        variant: Option<VariantArg>,
        /// KEY=VAL, KEY either `section.field` or an unambiguous field name.
        #[arg(long = "override", value_name = "KEY=VAL", conflicts_with = "resume")]
        overrides: Vec<String>,
        /// Run directory. Defaults to runs/<variant>-<config hash>, or the
        /// run that wrote the checkpoint when resuming.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have been applied in total.
        #[arg(long, value_name = "STEPS")]
        stop_after: Option<u64>,
        /// Element type of saved parameters.
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
    /// Validation perplexity and routing records of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reports over a records file written by `eval`.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        report: ReportArg,
        #[arg(long)]
        out: PathBuf,
        /// Routed layer for the specialization report.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Tokens listed per expert.
        #[arg(long, default_value_t = 10)]
        top_m: usize,
    },
    /// Per-token expert assignments for a piece of text.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        layer: usize,
        /// Also write the rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(COMPONENTS))]
        component: String,
        #[arg(long)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Sra,
    StandardMoe,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Train,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Utilization,
    Specialization,
    Dispersion,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F64,
    F32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Tokenize {
            corpus,
            vocab_size,
            out,
        } => {
            let (_, m) = sra::tokenize(&corpus, vocab_size, &out)?;
            println!(
                "vocab {} ({} bytes + <unk>, {} merges) written to {}",
                m.vocab_size,
                m.alphabet_size - 1,
                m.n_merges,
                out.display()
            );
        }
        Command::Train {
            config,
            variant,
            overrides,
            out,
            resume,
            stop_after,
            dtype,
        } => {
            let cfg = match (&resume, &config) {
                (Some(ck), _) => sra::checkpoint::Checkpoint::load(ck)?.config,
                (None, Some(path)) => {
                    let mut cfg = RunConfig::load(path)?;
                    if let Some(v) = variant {
                        cfg = cfg.with_variant(v.into());
                    }
                    cfg.with_overrides(&overrides)?
                }
                (None, None) => unreachable!("clap requires --config without --resume"),
            };
            cfg.validate()?;
            let out = match (out, &resume) {
                (Some(o), _) => o,
                (None, Some(ck)) => run_dir_of(ck)?,
                (None, None) => PathBuf::from("runs").join(format!(
                    "{}-{}",
                    cfg.model.variant.name(),
                    &cfg.hash()[..12]
                )),
            };
            let opts = TrainOptions {
                out,
                config_path: config,
                resume,
                stop_after,
                dtype: match dtype {
                    DtypeArg::F64 => Dtype::F64,
                    DtypeArg::F32 => Dtype::F32,
                },
            };
            let outcome = runner::train(cfg, &opts)?;
            let s = &outcome.summary;
            println!("run directory: {}", outcome.run_dir.display());
            if let Some(p) = s.initial_val_perplexity {
                println!("untrained val perplexity: {p:.3}");
            }
            for (i, p) in s.epoch_val_perplexity.iter().enumerate() {
                println!("epoch {} val perplexity: {p:.3}", i + 1);
            }
            if let Some(c) = &s.final_checkpoint {
                println!("final checkpoint: {}", c.display());
            }
        }
        Command::Eval {
            checkpoint,
            split,
            out,
        } => {
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Train => Split::Train,
            };
            let (report, records, _) = runner::evaluate(&checkpoint, split)?;
            let out = out.unwrap_or_else(|| checkpoint.clone());
            let name = split.name();
            fsutil::write_json(&out.join(format!("eval-{name}.json")), &report)?;
            records.save(&out.join(format!("records-{name}.json")))?;
            println!(
                "{name} perplexity {:.4} over {} tokens (k = {})",
                report.perplexity, report.n_tokens, report.k
            );
        }
        Command::Analyze {
            records,
            report,
            out,
            layer,
            top_m,
        } => {
            let report = match report {
                ReportArg::Utilization => Report::Utilization,
                ReportArg::Specialization => Report::Specialization,
                ReportArg::Dispersion => Report::Dispersion,
            };
            let (text, _) =
                reports::analyze(&records, report, &out, &AnalyzeOptions { layer, top_m })?;
            print!("{text}");
        }
        Command::Trace {
            checkpoint,
            text,
            layer,
            json,
        } => {
            let t = runner::trace(&checkpoint, &text, layer)?;
            print!("{}", reports::trace_table(&t.rows, t.k));
            if let Some(path) = json {
                fsutil::write_json(&path, &t.rows)?;
            }
        }
        Command::Gradcheck {
            component,
            tol,
            seed,
            json,
        } => {
            if tol.is_nan() || tol <= 0.0 {
                return Err(Error::Usage("--tol must be positive".into()));
            }
            let results = gradcheck::run(&component, tol, seed)?;
            let mut rows = Vec::new();
            for r in &results {
                for g in &r.groups {
                    rows.push(vec![
                        r.component.clone(),
                        g.name.clone(),
                        g.n_checked.to_string(),
                        format!("{:.3e}", g.max_rel_err),
                        if g.max_rel_err < tol { "pass" } else { "FAIL" }.into(),
                    ]);
                }
            }
            print!(
                "{}",
                reports::table(
                    &["Component", "Group", "Checked", "Max rel err", "Result"],
                    &rows
                )
            );
            let passed = results.iter().all(|r| r.passed);
            println!("{} (tol {tol:e})", if passed { "PASS" } else { "FAIL" });
            if let Some(path) = json {
                fsutil::write_json(&path, &results)?;
            }
            if !passed {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sra => Variant::Sra,
            VariantArg::StandardMoe => Variant::StandardMoe,
            VariantArg::Dense => Variant::Dense,
        }
    }
}

/// `<run>/checkpoints/<name>` → `<run>`.
fn run_dir_of(checkpoint: &Path) -> Result<PathBuf> {
    checkpoint
        .parent()
        .filter(|p| p.file_name().is_some_and(|n| n == runner::CHECKPOINT_DIR))
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| {
            Error::Usage(format!(
                "cannot infer the run directory of {}; pass --out",
                checkpoint.display()
            ))
        })
}
