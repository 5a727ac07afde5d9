mod common;

use std::fs;

use sra::checkpoint::{Checkpoint, Dtype};
use sra::metrics;
use sra::runner::{self, Split, TrainOptions};
use sra_core::model::Variant;

fn text(dir: &std::path::Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn opts(out: &std::path::Path) -> TrainOptions {
    TrainOptions {
        out: out.to_path_buf(),
        ..TrainOptions::default()
    }
}

#[test]
fn progressive_schedule_in_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 20_000), Variant::Sra);
    let run = runner::train(cfg, &opts(&dir.path().join("run"))).unwrap();
    let rows = metrics::read(&run.run_dir.join(metrics::METRICS_FILE)).unwrap();
    let spe = run.summary.steps_per_epoch;
    assert_eq!(rows.len() as u64, 2 * spe);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert_eq!(r.k_active, if r.epoch < 2 { 1 } else { 2 });
        assert!(r.total.is_finite());
    }
    assert_eq!(run.summary.epoch_val_perplexity.len(), 2);
    let untrained = run.summary.initial_val_perplexity.unwrap();
    assert!(
        (untrained / 80.0 - 1.0).abs() < 0.2,
        "untrained perplexity {untrained}"
    );
    assert!(run.run_dir.join("checkpoints/epoch-001/model.bin").exists());
    assert!(run
        .run_dir
        .join("checkpoints/epoch-002/manifest.json")
        .exists());
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(
        &common::write_corpus(dir.path(), 12_000),
        Variant::StandardMoe,
    );
    let a = runner::train(cfg.clone(), &opts(&dir.path().join("a"))).unwrap();
    let b = runner::train(cfg, &opts(&dir.path().join("b"))).unwrap();
    let read = |r: &runner::TrainOutcome, f: &str| fs::read(r.run_dir.join(f)).unwrap();
    assert_eq!(
        text(&a.run_dir, "metrics.jsonl"),
        text(&b.run_dir, "metrics.jsonl")
    );
    assert!(
        read(&a, "checkpoints/epoch-002/model.bin") == read(&b, "checkpoints/epoch-002/model.bin")
    );
}

#[test]
fn resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let full = runner::train(cfg.clone(), &opts(&dir.path().join("full"))).unwrap();
    let total = full.summary.steps;
    let cut = full.summary.steps_per_epoch + 3;

    let split_dir = dir.path().join("split");
    let first = runner::train(
        cfg.clone(),
        &TrainOptions {
            stop_after: Some(cut),
            ..opts(&split_dir)
        },
    )
    .unwrap();
    assert_eq!(first.summary.steps, cut);
    let ckpt = split_dir
        .join("checkpoints")
        .join(runner::step_checkpoint_name(cut));
    let second = runner::train(
        cfg,
        &TrainOptions {
            resume: Some(ckpt),
            ..opts(&split_dir)
        },
    )
    .unwrap();
    assert_eq!(second.summary.steps, total);
    assert_eq!(
        second.summary,
        TrainSummaryView::strip(full.summary.clone(), &split_dir, &full.run_dir)
    );
    let f = |d: &std::path::Path, name: &str| fs::read(d.join(name)).unwrap();
    assert_eq!(
        text(&split_dir, "metrics.jsonl"),
        text(&full.run_dir, "metrics.jsonl")
    );
    for name in ["model.bin", "optimizer.bin"] {
        let name = format!("checkpoints/epoch-002/{name}");
        assert!(
            f(&split_dir, &name) == f(&full.run_dir, &name),
            "{name} differs"
        );
    }
}

/// The summaries differ only in where the final checkpoint lives.
struct TrainSummaryView;

impl TrainSummaryView {
    fn strip(
        mut s: runner::TrainSummary,
        to: &std::path::Path,
        from: &std::path::Path,
    ) -> runner::TrainSummary {
        s.final_checkpoint = s
            .final_checkpoint
            .map(|p| to.join(p.strip_prefix(from).unwrap()));
        s
    }
}

#[test]
fn evaluate_is_repeatable_and_covers_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let run = runner::train(cfg, &opts(&dir.path().join("run"))).unwrap();
    let ck = run.summary.final_checkpoint.unwrap();
    let (a, rec, _) = runner::evaluate(&ck, Split::Val).unwrap();
    let (b, _, _) = runner::evaluate(&ck, Split::Val).unwrap();
    assert_eq!(a.perplexity.to_bits(), b.perplexity.to_bits());
    assert_eq!(a.perplexity, run.summary.final_val_perplexity.unwrap());
    assert_eq!(a.n_tokens, run.summary.val_tokens);
    assert_eq!(rec.n_tokens, a.n_tokens);
    assert_eq!(a.n_targets, a.n_tokens - 1);
    assert!(a.perplexity < run.summary.initial_val_perplexity.unwrap());
    for layer in &rec.layers {
        assert_eq!(layer.entries.len(), a.n_tokens);
        for (i, e) in layer.entries.iter().enumerate() {
            assert_eq!(e.position, i);
            assert_eq!(e.experts.len(), 2);
        }
    }
}

#[test]
fn dense_runs_have_no_routing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Dense);
    let run = runner::train(cfg, &opts(&dir.path().join("run"))).unwrap();
    let (_, rec, _) =
        runner::evaluate(run.summary.final_checkpoint.as_ref().unwrap(), Split::Val).unwrap();
    assert!(rec.layers.is_empty() && rec.anchors.is_empty());
    let rows = metrics::read(&run.run_dir.join(metrics::METRICS_FILE)).unwrap();
    assert!(rows.iter().all(|r| r.balance == 0.0 && r.dispersion == 0.0));
}

#[test]
fn trace_matches_evaluated_routing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let run = runner::train(cfg, &opts(&dir.path().join("run"))).unwrap();
    let ck_dir = run.summary.final_checkpoint.unwrap();
    let ck = Checkpoint::load(&ck_dir).unwrap();
    let tok = Checkpoint::tokenizer(&ck_dir).unwrap();
    let text = "the red bird sang in the garden with the dog and the cat sat on a mat";
    let ids = tok.encode(text.as_bytes());
    let ev = sra_core::objective::evaluate_stream(
        &ck.model,
        &ids,
        ck.config.train.seq_len,
        ck.state.k_active,
    )
    .unwrap();
    for layer in 0..2 {
        let t = runner::trace(&ck_dir, text, layer).unwrap();
        assert_eq!(t.rows.len(), ids.len());
        for (row, e) in t.rows.iter().zip(&ev.records.layers[layer].entries) {
            assert_eq!(row.experts, e.experts);
            assert_eq!(row.weights, e.weights);
            assert!((row.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(runner::trace(&ck_dir, text, 2).is_err());
}

#[test]
fn resume_refuses_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let e = runner::train(
        cfg,
        &TrainOptions {
            resume: Some(dir.path().join("nope")),
            dtype: Dtype::F64,
            ..opts(&dir.path().join("run"))
        },
    )
    .err()
    .unwrap();
    assert_eq!(e.exit_code(), 2);
}
