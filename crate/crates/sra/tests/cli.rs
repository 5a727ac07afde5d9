mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sra_core::model::Variant;

fn sra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sra"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("tokenize", &["--corpus", "--vocab-size", "--out"]),
        (
            "train",
            &[
                "--config",
                "--variant",
                "--override",
                "--out",
                "--resume",
                "--stop-after",
                "--dtype",
            ],
        ),
        ("eval", &["--checkpoint", "--split", "--out"]),
        (
            "analyze",
            &["--records", "--report", "--out", "--layer", "--top-m"],
        ),
        ("trace", &["--checkpoint", "--text", "--layer", "--json"]),
        ("gradcheck", &["--component", "--tol", "--seed", "--json"]),
    ];
    for (cmd, flags) in cases {
        let o = sra(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help misses {f}");
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&sra(&["train", "--bogus"])), 1);
    assert_eq!(code(&sra(&[])), 1);
    assert_eq!(
        code(&sra(&["gradcheck", "--component", "nope", "--tol", "1e-4"])),
        1
    );
    assert_eq!(
        code(&sra(&[
            "analyze",
            "--records",
            "x",
            "--report",
            "speed",
            "--out",
            "y"
        ])),
        1
    );
}

#[test]
fn tokenize_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus(dir.path(), 8000);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sra(&[
            "tokenize",
            "--corpus",
            s(&corpus),
            "--vocab-size",
            "60",
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["vocab.txt", "merges.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(
        fs::read_to_string(a.join("vocab.txt"))
            .unwrap()
            .lines()
            .count(),
        60
    );
    assert!(a.join("manifest.json").exists());

    let o = sra(&[
        "tokenize",
        "--corpus",
        s(&corpus),
        "--vocab-size",
        "5",
        "--out",
        s(&a),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("alphabet"));
    let o = sra(&[
        "tokenize",
        "--corpus",
        "/no/such/file",
        "--vocab-size",
        "60",
        "--out",
        s(&a),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/no/such/file"));
}

#[test]
fn unknown_override_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 8000), Variant::Sra);
    let path = common::write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = sra(&[
        "train",
        "--config",
        s(&path),
        "--override",
        "learning_rate=1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"));
    assert!(!out.exists());
    let o = sra(&[
        "train",
        "--config",
        s(&path),
        "--override",
        "switch_epoch=9",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1, "switch_epoch beyond epochs + 1");
}

#[test]
fn gradcheck_reports_and_exits() {
    let o = sra(&[
        "gradcheck",
        "--component",
        "dispersion_loss",
        "--tol",
        "1e-4",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS"));
    let o = sra(&["gradcheck", "--component", "balance_loss", "--tol", "1e-30"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let path = common::write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let o = sra(&[
        "train",
        "--config",
        s(&path),
        "--override",
        "train.epochs=1",
        "--override",
        "switch_epoch=1",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("run_manifest.json").exists());
    let ck = run.join("checkpoints/epoch-001");

    let o = sra(&["eval", "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("perplexity"));
    let eval: serde_json::Value = sra::fsutil::read_json(&ck.join("eval-val.json")).unwrap();
    let records = ck.join("records-val.json");
    let rec = sra::records::RecordsFile::load(&records).unwrap();
    assert_eq!(rec.n_tokens as u64, eval["n_tokens"].as_u64().unwrap());
    assert_eq!(rec.k, 2);

    let reports = dir.path().join("reports");
    for r in ["utilization", "specialization", "dispersion"] {
        let o = sra(&[
            "analyze",
            "--records",
            s(&records),
            "--report",
            r,
            "--out",
            s(&reports),
        ]);
        assert_eq!(code(&o), 0, "{r}: {}", stderr(&o));
        assert!(reports.join(format!("{r}.json")).exists());
        assert!(reports.join(format!("{r}.txt")).exists());
    }
    assert!(stdout(&sra(&[
        "analyze",
        "--records",
        s(&records),
        "--report",
        "utilization",
        "--out",
        s(&reports)
    ]))
    .contains("Dead Experts"));
    let csv = fs::read_to_string(reports.join("dispersion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 20);

    let o = sra(&[
        "trace",
        "--checkpoint",
        s(&ck),
        "--text",
        "the cat sat on the mat",
        "--layer",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("Token") && out.contains("Expert 2 (Weight)"));
    let o = sra(&[
        "trace",
        "--checkpoint",
        s(&ck),
        "--text",
        "the",
        "--layer",
        "5",
    ]);
    assert_eq!(code(&o), 2);

    let o = sra(&["eval", "--checkpoint", s(&dir.path().join("missing"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn dense_variant_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let path = common::write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let o = sra(&[
        "train",
        "--config",
        s(&path),
        "--variant",
        "dense",
        "--override",
        "epochs=1",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = run.join("checkpoints/epoch-001");
    assert_eq!(code(&sra(&["eval", "--checkpoint", s(&ck)])), 0);
    let o = sra(&[
        "analyze",
        "--records",
        s(&ck.join("records-val.json")),
        "--report",
        "utilization",
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("no routed layers"));
    let o = sra(&[
        "trace",
        "--checkpoint",
        s(&ck),
        "--text",
        "the cat",
        "--layer",
        "0",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dense"));
}

#[test]
fn resume_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&common::write_corpus(dir.path(), 12_000), Variant::Sra);
    let path = common::write_config(dir.path(), &cfg);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_eq!(
        code(&sra(&["train", "--config", s(&path), "--out", s(&full)])),
        0
    );
    assert_eq!(
        code(&sra(&[
            "train",
            "--config",
            s(&path),
            "--out",
            s(&split),
            "--stop-after",
            "17"
        ])),
        0
    );
    let ck = split.join("checkpoints/step-0000017");
    let o = sra(&["train", "--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(split.join("metrics.jsonl")).unwrap()
    );
    let o = sra(&["train", "--resume", s(&ck), "--override", "beta=0"]);
    assert_eq!(code(&o), 1);
}
