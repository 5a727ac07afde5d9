//! Tokenizer files: `vocab.txt` has one escaped token per line with the id
//! equal to the line number; `merges.txt` has one `left right` pair per
//! line in application order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sra_core::tokenizer::{escape_token, unescape_token, Tokenizer};

use crate::error::{Error, IoContext, Result};
use crate::fsutil;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

pub fn save(tok: &Tokenizer, dir: &Path) -> Result<()> {
    let mut vocab = String::new();
    for t in tok.vocab() {
        vocab.push_str(&escape_token(t));
        vocab.push('\n');
    }
    let mut merges = String::new();
    for &(a, b) in tok.merges() {
        let (a, b) = (
            tok.token(a).expect("merge id"),
            tok.token(b).expect("merge id"),
        );
        writeln!(merges, "{} {}", escape_token(a), escape_token(b)).expect("string write");
    }
    fsutil::write(&dir.join(VOCAB_FILE), vocab.as_bytes())?;
    fsutil::write(&dir.join(MERGES_FILE), merges.as_bytes())
}

pub fn load(dir: &Path) -> Result<Tokenizer> {
    let vocab_path = dir.join(VOCAB_FILE);
    let merges_path = dir.join(MERGES_FILE);
    let vocab_text = fs::read_to_string(&vocab_path).at(&vocab_path)?;
    let merges_text = fs::read_to_string(&merges_path).at(&merges_path)?;

    let vocab = vocab_text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            unescape_token(line)
                .map_err(|e| Error::format(&vocab_path, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;

    // Token strings are unique, so a pair of strings names a pair of ids.
    let lookup: std::collections::HashMap<&[u8], u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_slice(), i as u32))
        .collect();
    let mut merges = Vec::new();
    for (i, line) in merges_text.lines().enumerate() {
        let bad = |msg: String| Error::format(&merges_path, format!("line {}: {msg}", i + 1));
        let (a, b) = line
            .split_once(' ')
            .ok_or_else(|| bad("expected `left right`".into()))?;
        let id = |s: &str| -> Result<u32> {
            let bytes = unescape_token(s).map_err(|e| bad(e.to_string()))?;
            lookup
                .get(bytes.as_slice())
                .copied()
                .ok_or_else(|| bad(format!("`{s}` is not in the vocabulary")))
        };
        merges.push((id(a)?, id(b)?));
    }
    Tokenizer::from_parts(vocab, merges).map_err(|e| Error::format(dir, e.to_string()))
}

pub fn copy(from: &Path, to: &Path) -> Result<()> {
    for name in [VOCAB_FILE, MERGES_FILE] {
        let src = from.join(name);
        let bytes = fs::read(&src).at(&src)?;
        fsutil::write(&to.join(name), &bytes)?;
    }
    Ok(())
}
