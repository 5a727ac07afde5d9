//! Byte-level BPE.
//!
//! Id 0 is `<unk>`, ids `1..=A` are the bytes seen in training (ascending),
//! and every merge appends one id.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use crate::error::{invalid, Error, Result};

pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &[u8] = b"<unk>";

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    byte_ids: [u32; 256],
    /// pair → (rank, merged id)
    ranks: BTreeMap<(u32, u32), (u32, u32)>,
}

/// Distinct bytes of `corpus` plus the unknown token.
pub fn alphabet_size(corpus: &[u8]) -> usize {
    let mut seen = [false; 256];
    corpus.iter().for_each(|&b| seen[b as usize] = true);
    seen.iter().filter(|&&s| s).count() + 1
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    count: u64,
    /// Lexicographically smaller pairs win ties.
    key: Reverse<(Rc<[u8]>, Rc<[u8]>)>,
    pair: (u32, u32),
}

struct Trainer {
    sym: Vec<u32>,
    prev: Vec<u32>,
    next: Vec<u32>,
    counts: BTreeMap<(u32, u32), u64>,
    positions: BTreeMap<(u32, u32), Vec<u32>>,
    tokens: Vec<Rc<[u8]>>,
    dirty: BTreeSet<(u32, u32)>,
}

impl Trainer {
    fn add(&mut self, pair: (u32, u32), pos: u32) {
        *self.counts.entry(pair).or_insert(0) += 1;
        self.positions.entry(pair).or_default().push(pos);
        self.dirty.insert(pair);
    }

    fn remove(&mut self, pair: (u32, u32)) {
        if let Some(c) = self.counts.get_mut(&pair) {
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&pair);
                self.positions.remove(&pair);
            }
        }
        self.dirty.insert(pair);
    }

    fn candidate(&self, pair: (u32, u32)) -> Option<Candidate> {
        self.counts.get(&pair).map(|&count| Candidate {
            count,
            key: Reverse((
                self.tokens[pair.0 as usize].clone(),
                self.tokens[pair.1 as usize].clone(),
            )),
            pair,
        })
    }

    /// Replaces every left-to-right occurrence of `pair` by `new`.
    fn merge(&mut self, pair: (u32, u32), new: u32) {
        let mut at = self.positions.remove(&pair).unwrap_or_default();
        at.sort_unstable();
        at.dedup();
        for pos in at {
            let p = pos as usize;
            let nx = self.next[p];
            if self.sym[p] != pair.0 || nx == NONE || self.sym[nx as usize] != pair.1 {
                continue;
            }
            let pv = self.prev[p];
            let nn = self.next[nx as usize];
            if pv != NONE {
                self.remove((self.sym[pv as usize], pair.0));
            }
            if nn != NONE {
                self.remove((pair.1, self.sym[nn as usize]));
            }
            self.remove(pair);
            self.sym[p] = new;
            self.sym[nx as usize] = NONE;
            self.next[p] = nn;
            if nn != NONE {
                self.prev[nn as usize] = pos;
            }
            if pv != NONE {
                self.add((self.sym[pv as usize], new), pv);
            }
            if nn != NONE {
                self.add((new, self.sym[nn as usize]), pos);
            }
        }
        debug_assert!(!self.counts.contains_key(&pair));
    }
}

impl Tokenizer {
    /// Greedily merges the most frequent adjacent pair until the vocabulary
    /// holds `vocab_size` tokens or no pair occurs twice.
    ///
    /// A pair whose concatenation is already a token is skipped, so token
    /// strings stay unique.
    pub fn train(corpus: &[u8], vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid("cannot train a tokenizer on an empty corpus"));
        }
        let alphabet = alphabet_size(corpus);
        if vocab_size <= alphabet {
            return Err(invalid(format!(
                "vocab_size {vocab_size} must exceed the alphabet size {alphabet} (distinct bytes plus <unk>)"
            )));
        }
        let mut base = Self::from_alphabet(corpus);
        let n = corpus.len();
        let mut t = Trainer {
            sym: corpus.iter().map(|&b| base.byte_ids[b as usize]).collect(),
            prev: (0..n)
                .map(|i| if i == 0 { NONE } else { i as u32 - 1 })
                .collect(),
            next: (0..n)
                .map(|i| if i + 1 == n { NONE } else { i as u32 + 1 })
                .collect(),
            counts: BTreeMap::new(),
            positions: BTreeMap::new(),
            tokens: base.vocab.iter().map(|v| Rc::from(v.as_slice())).collect(),
            dirty: BTreeSet::new(),
        };
        for i in 0..n.saturating_sub(1) {
            t.add((t.sym[i], t.sym[i + 1]), i as u32);
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
        let mut existing: BTreeSet<Rc<[u8]>> = t.tokens.iter().cloned().collect();

        while base.vocab.len() < vocab_size {
            for pair in core::mem::take(&mut t.dirty) {
                if let Some(c) = t.candidate(pair) {
                    heap.push(c);
                }
            }
            let Some(best) = heap.pop() else { break };
            if t.counts.get(&best.pair) != Some(&best.count) {
                continue;
            }
            if best.count < 2 {
                break;
            }
            let Reverse((left, right)) = &best.key;
            let joined: Rc<[u8]> = [&left[..], &right[..]].concat().into();
            if existing.contains(&joined) {
                continue;
            }
            let new = base.vocab.len() as u32;
            t.merge(best.pair, new);
            base.ranks
                .insert(best.pair, (base.merges.len() as u32, new));
            base.merges.push(best.pair);
            base.vocab.push(joined.to_vec());
            t.tokens.push(joined.clone());
            existing.insert(joined);
        }
        Ok(base)
    }

    fn from_alphabet(corpus: &[u8]) -> Self {
        let mut seen = [false; 256];
        corpus.iter().for_each(|&b| seen[b as usize] = true);
        let mut vocab = vec![UNK_TOKEN.to_vec()];
        let mut byte_ids = [UNK_ID; 256];
        for b in 0..256usize {
            if seen[b] {
                byte_ids[b] = vocab.len() as u32;
                vocab.push(vec![b as u8]);
            }
        }
        Self {
            vocab,
            merges: Vec::new(),
            byte_ids,
            ranks: BTreeMap::new(),
        }
    }

    /// Rebuilds a tokenizer from its vocabulary and ordered merges.
    pub fn from_parts(vocab: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if vocab.first().map(Vec::as_slice) != Some(UNK_TOKEN) {
            return Err(invalid("vocabulary must start with <unk>"));
        }
        let n_base = vocab
            .len()
            .checked_sub(merges.len())
            .ok_or_else(|| invalid("more merges than vocabulary entries"))?;
        let mut byte_ids = [UNK_ID; 256];
        for (id, tok) in vocab.iter().enumerate().take(n_base).skip(1) {
            if tok.len() != 1 {
                return Err(invalid(format!("base token {id} is not a single byte")));
            }
            if byte_ids[tok[0] as usize] != UNK_ID {
                return Err(invalid(format!("byte {:#04x} appears twice", tok[0])));
            }
            byte_ids[tok[0] as usize] = id as u32;
        }
        let mut ranks = BTreeMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let new = (n_base + r) as u32;
            if a >= new || b >= new {
                return Err(invalid(format!("merge {r} refers to a later token")));
            }
            let joined = [&vocab[a as usize][..], &vocab[b as usize][..]].concat();
            if joined != vocab[new as usize] {
                return Err(invalid(format!("merge {r} does not produce token {new}")));
            }
            if ranks.insert((a, b), (r as u32, new)).is_some() {
                return Err(invalid(format!("merge {r} is duplicated")));
            }
        }
        Ok(Self {
            vocab,
            merges,
            byte_ids,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    /// Id of an exact token string.
    pub fn id_of(&self, token: &[u8]) -> Option<u32> {
        self.vocab.iter().position(|t| t == token).map(|i| i as u32)
    }

    /// Applies merges in training order; unseen bytes become [`UNK_ID`].
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let n = text.len();
        if n == 0 {
            return Vec::new();
        }
        let mut sym: Vec<u32> = text.iter().map(|&b| self.byte_ids[b as usize]).collect();
        let mut prev: Vec<u32> = (0..n)
            .map(|i| if i == 0 { NONE } else { i as u32 - 1 })
            .collect();
        let mut next: Vec<u32> = (0..n)
            .map(|i| if i + 1 == n { NONE } else { i as u32 + 1 })
            .collect();
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&(rank, _)) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((rank, i as u32)));
            }
        }
        while let Some(Reverse((rank, pos))) = heap.pop() {
            let p = pos as usize;
            let nx = next[p];
            if sym[p] == NONE || nx == NONE {
                continue;
            }
            let Some(&(r, new)) = self.ranks.get(&(sym[p], sym[nx as usize])) else {
                continue;
            };
            if r != rank {
                continue;
            }
            let nn = next[nx as usize];
            sym[p] = new;
            sym[nx as usize] = NONE;
            next[p] = nn;
            if nn != NONE {
                prev[nn as usize] = pos;
                if let Some(&(r2, _)) = self.ranks.get(&(new, sym[nn as usize])) {
                    heap.push(Reverse((r2, pos)));
                }
            }
            let pv = prev[p];
            if pv != NONE {
                if let Some(&(r2, _)) = self.ranks.get(&(sym[pv as usize], new)) {
                    heap.push(Reverse((r2, pv)));
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0u32;
        while i != NONE {
            out.push(sym[i as usize]);
            i = next[i as usize];
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab.len(),
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    /// Printable form of a token for reports.
    pub fn display(&self, id: u32) -> String {
        match self.token(id) {
            Some(t) => String::from_utf8_lossy(t).into_owned(),
            None => format!("<{id}?>"),
        }
    }
}

/// Escapes a token so it contains no whitespace and no invalid UTF-8.
///
/// `\\`, `\s` (space), `\n`, `\r`, `\t` and `\xHH` for other control or
/// non-UTF-8 bytes.
pub fn escape_token(bytes: &[u8]) -> String {
    let mut out = String::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (valid, bad) = match core::str::from_utf8(rest) {
            Ok(s) => (s, &[][..]),
            Err(e) => {
                let (ok, tail) = rest.split_at(e.valid_up_to());
                let skip = e.error_len().unwrap_or(tail.len());
                (
                    core::str::from_utf8(ok).expect("validated prefix"),
                    &tail[..skip],
                )
            }
        };
        for c in valid.chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                ' ' => out.push_str("\\s"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                c if c.is_control() || c.is_whitespace() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        out.push_str(&format!("\\x{b:02x}"));
                    }
                }
                c => out.push(c),
            }
        }
        for b in bad {
            out.push_str(&format!("\\x{b:02x}"));
        }
        rest = &rest[valid.len() + bad.len()..];
    }
    out
}

pub fn unescape_token(s: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        let esc = *bytes
            .get(i + 1)
            .ok_or_else(|| invalid(format!("dangling escape in `{s}`")))?;
        i += 2;
        match esc {
            b'\\' => out.push(b'\\'),
            b's' => out.push(b' '),
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'x' => {
                let hex = s
                    .get(i..i + 2)
                    .ok_or_else(|| invalid(format!("short \\x escape in `{s}`")))?;
                out.push(
                    u8::from_str_radix(hex, 16)
                        .map_err(|_| invalid(format!("bad \\x escape in `{s}`")))?,
                );
                i += 2;
            }
            other => {
                return Err(invalid(format!(
                    "unknown escape \\{} in `{s}`",
                    other as char
                )))
            }
        }
    }
    Ok(out)
}
