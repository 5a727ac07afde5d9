//! Text tables, JSON and CSV for the analysis reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sra_core::analysis::{
    anchor_dispersion_stats, specialization_table, utilization, DispersionStats, ExpertTokens,
    LayerUtilization, TraceRow, HISTOGRAM_BUCKETS,
};
use sra_core::linalg::Matrix;

use crate::error::{Error, Result};
use crate::records::RecordsFile;
use crate::{fsutil, tokenizer_io};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    Utilization,
    Specialization,
    Dispersion,
}

impl Report {
    pub fn name(self) -> &'static str {
        match self {
            Report::Utilization => "utilization",
            Report::Specialization => "specialization",
            Report::Dispersion => "dispersion",
        }
    }
}

/// Control characters shown as escapes so a token stays on one line.
pub fn printable(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Columns padded to their widest cell; the first column is left-aligned,
/// the rest right-aligned.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', pad));
            } else {
                s.extend(std::iter::repeat_n(' ', pad));
                s.push_str(c);
            }
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(&mut headers.iter().copied());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&mut rule.iter().map(String::as_str)));
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
    }
    out
}

pub fn utilization_table(stats: &[LayerUtilization], n_experts: usize) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .map(|u| {
            let ids: Vec<String> = u.dead_ids.iter().map(|i| format!("E{i}")).collect();
            vec![
                format!("Layer {}", u.layer),
                u.tokens.to_string(),
                format!("{:.2}", u.cv),
                format!(
                    "{} ({:.1}%)",
                    u.dead,
                    100.0 * u.dead as f64 / n_experts as f64
                ),
                if ids.is_empty() {
                    "-".into()
                } else {
                    ids.join(",")
                },
            ]
        })
        .collect();
    table(
        &["Layer", "Tokens", "CV", "Dead Experts", "Dead ids"],
        &rows,
    )
}

pub fn specialization_text(lists: &[ExpertTokens]) -> String {
    let rows: Vec<Vec<String>> = lists
        .iter()
        .map(|e| {
            let toks: Vec<String> = e.tokens.iter().map(|t| printable(&t.text)).collect();
            vec![format!("E{}", e.expert), toks.join(", ")]
        })
        .collect();
    let mut out = String::new();
    let w = rows.iter().map(|r| r[0].len()).max().unwrap_or(0).max(6);
    writeln!(out, "{:<w$}  Top tokens", "Expert").expect("string write");
    writeln!(out, "{}  {}", "-".repeat(w), "-".repeat(10)).expect("string write");
    for r in rows {
        writeln!(out, "{:<w$}  {}", r[0], r[1]).expect("string write");
    }
    out
}

pub fn dispersion_table(stats: &[DispersionStats]) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                format!("Layer {i}"),
                s.n_pairs.to_string(),
                format!("{:.3}", s.mean),
                format!("{:.3}", s.std),
            ]
        })
        .collect();
    table(&["Layer", "Pairs", "Mean cos", "Std"], &rows)
}

pub fn dispersion_csv(stats: &[DispersionStats]) -> String {
    let mut out = String::from("layer,bucket_start,bucket_end,count\n");
    let width = 2.0 / HISTOGRAM_BUCKETS as f64;
    for (i, s) in stats.iter().enumerate() {
        for (b, c) in s.histogram.iter().enumerate() {
            let lo = DispersionStats::bucket_start(b);
            writeln!(out, "{i},{lo:.2},{:.2},{c}", lo + width).expect("string write");
        }
    }
    out
}

/// Token, then one `E<id> (<weight>)` column per routing slot.
pub fn trace_table(rows: &[TraceRow], k: usize) -> String {
    let mut headers = vec!["Token".to_string()];
    headers.extend((1..=k).map(|i| format!("Expert {i} (Weight)")));
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![printable(&r.token)];
            c.extend(
                r.experts
                    .iter()
                    .zip(&r.weights)
                    .map(|(e, w)| format!("E{e} ({w:.3})")),
            );
            c
        })
        .collect();
    let h: Vec<&str> = headers.iter().map(String::as_str).collect();
    table(&h, &cells)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub variant: String,
    pub n_experts: usize,
    pub k: usize,
    pub layers: Vec<LayerUtilization>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecializationReport {
    pub layer: usize,
    pub top_m: usize,
    pub experts: Vec<ExpertTokens>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionReport {
    pub anchor_sets: Vec<DispersionStats>,
}

pub struct AnalyzeOptions {
    /// Routed-layer index for the specialization report.
    pub layer: usize,
    pub top_m: usize,
}

/// Writes `<report>.txt` and `<report>.json` (plus `dispersion.csv`) to
/// `out` and returns the text table.
pub fn analyze(
    records_path: &Path,
    report: Report,
    out: &Path,
    opts: &AnalyzeOptions,
) -> Result<(String, Vec<PathBuf>)> {
    let rec = RecordsFile::load(records_path)?;
    let name = report.name();
    let mut files = Vec::new();
    let text = match report {
        Report::Utilization => {
            let routing = sra_core::record::RoutingRecord {
                n_experts: rec.n_experts,
                layers: rec.layers.clone(),
            };
            let layers = utilization(&routing, rec.n_experts)?;
            let json = out.join(format!("{name}.json"));
            fsutil::write_json(
                &json,
                &UtilizationReport {
                    variant: rec.variant.name().into(),
                    n_experts: rec.n_experts,
                    k: rec.k,
                    layers: layers.clone(),
                },
            )?;
            files.push(json);
            if layers.is_empty() {
                format!("{} model: no routed layers\n", rec.variant.name())
            } else {
                utilization_table(&layers, rec.n_experts)
            }
        }
        Report::Specialization => {
            let layer = rec.layers.get(opts.layer).ok_or_else(|| {
                Error::Usage(format!(
                    "layer {} out of range; the records hold {} routed layers",
                    opts.layer,
                    rec.layers.len()
                ))
            })?;
            let tok = rec
                .tokenizer
                .as_deref()
                .map(tokenizer_io::load)
                .transpose()?;
            let experts = specialization_table(layer, rec.n_experts, tok.as_ref(), opts.top_m)?;
            let json = out.join(format!("{name}.json"));
            fsutil::write_json(
                &json,
                &SpecializationReport {
                    layer: opts.layer,
                    top_m: opts.top_m,
                    experts: experts.clone(),
                },
            )?;
            files.push(json);
            specialization_text(&experts)
        }
        Report::Dispersion => {
            let stats = rec
                .anchors
                .iter()
                .map(|rows| {
                    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                    anchor_dispersion_stats(&Matrix::from_rows(&refs)?)
                })
                .collect::<sra_core::Result<Vec<_>>>()?;
            let json = out.join(format!("{name}.json"));
            fsutil::write_json(
                &json,
                &DispersionReport {
                    anchor_sets: stats.clone(),
                },
            )?;
            let csv = out.join(format!("{name}.csv"));
            fsutil::write(&csv, dispersion_csv(&stats).as_bytes())?;
            files.extend([json, csv]);
            if stats.is_empty() {
                format!("{} model: no anchor sets\n", rec.variant.name())
            } else {
                dispersion_table(&stats)
            }
        }
    };
    let txt = out.join(format!("{name}.txt"));
    fsutil::write(&txt, text.as_bytes())?;
    files.push(txt);
    Ok((text, files))
}
