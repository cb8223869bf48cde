use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::bleu::corpus_bleu;
use super::entropy::{entropy_delta_from_values, EntropyHistogram};
use super::shift::ShiftReport;
use crate::decoding::DecodeRecord;
use crate::error::{Error, Result};
use crate::tokens::text;

pub const BASELINE_VARIANT: &str = "none";

/// Decode dumps and training summary of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDumps {
    pub variant: String,
    pub seed: u64,
    pub unit_vocab: usize,
    /// `(mode name, records)` in the order columns should appear.
    pub dumps: Vec<(String, Vec<DecodeRecord>)>,
    /// Last logged total training loss.
    pub final_loss: Option<f64>,
}

impl RunDumps {
    pub fn records(&self, mode: &str) -> Option<&[DecodeRecord]> {
        self.dumps.iter().find(|d| d.0 == mode).map(|d| d.1.as_slice())
    }

    pub fn bleu(&self, mode: &str) -> Result<Option<f64>> {
        self.records(mode).map(records_bleu).transpose()
    }

    /// Forward-shift statistic over the greedy CTC labels.
    pub fn shift(&self) -> Result<Option<ShiftReport>> {
        self.records("greedy")
            .map(|r| ShiftReport::new(r.iter().map(|x| x.frame_labels.as_slice()), text::BLANK))
            .transpose()
    }

    /// Greedy next-unit entropies in record order.
    pub fn entropies(&self) -> Vec<f64> {
        self.records("greedy")
            .map(|r| r.iter().flat_map(|x| x.entropies.iter().copied()).collect())
            .unwrap_or_default()
    }
}

pub fn records_bleu(records: &[DecodeRecord]) -> Result<f64> {
    let hyps: Vec<Vec<usize>> = records.iter().map(|r| r.hypothesis.clone()).collect();
    let refs: Vec<Vec<usize>> = records.iter().map(|r| r.reference.clone()).collect();
    corpus_bleu(&hyps, &refs)
}

/// Per-variant aggregates in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Mean BLEU per mode column.
    pub bleu: Vec<Option<f64>>,
    pub shift: Option<f64>,
    pub shift_pooled: Option<f64>,
    pub entropies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub modes: Vec<String>,
    pub variants: Vec<VariantSummary>,
    pub unit_vocab: usize,
}

impl Summary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn mode_index(&self, mode: &str) -> Option<usize> {
        self.modes.iter().position(|m| m == mode)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn mode_columns(runs: &[RunDumps]) -> Vec<String> {
    let mut modes: Vec<String> = Vec::new();
    for r in runs {
        for (m, _) in &r.dumps {
            if !modes.contains(m) {
                modes.push(m.clone());
            }
        }
    }
    modes
}

pub fn summarize(runs: &[RunDumps]) -> Result<Summary> {
    let first = runs.first().ok_or_else(|| Error::contract("no runs to summarize"))?;
    if runs.iter().any(|r| r.unit_vocab != first.unit_vocab) {
        return Err(Error::contract("runs disagree on the unit vocabulary"));
    }
    let modes = mode_columns(runs);
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunDumps>> = BTreeMap::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
        groups.entry(r.variant.clone()).or_default().push(r);
    }
    let mut variants = Vec::new();
    for v in order {
        let group = &groups[&v];
        let mut bleu = Vec::new();
        for m in &modes {
            let mut xs = Vec::new();
            for r in group {
                xs.extend(r.bleu(m)?);
            }
            bleu.push(mean(&xs));
        }
        let mut shifts = Vec::new();
        let mut pooled = Vec::new();
        for r in group {
            if let Some(s) = r.shift()? {
                shifts.push(s.corpus_mean);
                pooled.push(s.pooled_mean);
            }
        }
        variants.push(VariantSummary {
            seeds: group.iter().map(|r| r.seed).collect(),
            bleu,
            shift: mean(&shifts),
            shift_pooled: mean(&pooled),
            entropies: group.iter().flat_map(|r| r.entropies()).collect(),
            variant: v,
        });
    }
    Ok(Summary {
        modes,
        variants,
        unit_vocab: first.unit_vocab,
    })
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn header(cols: &[&str], tail: &[String]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).chain(tail.iter().cloned()).collect()
}

/// Writes the report tables and plots into `out_dir` and returns their paths.
///
/// - `bleu.csv`: `variant,seed,<mode>…`, one row per run.
/// - `bleu_summary.csv`: `variant,n_seeds,<mode>…`, seed means.
/// - `shift.csv`: `variant,seed,corpus_mean,pooled_mean,token_count,skipped`.
/// - `shift_summary.csv`: `variant,n_seeds,corpus_mean,pooled_mean`.
/// - `entropy_hist.csv`: `variant,bin,lo,hi,count,frequency`, seeds pooled.
/// - `entropy_delta.csv`: `variant,bin,lo,hi,delta` against the baseline.
/// - `runs.csv`: `variant,seed,final_loss`.
/// - `bleu.svg`, `entropy_delta.svg`.
pub fn render_reports(runs: &[RunDumps], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let summary = summarize(runs)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
        let p = out_dir.join(name);
        write_csv(&p, &header, &rows)?;
        written.push(p);
        Ok(())
    };

    let mut rows = Vec::new();
    for r in runs {
        let mut row = vec![r.variant.clone(), r.seed.to_string()];
        for m in &summary.modes {
            row.push(opt(r.bleu(m)?));
        }
        rows.push(row);
    }
    emit("bleu.csv", header(&["variant", "seed"], &summary.modes), rows)?;

    let rows = summary
        .variants
        .iter()
        .map(|v| {
            let mut row = vec![v.variant.clone(), v.seeds.len().to_string()];
            row.extend(v.bleu.iter().map(|&b| opt(b)));
            row
        })
        .collect();
    emit(
        "bleu_summary.csv",
        header(&["variant", "n_seeds"], &summary.modes),
        rows,
    )?;

    let mut rows = Vec::new();
    for r in runs {
        if let Some(s) = r.shift()? {
            rows.push(vec![
                r.variant.clone(),
                r.seed.to_string(),
                f(s.corpus_mean),
                f(s.pooled_mean),
                s.token_count.to_string(),
                s.skipped.to_string(),
            ]);
        }
    }
    emit(
        "shift.csv",
        header(
            &[
                "variant",
                "seed",
                "corpus_mean",
                "pooled_mean",
                "token_count",
                "skipped",
            ],
            &[],
        ),
        rows,
    )?;
    let rows = summary
        .variants
        .iter()
        .map(|v| {
            vec![
                v.variant.clone(),
                v.seeds.len().to_string(),
                opt(v.shift),
                opt(v.shift_pooled),
            ]
        })
        .collect();
    emit(
        "shift_summary.csv",
        header(&["variant", "n_seeds", "corpus_mean", "pooled_mean"], &[]),
        rows,
    )?;

    let max = (summary.unit_vocab as f64).ln();
    let mut hist_rows = Vec::new();
    let mut hists = Vec::new();
    for v in &summary.variants {
        if v.entropies.is_empty() {
            continue;
        }
        let h = EntropyHistogram::new(&v.entropies, max)?;
        for (i, (&c, &fr)) in h.counts.iter().zip(&h.frequencies).enumerate() {
            hist_rows.push(vec![
                v.variant.clone(),
                i.to_string(),
                f(h.bin_edges[i]),
                f(h.bin_edges[i + 1]),
                c.to_string(),
                f(fr),
            ]);
        }
        hists.push((v.variant.clone(), h));
    }
    emit(
        "entropy_hist.csv",
        header(&["variant", "bin", "lo", "hi", "count", "frequency"], &[]),
        hist_rows,
    )?;

    let mut deltas = Vec::new();
    let mut delta_rows = Vec::new();
    if let Some(base) = summary.variant(BASELINE_VARIANT).filter(|b| !b.entropies.is_empty()) {
        for v in summary
            .variants
            .iter()
            .filter(|v| v.variant != BASELINE_VARIANT && !v.entropies.is_empty())
        {
            let d = entropy_delta_from_values(&v.entropies, &base.entropies, max)?;
            for (i, &x) in d.delta.iter().enumerate() {
                delta_rows.push(vec![
                    v.variant.clone(),
                    i.to_string(),
                    f(d.baseline.bin_edges[i]),
                    f(d.baseline.bin_edges[i + 1]),
                    f(x),
                ]);
            }
            deltas.push((v.variant.clone(), d.delta));
        }
    }
    emit(
        "entropy_delta.csv",
        header(&["variant", "bin", "lo", "hi", "delta"], &[]),
        delta_rows,
    )?;

    let rows = runs
        .iter()
        .map(|r| vec![r.variant.clone(), r.seed.to_string(), opt(r.final_loss)])
        .collect();
    emit("runs.csv", header(&["variant", "seed", "final_loss"], &[]), rows)?;

    let first_mode = summary.modes.first().cloned().unwrap_or_default();
    let bars: Vec<(String, f64)> = summary
        .variants
        .iter()
        .map(|v| (v.variant.clone(), v.bleu.first().copied().flatten().unwrap_or(0.0)))
        .collect();
    let p = out_dir.join("bleu.svg");
    fs::write(&p, bar_svg(&format!("mean {first_mode} BLEU"), &bars))?;
    written.push(p);

    let p = out_dir.join("entropy_delta.svg");
    fs::write(&p, step_svg("entropy frequency minus baseline", max, &deltas))?;
    written.push(p);
    Ok(written)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bar_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = svg_open(title);
    let top = bars.iter().map(|b| b.1).fold(1e-9, f64::max);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let base = H - PAD;
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        W - PAD
    );
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = (v / top) * (H - 2.0 * PAD - 16.0);
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            base - h,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            base - h - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            base + 16.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn step_svg(title: &str, max_x: f64, series: &[(String, Vec<f64>)]) -> String {
    let mut s = svg_open(title);
    let amp = series
        .iter()
        .flat_map(|x| x.1.iter())
        .fold(1e-9, |a: f64, &b| a.max(b.abs()));
    let mid = H / 2.0;
    let half = H / 2.0 - PAD;
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{mid}" x2="{}" y2="{mid}" stroke="black"/>"#,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{max_x:.3}</text>"#,
        W - PAD,
        H - PAD / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">0</text>"#,
        H - PAD / 2.0
    );
    for (i, (name, d)) in series.iter().enumerate() {
        let bw = (W - 2.0 * PAD) / d.len().max(1) as f64;
        let mut pts = String::new();
        for (j, &v) in d.iter().enumerate() {
            let y = mid - v / amp * half;
            let _ = write!(
                pts,
                "{:.2},{y:.2} {:.2},{y:.2} ",
                PAD + bw * j as f64,
                PAD + bw * (j + 1) as f64
            );
        }
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 80.0,
            PAD + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
