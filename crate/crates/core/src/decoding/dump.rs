use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decoded sample as written to a JSON-lines dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: u64,
    /// `greedy`, `beam5`, …
    pub mode: String,
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    /// CTC argmax on `H_dec^m`, one label per generated position.
    pub frame_labels: Vec<usize>,
    /// Units collapsed to semantic ids.
    pub hypothesis: Vec<usize>,
    /// Reference target text.
    pub reference: Vec<usize>,
    /// Entropy of the next-unit distribution at every greedy step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entropies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Vec<Vec<f64>>>,
}

pub fn write_records(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump; schema violations report the 1-based line and the field.
pub fn read_records(path: &Path) -> Result<Vec<DecodeRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        out.push(rec);
    }
    Ok(out)
}
