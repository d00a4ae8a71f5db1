//! JSON run reports and plot-ready CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::scoring::ScoreTriple;

/// Pretty JSON with a trailing newline. Output is byte-stable for equal input.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

/// One CSV row per item, header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    sample_id: u64,
    client_id: u32,
    label: u32,
    rs: f64,
    ds: f64,
    s_neg: f64,
}

/// `sample_id,client_id,label,rs,ds,s_neg` in ascending id order.
pub fn write_scores_csv(
    path: &Path,
    scores: &BTreeMap<u64, ScoreTriple>,
    owners: &BTreeMap<u64, (u32, u32)>,
) -> Result<()> {
    let rows: Vec<ScoreRow> = scores
        .iter()
        .map(|(&id, s)| {
            let (client_id, label) = owners.get(&id).copied().unwrap_or((u32::MAX, u32::MAX));
            ScoreRow {
                sample_id: id,
                client_id,
                label,
                rs: s.rs,
                ds: s.ds,
                s_neg: s.s_neg,
            }
        })
        .collect();
    write_csv(path, &rows)
}
