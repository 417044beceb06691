use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, EcgRecord};

/// A label is a class id, `null`, or a list of class ids for multi-label
/// sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelField {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    signal: Vec<Vec<f32>>,
    fs: u32,
    report: String,
    label: Option<LabelField>,
}

/// Records whose label list names more than one class are dropped; a
/// one-element list is treated as a single label.
pub fn load_jsonl(path: &Path) -> Result<Vec<EcgRecord>, DataError> {
    Ok(load_jsonl_counting(path)?.0)
}

/// As [`load_jsonl`], also returning how many multi-label lines were dropped.
pub fn load_jsonl_counting(path: &Path) -> Result<(Vec<EcgRecord>, usize), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut records = Vec::new();
    let mut dropped = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let label = match parsed.label {
            None => None,
            Some(LabelField::One(c)) => Some(c),
            Some(LabelField::Many(v)) if v.is_empty() => None,
            Some(LabelField::Many(v)) if v.len() == 1 => Some(v[0]),
            Some(LabelField::Many(_)) => {
                dropped += 1;
                continue;
            }
        };
        let record = EcgRecord {
            id: parsed.id,
            signal: parsed.signal,
            sampling_rate_hz: parsed.fs,
            report: parsed.report,
            label,
        };
        record.validate(None).map_err(|e| match e {
            DataError::Schema(m) => DataError::Schema(format!("line {}: {m}", n + 1)),
            other => other,
        })?;
        records.push(record);
    }
    Ok((records, dropped))
}

pub fn save_jsonl(records: &[EcgRecord], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = Line {
            id: r.id.clone(),
            signal: r.signal.clone(),
            fs: r.sampling_rate_hz,
            report: r.report.clone(),
            label: r.label.map(LabelField::One),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| DataError::Schema(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}
