use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;

use super::HarnessError;
use crate::spans::QuestionRecord;

/// Reads a JSONL dataset, one [`QuestionRecord`] per non-blank line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, HarnessError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<QuestionRecord>, HarnessError> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| HarnessError::Schema {
            line: lineno,
            message,
        };
        let record: QuestionRecord =
            serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if record.id.is_empty() {
            return Err(schema("empty `id`".into()));
        }
        if record.question.trim().is_empty() {
            return Err(schema("empty `question`".into()));
        }
        if record.split.is_empty() {
            return Err(schema("empty `split`".into()));
        }
        if let Some(a) = record
            .answers
            .iter()
            .find(|a| !a.weight.is_finite() || a.weight < 0.0)
        {
            return Err(schema(format!(
                "answer `{}` has invalid weight {}",
                a.text, a.weight
            )));
        }
        if !ids.insert(record.id.clone()) {
            return Err(schema(format!("duplicate id `{}`", record.id)));
        }
        records.push(record);
    }
    Ok(records)
}

/// Record indices per split, in first-seen split order.
pub fn split_indices(records: &[QuestionRecord]) -> IndexMap<String, Vec<usize>> {
    let mut out: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (i, r) in records.iter().enumerate() {
        out.entry(r.split.clone()).or_default().push(i);
    }
    out
}

pub fn write_dataset<W: std::io::Write>(
    records: &[QuestionRecord],
    out: &mut W,
) -> Result<(), HarnessError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
