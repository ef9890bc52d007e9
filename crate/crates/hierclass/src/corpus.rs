//! Labeled text datasets: loading, label statistics and stratified splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

/// One labeled text. The text may be empty; the label never is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    pub label: String,
}

/// An ordered collection of records. Record order is preserved from the
/// source file and acts as the determinism anchor for splits.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    records: Vec<Record>,
    labels: Vec<String>,
}

impl Dataset {
    /// Build a dataset from records, collecting distinct labels in order of
    /// first appearance. Records with empty labels are rejected.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.label.is_empty() {
                return Err(Error::Data(format!("record {i} has an empty label")));
            }
            if !labels.contains(&rec.label) {
                labels.push(rec.label.clone());
            }
        }
        Ok(Dataset { records, labels })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Supported on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// RFC-4180 CSV with header `text,label`.
    Csv,
    /// One JSON object per line with keys `text` and `label`.
    Jsonl,
}

impl DataFormat {
    /// Infer the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(DataFormat::Csv),
            Some("jsonl") | Some("json") => Ok(DataFormat::Jsonl),
            other => Err(Error::Config(format!(
                "cannot infer data format from extension {other:?} of {}",
                path.display()
            ))),
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRow {
    text: String,
    label: String,
}

/// Load a dataset from disk, one record per row/line, in file order.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path),
        DataFormat::Jsonl => load_jsonl(path),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, &e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    let text_col = headers.iter().position(|h| h == "text");
    let label_col = headers.iter().position(|h| h == "label");
    let (text_col, label_col) = match (text_col, label_col) {
        (Some(t), Some(l)) => (t, l),
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("header must contain `text` and `label` columns, got {headers:?}"),
            ))
        }
    };

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, &e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let text = row
            .get(text_col)
            .ok_or_else(|| Error::parse(path, line, "missing `text` field"))?;
        let label = row
            .get(label_col)
            .ok_or_else(|| Error::parse(path, line, "missing `label` field"))?;
        if label.is_empty() {
            return Err(Error::parse(path, line, "empty `label` field"));
        }
        records.push(Record {
            text: text.to_string(),
            label: label.to_string(),
        });
    }
    Dataset::from_records(records)
}

fn csv_error(path: &Path, err: &csv::Error) -> Error {
    let line = match err.kind() {
        csv::ErrorKind::Utf8 { pos, .. } | csv::ErrorKind::UnequalLengths { pos, .. } => {
            pos.as_ref().map(|p| p.line() as usize).unwrap_or(0)
        }
        _ => 0,
    };
    match err.kind() {
        csv::ErrorKind::Io(_) => Error::parse(path, line, format!("io error: {err}")),
        _ => Error::parse(path, line, err.to_string()),
    }
}

fn load_jsonl(path: &Path) -> Result<Dataset> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, format!("invalid JSON object: {e}")))?;
        if row.label.is_empty() {
            return Err(Error::parse(path, i + 1, "empty `label` field"));
        }
        records.push(Record {
            text: row.text,
            label: row.label,
        });
    }
    Dataset::from_records(records)
}

/// Count records per label. Counts always sum to the dataset size.
pub fn class_distribution(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for rec in dataset.records() {
        *counts.entry(rec.label.clone()).or_insert(0) += 1;
    }
    counts
}

/// Deterministic stratified split. Per label, the test set receives
/// `round(count * test_fraction)` records clamped to `[1, count - 1]`;
/// the same seed always produces the same partition. Record order within
/// each side follows the source order.
pub fn stratified_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let counts = class_distribution(dataset);
    for (label, count) in &counts {
        if *count < 2 {
            return Err(Error::Data(format!(
                "label {label:?} has {count} record(s); stratified split needs at least 2"
            )));
        }
    }

    // Indices per label, visited in lexicographic label order so the split
    // depends only on (dataset, fraction, seed).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_indices = Vec::new();
    for (label, count) in &counts {
        let mut indices: Vec<usize> = dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.label == label)
            .map(|(i, _)| i)
            .collect();
        indices.shuffle(&mut rng);
        let n_test = ((*count as f64) * test_fraction).round() as usize;
        let n_test = n_test.clamp(1, count - 1);
        test_indices.extend_from_slice(&indices[..n_test]);
    }
    test_indices.sort_unstable();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut cursor = 0;
    for (i, rec) in dataset.records().iter().enumerate() {
        if cursor < test_indices.len() && test_indices[cursor] == i {
            test.push(rec.clone());
            cursor += 1;
        } else {
            train.push(rec.clone());
        }
    }
    Ok((Dataset::from_records(train)?, Dataset::from_records(test)?))
}
