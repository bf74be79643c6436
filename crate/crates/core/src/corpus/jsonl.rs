use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{frame, Caps, Example, Framed, Vocabulary};
use crate::error::{Error, Result};

/// Outcome of reading one JSONL file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub path: PathBuf,
    pub lines: usize,
    pub loaded: usize,
    /// Line numbers (1-based) whose source was cut to the cap.
    pub truncated_sources: Vec<usize>,
    /// Line numbers whose summary exceeded the target cap.
    pub rejected_targets: Vec<usize>,
}

/// A raw record before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub line: usize,
    pub source: String,
    pub summary: String,
    /// Numeric `"dataset"` field, when present.
    pub dataset: Option<usize>,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, path: &Path, line: usize) -> Result<&'a str> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::Corpus {
            path: path.to_path_buf(),
            line,
            message: format!("field \"{name}\" must be a string"),
        }),
        None => Err(Error::Corpus {
            path: path.to_path_buf(),
            line,
            message: format!("missing field \"{name}\""),
        }),
    }
}

/// Parses every non-blank line of `path` as a `{"source", "summary",
/// "dataset"?}` object. A numeric `dataset` is kept; a string one is a label
/// and ignored.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    parse(path, true)
}

/// As [`read_records`] but `summary` may be absent (it is then empty).
pub fn read_inputs(path: &Path) -> Result<Vec<Record>> {
    parse(path, false)
}

fn parse(path: &Path, require_summary: bool) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: n,
            message: format!("malformed JSON: {e}"),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Corpus {
                path: path.to_path_buf(),
                line: n,
                message: "expected a JSON object".into(),
            });
        };
        let source = field(&obj, "source", path, n)?.to_string();
        let summary = if require_summary || obj.contains_key("summary") {
            field(&obj, "summary", path, n)?.to_string()
        } else {
            String::new()
        };
        let dataset = match obj.get("dataset") {
            None | Some(Value::String(_)) | Some(Value::Null) => None,
            Some(Value::Number(x)) if x.as_u64().is_some() => x.as_u64().map(|d| d as usize),
            Some(_) => {
                return Err(Error::Corpus {
                    path: path.to_path_buf(),
                    line: n,
                    message: "field \"dataset\" must be a non-negative integer or a string label".into(),
                })
            }
        };
        out.push(Record {
            line: n,
            source,
            summary,
            dataset,
        });
    }
    Ok(out)
}

/// Loads a corpus. Records without a numeric `dataset` field get
/// `dataset_id`.
pub fn load_jsonl(path: &Path, dataset_id: usize, vocab: &Vocabulary, caps: Caps) -> Result<(Vec<Example>, LoadReport)> {
    let records = read_records(path)?;
    let mut report = LoadReport {
        path: path.to_path_buf(),
        lines: records.len(),
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        match frame(vocab, &r.source, &r.summary, r.dataset.unwrap_or(dataset_id), caps) {
            Framed::Ok { example, truncated } => {
                if truncated {
                    report.truncated_sources.push(r.line);
                }
                examples.push(example);
            }
            Framed::TargetTooLong => report.rejected_targets.push(r.line),
        }
    }
    report.loaded = examples.len();
    Ok((examples, report))
}

/// Writes examples back as JSONL with their raw text and dataset id.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let line = serde_json::json!({
            "source": e.raw_source,
            "summary": e.raw_summary,
            "dataset": e.dataset_id,
        });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
