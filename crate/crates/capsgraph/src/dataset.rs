//! Labeled corpora: loading, label maps, encoding and batching.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use capsgraph_core::model::PAD_ID;
use capsgraph_core::Batch;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::{tokenize, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Tsv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "tsv" | "tab" => Some(Format::Tsv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            _ => Err(Error::Config(format!("unknown dataset format `{s}`"))),
        }
    }
}

/// A raw `(label, text)` row with the line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub label: String,
    pub text: String,
    pub line: usize,
}

/// Label names in index order; indices are assigned first-seen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_examples(examples: &[RawExample]) -> Self {
        let mut map = Self::default();
        for ex in examples {
            if map.index(&ex.label).is_none() {
                map.names.push(ex.label.clone());
            }
        }
        map
    }

    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Reads `label,text` rows from CSV/TSV (optional header) or JSONL objects
/// with `label` (string or integer) and `text` keys.
pub fn load_examples(path: &Path, format: Format) -> Result<Vec<RawExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut out = Vec::new();
    match format {
        Format::Csv | Format::Tsv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .delimiter(if format == Format::Csv { b',' } else { b'\t' })
                .from_reader(content.as_bytes());
            for (i, record) in reader.records().enumerate() {
                let record = record.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_err(line, e.to_string())
                })?;
                let line = record.position().map_or(i + 1, |p| p.line() as usize);
                if i == 0 && record.len() == 2 && record[0].eq_ignore_ascii_case("label") && record[1].eq_ignore_ascii_case("text") {
                    continue;
                }
                if record.len() == 1 && record[0].trim().is_empty() {
                    continue;
                }
                if record.len() != 2 {
                    return Err(parse_err(line, format!("expected 2 fields (label, text), found {}", record.len())));
                }
                out.push(RawExample {
                    label: record[0].trim().to_owned(),
                    text: record[1].to_owned(),
                    line,
                });
            }
        }
        Format::Jsonl => {
            for (i, raw) in content.lines().enumerate() {
                let line = i + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
                let label = match value.get("label") {
                    Some(Value::String(s)) => s.clone(),
                    Some(Value::Number(n)) if n.is_i64() || n.is_u64() => n.to_string(),
                    Some(_) => return Err(parse_err(line, "`label` must be a string or an integer".into())),
                    None => return Err(parse_err(line, "missing `label` field".into())),
                };
                let text = match value.get("text") {
                    Some(Value::String(s)) => s.clone(),
                    Some(_) => return Err(parse_err(line, "`text` must be a string".into())),
                    None => return Err(parse_err(line, "missing `text` field".into())),
                };
                out.push(RawExample { label, text, line });
            }
        }
    }
    Ok(out)
}

/// An encoded document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub label: usize,
    /// Exactly `L` ids, pad-filled.
    pub tokens: Vec<usize>,
    /// Non-pad length before padding.
    pub length: usize,
    pub raw_text: String,
}

/// Encodes examples against `vocab` and `labels`; unknown labels are errors.
pub fn encode_examples(examples: &[RawExample], vocab: &Vocabulary, labels: &LabelMap, len: usize) -> Result<Vec<Document>> {
    examples
        .iter()
        .map(|ex| {
            let label = labels
                .index(&ex.label)
                .ok_or_else(|| Error::Data(format!("line {}: unknown label `{}`", ex.line, ex.label)))?;
            let tokens = vocab.encode(&ex.text, len);
            Ok(Document {
                label,
                length: tokenize(&ex.text).len().min(len),
                tokens,
                raw_text: ex.text.clone(),
            })
        })
        .collect()
}

/// A loaded, encoded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub docs: Vec<Document>,
    pub seq_len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn token_rows(&self) -> impl Iterator<Item = &[usize]> {
        self.docs.iter().map(|d| d.tokens.as_slice())
    }

    /// Batches in file order, or shuffled by `seed`. The last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> Vec<Batch> {
        make_batches(&self.docs, self.seq_len, batch_size, seed)
    }
}

pub fn make_batches(docs: &[Document], seq_len: usize, batch_size: usize, seed: Option<u64>) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut token_ids = Vec::with_capacity(chunk.len() * seq_len);
            for &i in chunk {
                debug_assert_eq!(docs[i].tokens.len(), seq_len);
                token_ids.extend_from_slice(&docs[i].tokens);
            }
            Batch {
                token_ids,
                seq_len,
                labels: chunk.iter().map(|&i| docs[i].label).collect(),
                lengths: chunk.iter().map(|&i| docs[i].length).collect(),
            }
        })
        .collect()
}

/// Counts of non-pad ids; used to check padding never changes content.
pub fn content_ids(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != PAD_ID).collect()
}
