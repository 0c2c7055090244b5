//! JSONL ingestion with hashed bag-of-words features.
//!
//! Each input line is one multiple-choice record:
//!
//! ```json
//! {"context": "...", "question": "...", "candidates": ["a", "b"], "label": 0}
//! ```
//!
//! `context` may be empty or missing. Every `(context, question, candidate)`
//! triple is embedded by signed feature hashing of lowercased whitespace
//! unigrams and bigrams into a fixed number of buckets, L2-normalized.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::ChoiceInstance;
use crate::tasks::TaskDataset;

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    context: String,
    question: String,
    candidates: Vec<String>,
    label: usize,
}

/// FNV-1a; fixed constants keep hashes stable across platforms and runs.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Signed feature hash of token unigrams and bigrams from the concatenated
/// `(context, question, answer)` text. The top hash bit picks the sign, the
/// rest pick the bucket; the result is L2-normalized (all-empty text gives
/// the zero vector).
pub fn hash_features(context: &str, question: &str, answer: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "hash dimension must be at least 1");
    let text = format!("{context} {question} {answer}").to_lowercase();
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut v = vec![0.0; dim];
    let mut add = |term: &str| {
        let h = fnv1a64(term.as_bytes());
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    };
    for t in &tokens {
        add(t);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = kernels::l2_norm(&v);
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

/// Loads a JSONL file into a [`TaskDataset`], hashing candidate text into
/// `dim`-bucket feature vectors. Malformed lines, short candidate lists, and
/// out-of-range labels all report the 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>, dim: usize) -> Result<TaskDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "jsonl".to_owned());
    let reader = BufReader::new(File::open(path)?);

    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: lineno,
            message: e.to_string(),
        })?;
        if record.candidates.len() < 2 {
            return Err(Error::ParseError {
                line: lineno,
                message: format!("{} candidates, need at least 2", record.candidates.len()),
            });
        }
        if record.label >= record.candidates.len() {
            return Err(Error::ParseError {
                line: lineno,
                message: format!(
                    "label {} out of range for {} candidates",
                    record.label,
                    record.candidates.len()
                ),
            });
        }
        let features: Vec<Vec<f64>> = record
            .candidates
            .iter()
            .map(|c| hash_features(&record.context, &record.question, c, dim))
            .collect();
        instances.push(ChoiceInstance::new(features, record.label).map_err(|e| {
            Error::ParseError {
                line: lineno,
                message: e.to_string(),
            }
        })?);
    }
    if instances.is_empty() {
        return Err(Error::EmptyBatch(format!(
            "no records in {}",
            path.display()
        )));
    }
    TaskDataset::new(name, instances)
}
