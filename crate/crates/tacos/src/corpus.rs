//! Dataset loading, validation, and summary statistics.
//!
//! A [`Dataset`] owns the canonical sample identity used by every later
//! stage: when a record carries no `id` field, one is derived from the
//! sample content, so ids stay stable across files and re-runs.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Separator between fields when deriving a content id.
const FIELD_SEP: char = '\u{1F}';

/// One instruction/input/output triple, the unit of selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IftSample {
    pub id: String,
    pub instruction: String,
    /// Optional context for the instruction. Absent and empty are
    /// equivalent; both load as the empty string.
    #[serde(default)]
    pub input: String,
    pub output: String,
    pub source: String,
}

/// An ordered collection of samples. Iteration order is file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<IftSample>,
}

/// Input file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    JsonArray,
    Jsonl,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::JsonArray => write!(f, "json_array"),
            DatasetFormat::Jsonl => write!(f, "jsonl"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("duplicate id {id} (records {first} and {second})")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
}

/// Raw on-disk record. `id` and `source` are optional on input and always
/// present on output.
#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    instruction: Option<String>,
    input: Option<String>,
    output: Option<String>,
    source: Option<String>,
}

/// Derive the canonical id for a sample: SHA-256 over the 0x1F-joined
/// instruction/input/output fields, truncated to 16 hex chars.
pub fn content_id(instruction: &str, input: &str, output: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(instruction.as_bytes());
    hasher.update(FIELD_SEP.to_string().as_bytes());
    hasher.update(input.as_bytes());
    hasher.update(FIELD_SEP.to_string().as_bytes());
    hasher.update(output.as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a dataset from `path` in the declared format.
///
/// Records need `instruction` and `output` fields (`input` optional).
/// Ids are taken from the file when present, derived from content
/// otherwise, and must be unique either way. Invalid UTF-8 is a parse
/// error, not silently replaced: deterministic ids need deterministic
/// bytes.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CorpusError::Parse {
        location: format!("byte offset {}", e.valid_up_to()),
        message: "invalid UTF-8".into(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    let records: Vec<RawRecord> = match format {
        DatasetFormat::JsonArray => {
            serde_json::from_str(text).map_err(|e| CorpusError::Parse {
                location: format!("line {}, column {}", e.line(), e.column()),
                message: e.to_string(),
            })?
        }
        DatasetFormat::Jsonl => {
            let mut out = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RawRecord =
                    serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                        location: format!("line {}", lineno + 1),
                        message: e.to_string(),
                    })?;
                out.push(rec);
            }
            out
        }
    };

    let mut samples = Vec::with_capacity(records.len());
    let mut seen: HashSet<String> = HashSet::new();
    let mut first_index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (index, rec) in records.into_iter().enumerate() {
        let instruction = rec.instruction.ok_or_else(|| CorpusError::Schema {
            index,
            message: "missing field `instruction`".into(),
        })?;
        if instruction.trim().is_empty() {
            return Err(CorpusError::Schema {
                index,
                message: "`instruction` is empty".into(),
            });
        }
        let output = rec.output.ok_or_else(|| CorpusError::Schema {
            index,
            message: "missing field `output`".into(),
        })?;
        let input = rec.input.unwrap_or_default();
        let id = rec
            .id
            .unwrap_or_else(|| content_id(&instruction, &input, &output));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                first: first_index[&id],
                second: index,
                id,
            });
        }
        first_index.insert(id.clone(), index);
        samples.push(IftSample {
            id,
            instruction,
            input,
            output,
            source: rec.source.unwrap_or_else(|| name.clone()),
        });
    }
    Ok(Dataset { name, samples })
}

/// Write a dataset as JSONL in the corpus schema (`id`, `instruction`,
/// `input`, `output`, `source`), one record per line.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for s in &d.samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Length and count summary of a dataset. Lengths are measured in Unicode
/// scalar values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean_instruction_len: f64,
    pub max_instruction_len: usize,
    pub mean_output_len: f64,
    pub max_output_len: usize,
}

pub fn dataset_stats(d: &Dataset) -> Stats {
    if d.samples.is_empty() {
        return Stats {
            count: 0,
            mean_instruction_len: 0.0,
            max_instruction_len: 0,
            mean_output_len: 0.0,
            max_output_len: 0,
        };
    }
    let inst: Vec<usize> = d.samples.iter().map(|s| s.instruction.chars().count()).collect();
    let out: Vec<usize> = d.samples.iter().map(|s| s.output.chars().count()).collect();
    let n = d.samples.len() as f64;
    Stats {
        count: d.samples.len(),
        mean_instruction_len: inst.iter().sum::<usize>() as f64 / n,
        max_instruction_len: inst.iter().copied().max().unwrap_or(0),
        mean_output_len: out.iter().sum::<usize>() as f64 / n,
        max_output_len: out.iter().copied().max().unwrap_or(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn loads_three_records_with_distinct_ids() {
        let f = write_tmp(
            r#"{"instruction":"a","input":"","output":"x"}
{"instruction":"b","output":"y"}
{"instruction":"c","input":"ctx","output":"z"}"#,
            ".jsonl",
        );
        let d = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(d.samples.len(), 3);
        let ids: HashSet<_> = d.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn missing_output_reports_record_index() {
        let f = write_tmp(
            r#"{"instruction":"a","output":"x"}
{"instruction":"b"}
{"instruction":"c","output":"z"}"#,
            ".jsonl",
        );
        match load_dataset(f.path(), DatasetFormat::Jsonl) {
            Err(CorpusError::Schema { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("output"));
            }
            other => panic!("expected SchemaError, got {other:?}"),
        }
    }

    #[test]
    fn byte_identical_records_collide() {
        // Oracle: identical content must digest identically, so the second
        // record trips the uniqueness check. Recompute the digest here to
        // pin the collision down to the id derivation.
        let expected = {
            let mut h = Sha256::new();
            h.update("same\u{1F}\u{1F}thing".as_bytes());
            let d = h.finalize();
            d[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        assert_eq!(content_id("same", "", "thing"), expected);

        let f = write_tmp(
            r#"{"instruction":"same","output":"thing"}
{"instruction":"same","output":"thing"}"#,
            ".jsonl",
        );
        match load_dataset(f.path(), DatasetFormat::Jsonl) {
            Err(CorpusError::DuplicateId { id, first, second }) => {
                assert_eq!(id, expected);
                assert_eq!((first, second), (0, 1));
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn json_array_format_loads() {
        let f = write_tmp(
            r#"[{"instruction":"a","output":"x"},{"instruction":"b","input":"i","output":"y"}]"#,
            ".json",
        );
        let d = load_dataset(f.path(), DatasetFormat::JsonArray).unwrap();
        assert_eq!(d.samples.len(), 2);
        assert_eq!(d.samples[1].input, "i");
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let f = write_tmp("{\"instruction\":\"a\",\"output\":\"x\"}\nnot json\n", ".jsonl");
        match load_dataset(f.path(), DatasetFormat::Jsonl) {
            Err(CorpusError::Parse { location, .. }) => assert!(location.contains("line 2")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn empty_instruction_is_schema_error() {
        let f = write_tmp(r#"{"instruction":"   ","output":"x"}"#, ".jsonl");
        assert!(matches!(
            load_dataset(f.path(), DatasetFormat::Jsonl),
            Err(CorpusError::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn invalid_utf8_is_parse_error() {
        let f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        fs::write(f.path(), b"{\"instruction\":\"a\",\"output\":\"\xff\"}").unwrap();
        assert!(matches!(
            load_dataset(f.path(), DatasetFormat::Jsonl),
            Err(CorpusError::Parse { .. })
        ));
    }

    #[test]
    fn user_supplied_ids_are_kept_and_checked() {
        let f = write_tmp(
            r#"{"id":"k1","instruction":"a","output":"x"}
{"id":"k1","instruction":"b","output":"y"}"#,
            ".jsonl",
        );
        assert!(matches!(
            load_dataset(f.path(), DatasetFormat::Jsonl),
            Err(CorpusError::DuplicateId { .. })
        ));
    }

    #[test]
    fn stats_empty_dataset() {
        let d = Dataset { name: "empty".into(), samples: vec![] };
        let s = dataset_stats(&d);
        assert_eq!(s.count, 0);
        assert_eq!(s.max_instruction_len, 0);
        assert_eq!(s.mean_instruction_len, 0.0);
    }

    #[test]
    fn stats_lengths_in_scalar_values() {
        let sample = |i: &str, o: &str| IftSample {
            id: content_id(i, "", o),
            instruction: i.into(),
            input: String::new(),
            output: o.into(),
            source: "t".into(),
        };
        let d = Dataset {
            name: "t".into(),
            samples: vec![sample("abc", "xy"), sample("é∂", "wxyz")],
        };
        let s = dataset_stats(&d);
        assert_eq!(s.max_instruction_len, 3);
        assert_eq!(s.mean_instruction_len, 2.5);
        assert_eq!(s.mean_output_len, 3.0);
        assert_eq!(s.max_output_len, 4);
    }

    #[test]
    fn save_load_round_trip() {
        let d = Dataset {
            name: "t".into(),
            samples: vec![
                IftSample {
                    id: content_id("do it", "with this", "done"),
                    instruction: "do it".into(),
                    input: "with this".into(),
                    output: "done".into(),
                    source: "t".into(),
                },
                IftSample {
                    id: content_id("other", "", ""),
                    instruction: "other".into(),
                    input: String::new(),
                    output: String::new(),
                    source: "t".into(),
                },
            ],
        };
        let f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        save_dataset(&d, f.path()).unwrap();
        let d2 = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(d.samples, d2.samples);
    }

    proptest! {
        // Ids derive from content alone: permuting unrelated records never
        // changes a sample's id.
        #[test]
        fn ids_are_content_pure(texts in proptest::collection::vec("[a-z]{1,12}", 2..6)) {
            let recs: Vec<String> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| format!(r#"{{"instruction":"{t}","output":"out{i}"}}"#))
                .collect();
            let forward = write_tmp(&recs.join("\n"), ".jsonl");
            let reversed = write_tmp(
                &recs.iter().rev().cloned().collect::<Vec<_>>().join("\n"),
                ".jsonl",
            );
            let a = load_dataset(forward.path(), DatasetFormat::Jsonl).unwrap();
            let b = load_dataset(reversed.path(), DatasetFormat::Jsonl).unwrap();
            let mut ids_a: Vec<_> = a.samples.iter().map(|s| s.id.clone()).collect();
            let mut ids_b: Vec<_> = b.samples.iter().map(|s| s.id.clone()).collect();
            ids_a.sort();
            ids_b.sort();
            prop_assert_eq!(ids_a, ids_b);
        }
    }
}
