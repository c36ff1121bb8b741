//! Dataset ingestion, four-option normalization and seeded sampling.
//!
//! Input is a neutral schema. JSONL, one object per line:
//!
//! ```text
//! {"id": "q1", "question": "...", "options": ["...", "..."], "answer_index": 0}
//! ```
//!
//! CSV uses a header row `id,question,option_1,...,option_k,answer_index`;
//! empty option cells are skipped so rows may carry different option counts.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::{McqaError, Question, OPTION_COUNT};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate question id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("question {id}: {found} options, at least {OPTION_COUNT} required")]
    TooFewOptions { id: String, found: usize },
    #[error("requested {requested} questions but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Invalid(#[from] McqaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guesses the format from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

/// A dataset item before normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub id: String,
    #[serde(rename = "question")]
    pub stem: String,
    pub options: Vec<String>,
    #[serde(rename = "answer_index")]
    pub gold_index: usize,
}

impl RawQuestion {
    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.stem.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.options.len() < 2 {
            return Err(format!("{} options, at least 2 required", self.options.len()));
        }
        if self.gold_index >= self.options.len() {
            return Err(format!(
                "answer_index {} out of range for {} options",
                self.gold_index,
                self.options.len()
            ));
        }
        let mut seen = HashSet::new();
        for text in &self.options {
            if text.trim().is_empty() {
                return Err("empty option text".into());
            }
            if !seen.insert(text.as_str()) {
                return Err(format!("duplicate option {text:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub item_count: usize,
    pub normalization_seed: u64,
    pub sample_seed: u64,
}

/// Loads every item of a dataset file in file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<RawQuestion>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let items = match format {
        DatasetFormat::Jsonl => read_jsonl(BufReader::new(file)).map_err(|e| match e {
            LineError::Io(source) => io_err(source),
            LineError::Dataset(e) => e,
        })?,
        DatasetFormat::Csv => read_csv(file)?,
    };
    Ok(items)
}

enum LineError {
    Io(std::io::Error),
    Dataset(DatasetError),
}

fn read_jsonl(reader: impl BufRead) -> Result<Vec<RawQuestion>, LineError> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(LineError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let item: RawQuestion = serde_json::from_str(&line).map_err(|e| {
            LineError::Dataset(DatasetError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })
        })?;
        accept(item, line_no, &mut ids, &mut items).map_err(LineError::Dataset)?;
    }
    Ok(items)
}

fn accept(
    item: RawQuestion,
    line: usize,
    ids: &mut HashSet<String>,
    items: &mut Vec<RawQuestion>,
) -> Result<(), DatasetError> {
    item.check()
        .map_err(|reason| DatasetError::Malformed { line, reason })?;
    if !ids.insert(item.id.clone()) {
        return Err(DatasetError::DuplicateId { id: item.id, line });
    }
    items.push(item);
    Ok(())
}

fn read_csv(file: File) -> Result<Vec<RawQuestion>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing = |name: &str| DatasetError::Malformed {
        line: 1,
        reason: format!("missing column {name:?}"),
    };
    let id_col = column("id").ok_or_else(|| missing("id"))?;
    let stem_col = column("question").ok_or_else(|| missing("question"))?;
    let answer_col = column("answer_index").ok_or_else(|| missing("answer_index"))?;
    let mut option_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            h.trim()
                .strip_prefix("option_")
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, col))
        })
        .collect();
    option_cols.sort_unstable();

    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DatasetError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let gold_index = field(answer_col)
            .trim()
            .parse::<usize>()
            .map_err(|e| DatasetError::Malformed {
                line,
                reason: format!("answer_index: {e}"),
            })?;
        let item = RawQuestion {
            id: field(id_col).to_string(),
            stem: field(stem_col).to_string(),
            options: option_cols
                .iter()
                .map(|&(_, col)| field(col))
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect(),
            gold_index,
        };
        accept(item, line, &mut ids, &mut items)?;
    }
    Ok(items)
}

/// Writes items as JSONL in the ingestion schema.
pub fn write_jsonl(path: &Path, items: &[RawQuestion]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        let line = serde_json::to_string(item).expect("RawQuestion serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reduces an item to exactly four options.
///
/// Four-option items pass through. Larger items keep the gold option plus
/// three distractors drawn uniformly without replacement; kept options retain
/// their original relative order.
pub fn normalize_to_four(raw: &RawQuestion, seed: u64) -> Result<Question, DatasetError> {
    let n = raw.options.len();
    if n < OPTION_COUNT {
        return Err(DatasetError::TooFewOptions {
            id: raw.id.clone(),
            found: n,
        });
    }
    if n == OPTION_COUNT {
        return Ok(Question::new(
            raw.id.clone(),
            raw.stem.clone(),
            raw.options.clone(),
            raw.gold_index,
        )?);
    }
    let distractors: Vec<usize> = (0..n).filter(|&i| i != raw.gold_index).collect();
    let mut rng = rng_for(seed, &["normalize", &raw.id]);
    let mut keep: Vec<usize> = index::sample(&mut rng, distractors.len(), OPTION_COUNT - 1)
        .into_iter()
        .map(|k| distractors[k])
        .collect();
    keep.push(raw.gold_index);
    keep.sort_unstable();
    let gold_index = keep
        .iter()
        .position(|&i| i == raw.gold_index)
        .expect("gold kept");
    let options = keep.iter().map(|&i| raw.options[i].clone()).collect();
    Ok(Question::new(
        raw.id.clone(),
        raw.stem.clone(),
        options,
        gold_index,
    )?)
}

/// Uniform sample of `n` items without replacement, in sampled order.
pub fn sample_questions(
    items: &[Question],
    n: usize,
    seed: u64,
) -> Result<Vec<Question>, DatasetError> {
    if n > items.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: items.len(),
        });
    }
    let mut rng = rng_for(seed, &["sample"]);
    Ok(index::sample(&mut rng, items.len(), n)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Loads, normalizes and samples in one step.
pub fn prepare(manifest: &DatasetManifest, n: usize) -> Result<Vec<Question>, DatasetError> {
    let raw = load_dataset(&manifest.path, manifest.format)?;
    let normalized = raw
        .iter()
        .map(|r| normalize_to_four(r, manifest.normalization_seed))
        .collect::<Result<Vec<_>, _>>()?;
    sample_questions(&normalized, n, manifest.sample_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, k: usize, gold: usize) -> RawQuestion {
        RawQuestion {
            id: id.into(),
            stem: format!("stem {id}"),
            options: (0..k).map(|i| format!("{id}-opt{i}")).collect(),
            gold_index: gold,
        }
    }

    #[test]
    fn jsonl_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","question":"Q1","options":["x","y","z","w"],"answer_index":0}"#, "\n",
                r#"{"id":"b","question":"Q2","options":["x","y","z","w"],"answer_index":3}"#, "\n",
                "\n",
                r#"{"id":"c","question":"Q3","options":["x","y","z","w","v"],"answer_index":1}"#, "\n",
            ),
        )
        .unwrap();
        let items = load_dataset(&path, DatasetFormat::Jsonl).unwrap();
        let ids: Vec<_> = items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn jsonl_positioned_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","question":"Q1","options":["x","y"],"answer_index":0}"#, "\n",
                r#"{"id":"b","question":"Q2","options":["x","y"],"answer_index":2}"#, "\n",
            ),
        )
        .unwrap();
        match load_dataset(&path, DatasetFormat::Jsonl) {
            Err(DatasetError::Malformed { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","question":"Q1","options":["x","y"],"answer_index":0}"#, "\n",
                r#"{"id":"a","question":"Q2","options":["x","y"],"answer_index":1}"#, "\n",
            ),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetFormat::Jsonl),
            Err(DatasetError::DuplicateId { line: 2, .. })
        ));
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetFormat::Jsonl),
            Err(DatasetError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("missing.jsonl"), DatasetFormat::Jsonl),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn csv_with_ragged_options() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "id,question,option_1,option_2,option_3,option_4,option_5,answer_index\n\
             a,\"Q, one\",w,x,y,z,,2\n\
             b,Q2,p,q,r,s,t,4\n",
        )
        .unwrap();
        let items = load_dataset(&path, DatasetFormat::Csv).unwrap();
        assert_eq!(items[0].stem, "Q, one");
        assert_eq!(items[0].options, ["w", "x", "y", "z"]);
        assert_eq!(items[1].options.len(), 5);
        assert_eq!(items[1].gold_index, 4);

        std::fs::write(&path, "id,question,option_1,option_2,answer_index\na,Q,x,y,7\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetFormat::Csv),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn normalization_cases() {
        let four = raw("a", 4, 1);
        let q = normalize_to_four(&four, 3).unwrap();
        assert_eq!(q.options, four.options);
        assert_eq!(q.gold_index, 1);

        assert!(matches!(
            normalize_to_four(&raw("b", 3, 0), 1),
            Err(DatasetError::TooFewOptions { found: 3, .. })
        ));

        let ten = raw("c", 10, 7);
        for seed in 0..500 {
            let q = normalize_to_four(&ten, seed).unwrap();
            assert_eq!(q.options.len(), 4);
            assert_eq!(q.options[q.gold_index], ten.options[7]);
            let distractors: Vec<_> = q
                .options
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != q.gold_index)
                .map(|(_, t)| t)
                .collect();
            assert_eq!(distractors.len(), 3);
            for d in distractors {
                let pos = ten.options.iter().position(|o| o == d).unwrap();
                assert_ne!(pos, 7);
            }
        }
    }

    #[test]
    fn sampling_guards_and_permutation() {
        let items: Vec<Question> = (0..20)
            .map(|i| normalize_to_four(&raw(&format!("q{i}"), 4, 0), 0).unwrap())
            .collect();
        assert!(matches!(
            sample_questions(&items, 21, 0),
            Err(DatasetError::SampleTooLarge { requested: 21, available: 20 })
        ));
        let all = sample_questions(&items, 20, 5).unwrap();
        let mut ids: Vec<_> = all.iter().map(|q| q.id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = items.iter().map(|q| q.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert_eq!(sample_questions(&items, 7, 9).unwrap(), sample_questions(&items, 7, 9).unwrap());
    }
}
