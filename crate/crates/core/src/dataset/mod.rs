//! Dataset processing: loading, column mapping, chat templates, splitting,
//! fingerprinting and the on-disk processed-dataset cache.

mod cache;
mod load;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ChatTemplateId, ColumnMapping, ColumnSource, ValidatedProject};
use crate::registry::{TaskId, TaskSpec};
use crate::rng::RngStream;

pub use cache::{cache_lookup, cache_path, cache_store, CACHE_FORMAT_VERSION};
pub use load::{detect_format, load_dataset, LoadContext};
pub use template::{as_messages, render_chat_template, ChatMessage, ChatRole, ChatTemplate};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("UnsupportedFormat: `{0}`")]
    UnsupportedFormat(String),
    #[error("SplitNotFound: `{0}`")]
    SplitNotFound(String),
    #[error("HubFetchFailed: {0}")]
    HubFetchFailed(String),
    #[error("FileCorrupt: {file} at record {record}: {message}")]
    FileCorrupt {
        file: String,
        record: usize,
        message: String,
    },
    #[error("InconsistentSchema: split `{split}` record {record} has a different key set")]
    InconsistentSchema { split: String, record: usize },
    #[error("SourceColumnMissing: column `{column}` absent in split `{split}` record {record}")]
    SourceColumnMissing {
        column: String,
        split: String,
        record: usize,
    },
    #[error("EmptyMessages: a chat template needs at least one message")]
    EmptyMessages,
    #[error("TooFewRecords: splitting needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("InvalidFraction: {0} is not in (0, 1)")]
    InvalidFraction(f64),
    #[error("CacheCorrupt: {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }

    /// Record index the error points at, when it points at one.
    pub fn record_index(&self) -> Option<usize> {
        match self {
            DatasetError::FileCorrupt { record, .. }
            | DatasetError::InconsistentSchema { record, .. }
            | DatasetError::SourceColumnMissing { record, .. } => Some(*record),
            _ => None,
        }
    }
}

/// One row; keys are column names before mapping and role names after.
pub type Record = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    LocalPath,
    HubDatasetId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    Jsonl,
    ImageZip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub source: DataSource,
    pub format: DataFormat,
    pub splits: BTreeMap<String, Vec<Record>>,
}

impl RawDataset {
    pub fn from_splits(splits: BTreeMap<String, Vec<Record>>) -> Self {
        RawDataset {
            source: DataSource::LocalPath,
            format: DataFormat::Jsonl,
            splits,
        }
    }

    /// Checks every split has one key set shared by all its records.
    pub fn check_rectangular(&self) -> Result<(), DatasetError> {
        for (split, records) in &self.splits {
            let Some(first) = records.first() else { continue };
            for (i, r) in records.iter().enumerate() {
                if r.len() != first.len() || !r.keys().eq(first.keys()) {
                    return Err(DatasetError::InconsistentSchema {
                        split: split.clone(),
                        record: i,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Null,
    Bool,
    Number,
    Text,
    List,
    Object,
    Mixed,
}

fn kind_of(v: &Value) -> ValueKind {
    match v {
        Value::Null => ValueKind::Null,
        Value::Bool(_) => ValueKind::Bool,
        Value::Number(_) => ValueKind::Number,
        Value::String(_) => ValueKind::Text,
        Value::Array(_) => ValueKind::List,
        Value::Object(_) => ValueKind::Object,
    }
}

/// Everything besides the raw rows that shapes the processed output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingOptions {
    pub train_split: String,
    pub valid_split: Option<String>,
    pub chat_template: Option<ChatTemplateId>,
    pub column_mapping: ColumnMapping,
    pub auto_valid_fraction: Option<f64>,
    pub split_seed: u64,
}

impl ProcessingOptions {
    pub fn from_project(project: &ValidatedProject) -> Self {
        let data = &project.config.data;
        let fraction = project
            .params
            .float("auto_valid_fraction")
            .filter(|f| *f > 0.0 && data.valid_split.is_none());
        ProcessingOptions {
            train_split: data.train_split.clone(),
            valid_split: data.valid_split.clone(),
            chat_template: data.chat_template,
            column_mapping: data.column_mapping.clone(),
            auto_valid_fraction: fraction,
            split_seed: project.params.int("seed").unwrap_or(42) as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedDataset {
    pub task: TaskId,
    pub train: Vec<Record>,
    pub valid: Option<Vec<Record>>,
    pub schema: Vec<(String, ValueKind)>,
    pub options: ProcessingOptions,
    pub fingerprint: String,
}

impl ProcessedDataset {
    /// Builds the dataset and stamps its fingerprint.
    pub fn new(
        task: TaskId,
        train: Vec<Record>,
        valid: Option<Vec<Record>>,
        options: ProcessingOptions,
    ) -> Self {
        let schema = infer_schema(&train);
        let mut ds = ProcessedDataset {
            task,
            train,
            valid,
            schema,
            options,
            fingerprint: String::new(),
        };
        ds.fingerprint = fingerprint(&ds);
        ds
    }

    pub fn rows(&self) -> usize {
        self.train.len() + self.valid.as_ref().map_or(0, Vec::len)
    }
}

fn infer_schema(records: &[Record]) -> Vec<(String, ValueKind)> {
    let mut kinds: BTreeMap<String, ValueKind> = BTreeMap::new();
    for r in records {
        for (k, v) in r {
            let kind = kind_of(v);
            kinds
                .entry(k.clone())
                .and_modify(|existing| {
                    if *existing == ValueKind::Null {
                        *existing = kind;
                    } else if kind != ValueKind::Null && *existing != kind {
                        *existing = ValueKind::Mixed;
                    }
                })
                .or_insert(kind);
        }
    }
    kinds.into_iter().collect()
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    version: u8,
    task: &'a TaskId,
    schema: &'a [(String, ValueKind)],
    options: &'a ProcessingOptions,
    train: &'a [Record],
    valid: &'a Option<Vec<Record>>,
}

/// SHA-256 over the canonical JSON of task, schema, options and records.
pub fn fingerprint(ds: &ProcessedDataset) -> String {
    let input = FingerprintInput {
        version: 1,
        task: &ds.task,
        schema: &ds.schema,
        options: &ds.options,
        train: &ds.train,
        valid: &ds.valid,
    };
    let bytes = serde_json::to_vec(&input).expect("records are plain JSON");
    hex::encode(Sha256::digest(&bytes))
}

/// Renames source columns to role names, dropping everything unmapped.
///
/// An unmapped multi-column role (tabular `feature_columns`) collects every
/// column not claimed by another role.
pub fn apply_column_mapping(
    raw: &RawDataset,
    mapping: &ColumnMapping,
    spec: &TaskSpec,
) -> Result<BTreeMap<String, Vec<Record>>, DatasetError> {
    let claimed: BTreeSet<&str> = mapping.values().flat_map(ColumnSource::columns).collect();
    let implicit_multi: Vec<&str> = spec
        .column_roles
        .iter()
        .filter(|r| r.multi && !mapping.contains_key(r.name))
        .map(|r| r.name)
        .collect();

    let mut out = BTreeMap::new();
    for (split, records) in &raw.splits {
        let mut mapped = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let lookup = |column: &str| {
                rec.get(column).cloned().ok_or_else(|| DatasetError::SourceColumnMissing {
                    column: column.to_string(),
                    split: split.clone(),
                    record: i,
                })
            };
            let mut row = Record::new();
            for (role, source) in mapping {
                let value = match source {
                    ColumnSource::One(column) => lookup(column)?,
                    ColumnSource::Many(columns) => {
                        let mut obj = serde_json::Map::new();
                        for c in columns {
                            obj.insert(c.clone(), lookup(c)?);
                        }
                        Value::Object(obj)
                    }
                };
                row.insert(role.clone(), value);
            }
            for role in &implicit_multi {
                let obj: serde_json::Map<String, Value> = rec
                    .iter()
                    .filter(|(k, _)| !claimed.contains(k.as_str()))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                row.insert(role.to_string(), Value::Object(obj));
            }
            mapped.push(row);
        }
        out.insert(split.clone(), mapped);
    }
    Ok(out)
}

/// Renders message-list values through the template; other values pass through.
pub fn apply_chat_template(records: &mut [Record], template: Option<ChatTemplateId>) -> Result<(), DatasetError> {
    let Some(template) = template.and_then(ChatTemplate::from_config) else {
        return Ok(());
    };
    for rec in records {
        for value in rec.values_mut() {
            if let Some(messages) = as_messages(value) {
                *value = Value::String(render_chat_template(template, &messages)?);
            }
        }
    }
    Ok(())
}

/// Seeded shuffle, then the last `ceil(fraction * n)` records become validation.
pub fn split_dataset(
    records: Vec<Record>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Record>, Vec<Record>), DatasetError> {
    let n = records.len();
    if n < 2 {
        return Err(DatasetError::TooFewRecords(n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let n_valid = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let order = RngStream::new(seed, "data/split").permutation(n);
    let mut slots: Vec<Option<Record>> = records.into_iter().map(Some).collect();
    let mut shuffled: Vec<Record> = order
        .into_iter()
        .map(|i| slots[i].take().expect("permutation visits each index once"))
        .collect();
    let valid = shuffled.split_off(n - n_valid);
    Ok((shuffled, valid))
}

/// Full processing of a loaded dataset for a validated project.
pub fn process_dataset(raw: &RawDataset, project: &ValidatedProject) -> Result<ProcessedDataset, DatasetError> {
    let options = ProcessingOptions::from_project(project);
    process_with_options(raw, project.spec, options)
}

pub fn process_with_options(
    raw: &RawDataset,
    spec: &TaskSpec,
    options: ProcessingOptions,
) -> Result<ProcessedDataset, DatasetError> {
    raw.check_rectangular()?;
    let mut splits = apply_column_mapping(raw, &options.column_mapping, spec)?;
    let mut train = splits
        .remove(&options.train_split)
        .ok_or_else(|| DatasetError::SplitNotFound(options.train_split.clone()))?;
    let mut valid = match &options.valid_split {
        Some(name) => Some(
            splits
                .remove(name)
                .ok_or_else(|| DatasetError::SplitNotFound(name.clone()))?,
        ),
        None => None,
    };
    apply_chat_template(&mut train, options.chat_template)?;
    if let Some(v) = valid.as_mut() {
        apply_chat_template(v, options.chat_template)?;
    }
    if let (None, Some(fraction)) = (&valid, options.auto_valid_fraction) {
        let (t, v) = split_dataset(train, fraction, options.split_seed)?;
        train = t;
        valid = Some(v);
    }
    Ok(ProcessedDataset::new(spec.id.clone(), train, valid, options))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::resolve_task;
    use proptest::prelude::*;
    use serde_json::json;

    fn rec(pairs: &[(&str, Value)]) -> Record {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn orpo_mapping() -> ColumnMapping {
        [
            ("text_column", "chosen"),
            ("rejected_text_column", "rejected"),
            ("prompt_text_column", "prompt"),
        ]
        .into_iter()
        .map(|(r, c)| (r.to_string(), ColumnSource::One(c.to_string())))
        .collect()
    }

    fn options(mapping: ColumnMapping) -> ProcessingOptions {
        ProcessingOptions {
            train_split: "train".into(),
            valid_split: None,
            chat_template: None,
            column_mapping: mapping,
            auto_valid_fraction: None,
            split_seed: 42,
        }
    }

    #[test]
    fn mapping_renames_and_drops() {
        let raw = RawDataset::from_splits(
            [(
                "train".to_string(),
                vec![rec(&[
                    ("chosen", json!("A")),
                    ("rejected", json!("B")),
                    ("prompt", json!("P")),
                    ("extra", json!(1)),
                ])],
            )]
            .into(),
        );
        let spec = resolve_task("llm:orpo").unwrap();
        let out = apply_column_mapping(&raw, &orpo_mapping(), spec).unwrap();
        assert_eq!(
            out["train"][0],
            rec(&[
                ("text_column", json!("A")),
                ("rejected_text_column", json!("B")),
                ("prompt_text_column", json!("P")),
            ])
        );
    }

    #[test]
    fn identity_mapping_keeps_role_keys() {
        let row = rec(&[("text_column", json!("hello")), ("target_column", json!("pos"))]);
        let raw = RawDataset::from_splits([("train".to_string(), vec![row.clone()])].into());
        let mapping: ColumnMapping = ["text_column", "target_column"]
            .into_iter()
            .map(|r| (r.to_string(), ColumnSource::One(r.to_string())))
            .collect();
        let spec = resolve_task("text-classification").unwrap();
        assert_eq!(apply_column_mapping(&raw, &mapping, spec).unwrap()["train"][0], row);
    }

    #[test]
    fn typo_column_is_reported() {
        let raw = RawDataset::from_splits(
            [(
                "train".to_string(),
                vec![rec(&[("chosen", json!("A")), ("rejected", json!("B")), ("prompt", json!("P"))])],
            )]
            .into(),
        );
        let mut mapping = orpo_mapping();
        mapping.insert("text_column".into(), ColumnSource::One("chosn".into()));
        let spec = resolve_task("llm:orpo").unwrap();
        match apply_column_mapping(&raw, &mapping, spec) {
            Err(DatasetError::SourceColumnMissing { column, record, .. }) => {
                assert_eq!(column, "chosn");
                assert_eq!(record, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tabular_features_default_to_unclaimed_columns() {
        let raw = RawDataset::from_splits(
            [(
                "train".to_string(),
                vec![rec(&[("x1", json!(1.5)), ("x2", json!("red")), ("y", json!(3))])],
            )]
            .into(),
        );
        let mapping: ColumnMapping = [("target_column".to_string(), ColumnSource::One("y".into()))].into();
        let spec = resolve_task("tabular:regression").unwrap();
        let out = apply_column_mapping(&raw, &mapping, spec).unwrap();
        assert_eq!(out["train"][0]["feature_columns"], json!({"x1": 1.5, "x2": "red"}));
        assert_eq!(out["train"][0]["target_column"], json!(3));
    }

    #[test]
    fn template_applies_only_to_message_lists() {
        let mut records = vec![rec(&[
            ("text_column", json!([{"role": "user", "content": "hi"}])),
            ("prompt_text_column", json!("plain")),
        ])];
        apply_chat_template(&mut records, Some(ChatTemplateId::Zephyr)).unwrap();
        assert_eq!(records[0]["text_column"], json!("<|user|>\nhi</s>\n<|assistant|>\n"));
        assert_eq!(records[0]["prompt_text_column"], json!("plain"));
    }

    #[test]
    fn split_examples() {
        let records: Vec<Record> = (0..10).map(|i| rec(&[("i", json!(i))])).collect();
        let (t, v) = split_dataset(records.clone(), 0.2, 7).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t2, v2) = split_dataset(records, 0.2, 7).unwrap();
        assert_eq!((t, v), (t2, v2));

        let two: Vec<Record> = (0..2).map(|i| rec(&[("i", json!(i))])).collect();
        let (t, v) = split_dataset(two, 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));

        let one = vec![rec(&[("i", json!(0))])];
        assert!(matches!(split_dataset(one, 0.5, 1), Err(DatasetError::TooFewRecords(1))));
    }

    #[test]
    fn fingerprint_examples() {
        let records: Vec<Record> = (0..4).map(|i| rec(&[("text_column", json!(format!("r{i}")))])).collect();
        let task: TaskId = "llm:sft".parse().unwrap();
        let mapping: ColumnMapping = [("text_column".to_string(), ColumnSource::One("t".into()))].into();
        let a = ProcessedDataset::new(task.clone(), records.clone(), None, options(mapping.clone()));
        let b = ProcessedDataset::new(task.clone(), records.clone(), None, options(mapping.clone()));
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a.fingerprint.len(), 64);
        assert!(a.fingerprint.chars().all(|c| c.is_ascii_hexdigit()));

        let mut changed = records.clone();
        changed[2].insert("text_column".into(), json!("other"));
        let c = ProcessedDataset::new(task.clone(), changed, None, options(mapping.clone()));
        assert_ne!(a.fingerprint, c.fingerprint);

        let mut swapped = records.clone();
        swapped.swap(0, 1);
        let d = ProcessedDataset::new(task.clone(), swapped, None, options(mapping.clone()));
        assert_ne!(a.fingerprint, d.fingerprint);

        let mut opts = options(mapping);
        opts.chat_template = Some(ChatTemplateId::Chatml);
        let e = ProcessedDataset::new(task, records, None, opts);
        assert_ne!(a.fingerprint, e.fingerprint);
    }

    #[test]
    fn ragged_split_is_rejected() {
        let raw = RawDataset::from_splits(
            [(
                "train".to_string(),
                vec![rec(&[("a", json!(1))]), rec(&[("b", json!(1))])],
            )]
            .into(),
        );
        assert!(matches!(
            raw.check_rectangular(),
            Err(DatasetError::InconsistentSchema { record: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 2usize..60, fraction in 0.01f64..0.99, seed in any::<u64>()) {
            let records: Vec<Record> = (0..n).map(|i| rec(&[("i", json!(i))])).collect();
            let (train, valid) = split_dataset(records, fraction, seed).unwrap();
            prop_assert_eq!(train.len() + valid.len(), n);
            prop_assert!(!train.is_empty() && !valid.is_empty());
            let mut ids: Vec<u64> = train.iter().chain(&valid).map(|r| r["i"].as_u64().unwrap()).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }

        #[test]
        fn mapping_preserves_counts(sizes in prop::collection::vec(0usize..8, 1..4)) {
            let splits: BTreeMap<String, Vec<Record>> = sizes
                .iter()
                .enumerate()
                .map(|(s, &n)| {
                    let rows = (0..n).map(|i| rec(&[("t", json!(format!("{s}-{i}"))), ("l", json!(i % 2))])).collect();
                    (format!("s{s}"), rows)
                })
                .collect();
            let raw = RawDataset::from_splits(splits);
            let mapping: ColumnMapping = [
                ("text_column".to_string(), ColumnSource::One("t".into())),
                ("target_column".to_string(), ColumnSource::One("l".into())),
            ].into();
            let spec = resolve_task("text-classification").unwrap();
            let out = apply_column_mapping(&raw, &mapping, spec).unwrap();
            for (name, rows) in &raw.splits {
                prop_assert_eq!(out[name].len(), rows.len());
            }
        }
    }
}
