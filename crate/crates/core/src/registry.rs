//! Static task registry.
//!
//! Every supported task is listed here with its dataset column roles, its
//! parameter schema and the trainer binding that executes it. The table is
//! compiled in and immutable; external adapters are bound separately (see
//! [`crate::trainer::TrainerBindings`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("UnknownTask: `{id}` is not a registered task (nearest: {})", nearest.join(", "))]
    UnknownTask { id: String, nearest: Vec<String> },
    #[error("MalformedTaskId: `{0}` (expected `family` or `family:subtype`)")]
    MalformedTaskId(String),
    #[error("UnknownParam: `{0}` is not a parameter of this task")]
    UnknownParam(String),
    #[error("TypeMismatch: `{name}` expects {expected}, got {got}")]
    TypeMismatch {
        name: String,
        expected: &'static str,
        got: String,
    },
    #[error("OutOfBounds: `{name}` must be {bound}")]
    OutOfBounds { name: String, bound: String },
}

/// Task identifier, `family` or `family:subtype`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    pub family: String,
    pub subtype: Option<String>,
}

impl TaskId {
    pub fn new(family: &str, subtype: Option<&str>) -> Self {
        Self {
            family: family.to_string(),
            subtype: subtype.map(str::to_string),
        }
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subtype {
            Some(sub) => write!(f, "{}:{}", self.family, sub),
            None => f.write_str(&self.family),
        }
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

impl FromStr for TaskId {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let mut parts = s.split(':');
        let family = parts.next().unwrap_or_default();
        let subtype = parts.next();
        if parts.next().is_some() || !is_ident(family) || subtype.is_some_and(|t| !is_ident(t)) {
            return Err(RegistryError::MalformedTaskId(s.to_string()));
        }
        Ok(TaskId::new(family, subtype))
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    Image,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    ModelWeights,
    TabularModel,
    AdapterDelegated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerBinding {
    Reference,
    ExternalAdapter,
}

/// A dataset column role such as `text_column`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRole {
    pub name: &'static str,
    pub required: bool,
    /// Role may map to several source columns (tabular features).
    pub multi: bool,
}

const fn role(name: &'static str) -> ColumnRole {
    ColumnRole {
        name,
        required: true,
        multi: false,
    }
}

const fn optional_role(name: &'static str) -> ColumnRole {
    ColumnRole {
        name,
        required: false,
        multi: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Int,
    Float,
    Bool,
    String,
    Enum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    fn describe(&self) -> String {
        match self {
            ParamValue::Bool(b) => format!("bool {b}"),
            ParamValue::Int(i) => format!("int {i}"),
            ParamValue::Float(x) => format!("float {x}"),
            ParamValue::Str(s) => format!("string {s:?}"),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(x) => Some(*x),
            ParamValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x:e}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

/// Parameter values keyed by name.
pub type ParamSet = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Constraint {
    None,
    IntRange(i64, i64),
    FloatRange(f64, f64),
    OneOf(&'static [&'static str]),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDef {
    pub name: &'static str,
    pub kind: ParamKind,
    pub default: ParamValue,
    pub constraint: Constraint,
    pub help: &'static str,
}

impl ParamDef {
    /// Type-checks and bounds-checks a value, coercing ints into float params.
    pub fn check(&self, value: &ParamValue) -> Result<ParamValue, RegistryError> {
        let mismatch = |expected: &'static str| RegistryError::TypeMismatch {
            name: self.name.to_string(),
            expected,
            got: value.describe(),
        };
        let out_of_bounds = |bound: String| RegistryError::OutOfBounds {
            name: self.name.to_string(),
            bound,
        };
        match self.kind {
            ParamKind::Int => {
                let v = value.as_i64().ok_or_else(|| mismatch("int"))?;
                if let Constraint::IntRange(lo, hi) = self.constraint {
                    if v < lo || v > hi {
                        return Err(out_of_bounds(format!("in [{lo}, {hi}]")));
                    }
                }
                Ok(ParamValue::Int(v))
            }
            ParamKind::Float => {
                let v = value.as_f64().ok_or_else(|| mismatch("float"))?;
                if !v.is_finite() {
                    return Err(out_of_bounds("finite".into()));
                }
                if let Constraint::FloatRange(lo, hi) = self.constraint {
                    if v < lo || v > hi {
                        return Err(out_of_bounds(format!("in [{lo}, {hi}]")));
                    }
                }
                Ok(ParamValue::Float(v))
            }
            ParamKind::Bool => value
                .as_bool()
                .map(ParamValue::Bool)
                .ok_or_else(|| mismatch("bool")),
            ParamKind::String => value
                .as_str()
                .map(|s| ParamValue::Str(s.to_string()))
                .ok_or_else(|| mismatch("string")),
            ParamKind::Enum => {
                let s = value.as_str().ok_or_else(|| mismatch("string"))?;
                if let Constraint::OneOf(allowed) = self.constraint {
                    if !allowed.contains(&s) {
                        return Err(out_of_bounds(format!("one of {}", allowed.join("|"))));
                    }
                }
                Ok(ParamValue::Str(s.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub modality: Modality,
    pub column_roles: Vec<ColumnRole>,
    pub param_schema: Vec<ParamDef>,
    pub artifact_kind: ArtifactKind,
    pub trainer_binding: TrainerBinding,
}

impl TaskSpec {
    pub fn role(&self, name: &str) -> Option<&ColumnRole> {
        self.column_roles.iter().find(|r| r.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&ParamDef> {
        self.param_schema.iter().find(|p| p.name == name)
    }

    pub fn required_roles(&self) -> impl Iterator<Item = &ColumnRole> {
        self.column_roles.iter().filter(|r| r.required)
    }
}

/// Params validated and completed from the task's defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedParams(ParamSet);

impl ValidatedParams {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.0.get(name)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(ParamValue::as_i64)
    }

    pub fn float(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }

    pub fn bool(&self, name: &str) -> Option<bool> {
        self.get(name).and_then(ParamValue::as_bool)
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(ParamValue::as_str)
    }

    pub fn as_set(&self) -> &ParamSet {
        &self.0
    }

    pub fn into_set(self) -> ParamSet {
        self.0
    }
}

pub fn default_params(spec: &TaskSpec) -> ParamSet {
    spec.param_schema
        .iter()
        .map(|p| (p.name.to_string(), p.default.clone()))
        .collect()
}

pub fn validate_params(spec: &TaskSpec, params: &ParamSet) -> Result<ValidatedParams, RegistryError> {
    let mut out = default_params(spec);
    for (name, value) in params {
        let def = spec
            .param(name)
            .ok_or_else(|| RegistryError::UnknownParam(name.clone()))?;
        out.insert(name.clone(), def.check(value)?);
    }
    Ok(ValidatedParams(out))
}

// ---------------------------------------------------------------------------
// Schema table
// ---------------------------------------------------------------------------

const OPTIMIZERS: &[&str] = &["adamw_torch", "sgd"];
const SCHEDULERS: &[&str] = &["linear", "cosine", "constant"];
const PRECISIONS: &[&str] = &["none", "fp16", "bf16"];
const QUANTIZATIONS: &[&str] = &["none", "int4", "int8"];
const PADDING_SIDES: &[&str] = &["right", "left"];

fn int(name: &'static str, default: i64, lo: i64, hi: i64, help: &'static str) -> ParamDef {
    ParamDef {
        name,
        kind: ParamKind::Int,
        default: ParamValue::Int(default),
        constraint: Constraint::IntRange(lo, hi),
        help,
    }
}

fn float(name: &'static str, default: f64, lo: f64, hi: f64, help: &'static str) -> ParamDef {
    ParamDef {
        name,
        kind: ParamKind::Float,
        default: ParamValue::Float(default),
        constraint: Constraint::FloatRange(lo, hi),
        help,
    }
}

fn boolean(name: &'static str, default: bool, help: &'static str) -> ParamDef {
    ParamDef {
        name,
        kind: ParamKind::Bool,
        default: ParamValue::Bool(default),
        constraint: Constraint::None,
        help,
    }
}

fn string(name: &'static str, default: &str, help: &'static str) -> ParamDef {
    ParamDef {
        name,
        kind: ParamKind::String,
        default: ParamValue::Str(default.to_string()),
        constraint: Constraint::None,
        help,
    }
}

fn choice(
    name: &'static str,
    default: &'static str,
    allowed: &'static [&'static str],
    help: &'static str,
) -> ParamDef {
    ParamDef {
        name,
        kind: ParamKind::Enum,
        default: ParamValue::Str(default.to_string()),
        constraint: Constraint::OneOf(allowed),
        help,
    }
}

fn run_params() -> Vec<ParamDef> {
    vec![
        int("seed", 42, 0, u32::MAX as i64, "seed for every random stream of the run"),
        float(
            "auto_valid_fraction",
            0.0,
            0.0,
            0.9,
            "hold out this fraction of train as validation when no valid_split is set (0 = off)",
        ),
    ]
}

fn loop_params(lr: f64, batch_size: i64) -> Vec<ParamDef> {
    vec![
        int("epochs", 3, 0, 10_000, "passes over the training set"),
        int("batch_size", batch_size, 1, 65_536, "examples per micro-batch"),
        float("lr", lr, 0.0, 10.0, "base learning rate"),
        int("gradient_accumulation", 1, 1, 1_024, "micro-batches per optimizer step"),
        choice("optimizer", "adamw_torch", OPTIMIZERS, "optimizer"),
        choice("scheduler", "linear", SCHEDULERS, "learning-rate schedule"),
        int("warmup_steps", 0, 0, 1_000_000, "linear warmup length in optimizer steps"),
        float("weight_decay", 0.0, 0.0, 1.0, "decoupled weight decay"),
        choice("mixed_precision", "none", PRECISIONS, "recorded only; reference trainers run in f64"),
        int("world_size", 1, 1, 64, "simulated data-parallel workers"),
        int("checkpoint_every", 0, 0, 1_000_000, "checkpoint every k optimizer steps (0 = per epoch only)"),
    ]
}

fn llm_params() -> Vec<ParamDef> {
    let mut p = loop_params(3e-5, 2);
    p.extend([
        int("block_size", 1024, 2, 1 << 20, "packed sequence length"),
        int("model_max_length", 2048, 2, 1 << 20, "per-record truncation length"),
        int("max_prompt_length", 128, 1, 1 << 20, "prompt truncation for preference tasks"),
        boolean("peft", false, "recorded only; parameter-efficient finetuning runs in adapters"),
        choice("quantization", "none", QUANTIZATIONS, "recorded only"),
        string("target_modules", "all-linear", "recorded only"),
        choice("padding", "right", PADDING_SIDES, "side on which short blocks are padded"),
        int("embed_dim", 32, 1, 4_096, "reference model embedding width"),
    ]);
    p.extend(run_params());
    p
}

fn text_params() -> Vec<ParamDef> {
    let mut p = loop_params(5e-5, 8);
    p.extend([
        int("max_seq_length", 128, 1, 1 << 20, "token truncation length"),
        int("feature_dim", 1 << 15, 2, 1 << 24, "hashed bag-of-words width (power of two)"),
    ]);
    p.extend(run_params());
    p
}

fn image_params() -> Vec<ParamDef> {
    let mut p = loop_params(5e-5, 8);
    p.push(int("image_size", 224, 8, 4_096, "input resolution"));
    p.extend(run_params());
    p
}

fn tabular_params() -> Vec<ParamDef> {
    let mut p = vec![
        int("rounds", 100, 0, 100_000, "boosting rounds"),
        float("shrinkage", 0.1, 1e-6, 1.0, "learning rate applied to every stump"),
    ];
    p.extend(run_params());
    p
}

fn spec(
    id: &str,
    modality: Modality,
    roles: Vec<ColumnRole>,
    params: Vec<ParamDef>,
    binding: TrainerBinding,
) -> TaskSpec {
    let id: TaskId = id.parse().expect("registry ids are well formed");
    let artifact_kind = match (binding, modality) {
        (TrainerBinding::ExternalAdapter, _) => ArtifactKind::AdapterDelegated,
        (TrainerBinding::Reference, Modality::Tabular) => ArtifactKind::TabularModel,
        (TrainerBinding::Reference, _) => ArtifactKind::ModelWeights,
    };
    TaskSpec {
        id,
        modality,
        column_roles: roles,
        param_schema: params,
        artifact_kind,
        trainer_binding: binding,
    }
}

fn build_registry() -> Vec<TaskSpec> {
    use Modality::*;
    use TrainerBinding::*;

    let preference = || {
        vec![
            role("prompt_text_column"),
            role("text_column"),
            role("rejected_text_column"),
        ]
    };
    let tabular_roles = || {
        vec![
            role("target_column"),
            optional_role("id_column"),
            ColumnRole {
                name: "feature_columns",
                required: false,
                multi: true,
            },
        ]
    };

    let mut tasks = vec![
        // text
        spec("llm:sft", Text, vec![role("text_column")], llm_params(), Reference),
        spec("llm:generic", Text, vec![role("text_column")], llm_params(), ExternalAdapter),
        spec("llm:orpo", Text, preference(), llm_params(), ExternalAdapter),
        spec("llm:dpo", Text, preference(), llm_params(), ExternalAdapter),
        spec(
            "llm:reward",
            Text,
            vec![role("text_column"), role("rejected_text_column")],
            llm_params(),
            ExternalAdapter,
        ),
        spec(
            "text-classification",
            Text,
            vec![role("text_column"), role("target_column")],
            text_params(),
            Reference,
        ),
        spec(
            "text-regression",
            Text,
            vec![role("text_column"), role("target_column")],
            text_params(),
            Reference,
        ),
        spec(
            "token-classification",
            Text,
            vec![role("tokens_column"), role("tags_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "seq2seq",
            Text,
            vec![role("text_column"), role("target_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "extractive-qa",
            Text,
            vec![role("text_column"), role("question_column"), role("answer_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "sentence-transformers:pair",
            Text,
            vec![role("sentence1_column"), role("sentence2_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "sentence-transformers:pair-class",
            Text,
            vec![role("sentence1_column"), role("sentence2_column"), role("target_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "sentence-transformers:pair-score",
            Text,
            vec![role("sentence1_column"), role("sentence2_column"), role("target_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "sentence-transformers:triplet",
            Text,
            vec![role("sentence1_column"), role("sentence2_column"), role("sentence3_column")],
            text_params(),
            ExternalAdapter,
        ),
        spec(
            "vlm:captioning",
            Text,
            vec![role("image_column"), role("text_column")],
            llm_params(),
            ExternalAdapter,
        ),
        spec(
            "vlm:vqa",
            Text,
            vec![role("image_column"), role("prompt_text_column"), role("text_column")],
            llm_params(),
            ExternalAdapter,
        ),
        // image
        spec(
            "image-classification",
            Image,
            vec![role("image_column"), role("target_column")],
            image_params(),
            ExternalAdapter,
        ),
        spec(
            "image-regression",
            Image,
            vec![role("image_column"), role("target_column")],
            image_params(),
            ExternalAdapter,
        ),
        spec(
            "object-detection",
            Image,
            vec![role("image_column"), role("objects_column")],
            image_params(),
            ExternalAdapter,
        ),
        spec(
            "image-segmentation",
            Image,
            vec![role("image_column"), role("mask_column")],
            image_params(),
            ExternalAdapter,
        ),
        // tabular
        spec("tabular:classification", Tabular, tabular_roles(), tabular_params(), Reference),
        spec("tabular:regression", Tabular, tabular_roles(), tabular_params(), Reference),
    ];
    tasks.sort_by_key(|t| t.id.canonical());
    tasks
}

/// Read-only view over the compiled task table.
#[derive(Debug)]
pub struct Registry {
    tasks: Vec<TaskSpec>,
}

impl Registry {
    pub fn global() -> &'static Registry {
        static REGISTRY: OnceLock<Registry> = OnceLock::new();
        REGISTRY.get_or_init(|| Registry {
            tasks: build_registry(),
        })
    }

    pub fn list_tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn resolve_task(&self, text: &str) -> Result<&TaskSpec, RegistryError> {
        let id: TaskId = text.parse()?;
        self.get(&id).ok_or_else(|| RegistryError::UnknownTask {
            id: id.canonical(),
            nearest: self.nearest(&id.canonical()),
        })
    }

    pub fn get(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| &t.id == id)
    }

    fn nearest(&self, text: &str) -> Vec<String> {
        let mut scored: Vec<(usize, String)> = self
            .tasks
            .iter()
            .map(|t| {
                let id = t.id.canonical();
                (edit_distance(text, &id), id)
            })
            .collect();
        scored.sort();
        scored.into_iter().take(3).map(|(_, id)| id).collect()
    }
}

pub fn resolve_task(text: &str) -> Result<&'static TaskSpec, RegistryError> {
    Registry::global().resolve_task(text)
}

pub fn list_tasks() -> &'static [TaskSpec] {
    Registry::global().list_tasks()
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
