//! YAML project configuration: parsing, `${NAME}` interpolation, validation
//! against the task registry and canonical rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::registry::{
    self, ParamSet, ParamValue, RegistryError, TaskId, TaskSpec, ValidatedParams,
};

pub const MASKED_SECRET: &str = "***";
pub const TOKEN_ENV: &str = "HF_TOKEN";
pub const DEFAULT_DOCKER_IMAGE: &str = "trainforge/trainforge:latest";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("YamlSyntax: {0}")]
    YamlSyntax(String),
    #[error("UnknownKey: `{0}`")]
    UnknownKey(String),
    #[error("MissingRequiredKey: `{0}`")]
    MissingRequiredKey(String),
    #[error("MissingEnvVar: `{0}` is not set")]
    MissingEnvVar(String),
    #[error("InvalidValue: `{path}`: {message}")]
    InvalidValue { path: String, message: String },
    #[error("{source} (at `{path}`)")]
    Registry {
        path: String,
        #[source]
        source: RegistryError,
    },
    #[error("MissingColumnRole: `{0}` is required by the task but not mapped")]
    MissingColumnRole(String),
    #[error("HubCredentialsMissing: push_to_hub requires hub.username and hub.token")]
    HubCredentialsMissing,
}

impl ConfigError {
    /// Dotted path of the offending key, when there is one.
    pub fn key_path(&self) -> Option<String> {
        match self {
            ConfigError::YamlSyntax(_) => None,
            ConfigError::UnknownKey(p) | ConfigError::MissingRequiredKey(p) => Some(p.clone()),
            ConfigError::MissingEnvVar(_) => None,
            ConfigError::InvalidValue { path, .. } | ConfigError::Registry { path, .. } => {
                Some(path.clone())
            }
            ConfigError::MissingColumnRole(role) => Some(format!("data.column_mapping.{role}")),
            ConfigError::HubCredentialsMissing => Some("hub".into()),
        }
    }

    /// Short machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::YamlSyntax(_) => "YamlSyntax",
            ConfigError::UnknownKey(_) => "UnknownKey",
            ConfigError::MissingRequiredKey(_) => "MissingRequiredKey",
            ConfigError::MissingEnvVar(_) => "MissingEnvVar",
            ConfigError::InvalidValue { .. } => "InvalidValue",
            ConfigError::Registry { source, .. } => match source {
                RegistryError::UnknownTask { .. } => "UnknownTask",
                RegistryError::MalformedTaskId(_) => "MalformedTaskId",
                RegistryError::UnknownParam(_) => "UnknownParam",
                RegistryError::TypeMismatch { .. } => "TypeMismatch",
                RegistryError::OutOfBounds { .. } => "OutOfBounds",
            },
            ConfigError::MissingColumnRole(_) => "MissingColumnRole",
            ConfigError::HubCredentialsMissing => "HubCredentialsMissing",
        }
    }
}

/// A string that never prints its contents.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Secret(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(MASKED_SECRET)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogTarget {
    /// JSONL event log; `tensorboard` in config files is an alias.
    EventLog,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Local,
    Docker,
    SpacesStub,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Local => "local",
            Backend::Docker => "docker",
            Backend::SpacesStub => "spaces-stub",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatTemplateId {
    Zephyr,
    Chatml,
    None,
}

impl ChatTemplateId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChatTemplateId::Zephyr => "zephyr",
            ChatTemplateId::Chatml => "chatml",
            ChatTemplateId::None => "none",
        }
    }
}

/// Source column(s) for one role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSource {
    One(String),
    Many(Vec<String>),
}

impl ColumnSource {
    pub fn columns(&self) -> Vec<&str> {
        match self {
            ColumnSource::One(c) => vec![c.as_str()],
            ColumnSource::Many(cs) => cs.iter().map(String::as_str).collect(),
        }
    }
}

pub type ColumnMapping = BTreeMap<String, ColumnSource>;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: String,
    pub train_split: String,
    pub valid_split: Option<String>,
    pub chat_template: Option<ChatTemplateId>,
    pub column_mapping: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HubConfig {
    pub username: Option<String>,
    pub token: Option<Secret>,
    pub push_to_hub: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    pub task: TaskId,
    pub base_model: String,
    pub project_name: String,
    pub log: LogTarget,
    pub backend: Backend,
    pub docker_image: Option<String>,
    pub data: DataConfig,
    pub params: ParamSet,
    pub hub: HubConfig,
}

impl ProjectConfig {
    /// Same config with the token replaced by the masking literal.
    pub fn masked(&self) -> ProjectConfig {
        let mut cfg = self.clone();
        if cfg.hub.token.is_some() {
            cfg.hub.token = Some(Secret::new(MASKED_SECRET));
        }
        cfg
    }
}

/// A config bound to its registry entry with completed params.
#[derive(Debug, Clone)]
pub struct ValidatedProject {
    pub config: ProjectConfig,
    pub spec: &'static TaskSpec,
    pub params: ValidatedParams,
}

// ---------------------------------------------------------------------------
// interpolation
// ---------------------------------------------------------------------------

fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase() || c == '_')
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Replaces every `${NAME}` with `env[NAME]` in a single pass.
pub fn interpolate_env(text: &str, env: &HashMap<String, String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) if is_env_name(&after[..end]) => {
                let name = &after[..end];
                let value = env
                    .get(name)
                    .ok_or_else(|| ConfigError::MissingEnvVar(name.to_string()))?;
                out.push_str(value);
                rest = &after[end + 1..];
            }
            _ => {
                out.push_str("${");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

pub fn process_env() -> HashMap<String, String> {
    std::env::vars().collect()
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

struct Section<'a> {
    path: &'a str,
    map: &'a Mapping,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl<'a> Section<'a> {
    fn new(path: &'a str, value: &'a Value) -> Result<Self, ConfigError> {
        match value {
            Value::Mapping(map) => Ok(Section { path, map }),
            _ => Err(ConfigError::InvalidValue {
                path: if path.is_empty() { "<root>".into() } else { path.into() },
                message: "expected a mapping".into(),
            }),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            let name = key.as_str().ok_or_else(|| ConfigError::InvalidValue {
                path: self.path.to_string(),
                message: format!("non-string key {key:?}"),
            })?;
            if !allowed.contains(&name) {
                return Err(ConfigError::UnknownKey(join(self.path, name)));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        match self.map.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => Some(v),
        }
    }

    fn require(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError::MissingRequiredKey(join(self.path, key)))
    }

    fn string(&self, key: &str, env: &HashMap<String, String>) -> Result<Option<String>, ConfigError> {
        self.get(key)
            .map(|v| scalar_string(v, &join(self.path, key), env))
            .transpose()
    }

    fn required_string(&self, key: &str, env: &HashMap<String, String>) -> Result<String, ConfigError> {
        scalar_string(self.require(key)?, &join(self.path, key), env)
    }
}

fn scalar_string(v: &Value, path: &str, env: &HashMap<String, String>) -> Result<String, ConfigError> {
    match v {
        Value::String(s) => interpolate_env(s, env),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(ConfigError::InvalidValue {
            path: path.into(),
            message: "expected a scalar".into(),
        }),
    }
}

fn param_value(v: &Value, path: &str, env: &HashMap<String, String>) -> Result<ParamValue, ConfigError> {
    match v {
        Value::Bool(b) => Ok(ParamValue::Bool(*b)),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(ParamValue::Int(i))
            } else {
                n.as_f64()
                    .map(ParamValue::Float)
                    .ok_or_else(|| ConfigError::InvalidValue {
                        path: path.into(),
                        message: format!("unrepresentable number {n}"),
                    })
            }
        }
        Value::String(s) => Ok(ParamValue::Str(interpolate_env(s, env)?)),
        _ => Err(ConfigError::InvalidValue {
            path: path.into(),
            message: "expected a scalar".into(),
        }),
    }
}

const TOP_KEYS: &[&str] = &[
    "task",
    "base_model",
    "project_name",
    "log",
    "backend",
    "docker_image",
    "data",
    "params",
    "hub",
];
const DATA_KEYS: &[&str] = &["path", "train_split", "valid_split", "chat_template", "column_mapping"];
const HUB_KEYS: &[&str] = &["username", "token", "push_to_hub"];

pub fn validate_project_name(name: &str) -> Result<(), ConfigError> {
    let ok = !name.is_empty()
        && name.len() <= 96
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && name != "."
        && name != "..";
    if ok {
        Ok(())
    } else {
        Err(ConfigError::InvalidValue {
            path: "project_name".into(),
            message: "must be 1-96 characters of [A-Za-z0-9._-]".into(),
        })
    }
}

/// Parses a YAML config. Interpolation is applied to string values only.
pub fn parse_config(text: &str, env: &HashMap<String, String>) -> Result<ProjectConfig, ConfigError> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::YamlSyntax(e.to_string()))?;
    let doc = match doc {
        Value::Null => Value::Mapping(Mapping::new()),
        other => other,
    };
    let root = Section::new("", &doc)?;
    root.check_keys(TOP_KEYS)?;

    let task_text = root.required_string("task", env)?;
    let task: TaskId = task_text.parse().map_err(|source| ConfigError::Registry {
        path: "task".into(),
        source,
    })?;
    // unknown tasks are reported before anything else is looked at
    registry::Registry::global()
        .resolve_task(&task.canonical())
        .map_err(|source| ConfigError::Registry {
            path: "task".into(),
            source,
        })?;
    let base_model = root.required_string("base_model", env)?;
    let project_name = root.required_string("project_name", env)?;
    validate_project_name(&project_name)?;

    let log = match root.string("log", env)?.as_deref() {
        None | Some("tensorboard") | Some("eventlog") => LogTarget::EventLog,
        Some("none") => LogTarget::None,
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                path: "log".into(),
                message: format!("`{other}` is not one of tensorboard|eventlog|none"),
            })
        }
    };
    let backend = match root.string("backend", env)?.as_deref() {
        None | Some("local") => Backend::Local,
        Some("docker") => Backend::Docker,
        Some("spaces-stub") => Backend::SpacesStub,
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                path: "backend".into(),
                message: format!("`{other}` is not one of local|docker|spaces-stub"),
            })
        }
    };
    let docker_image = root.string("docker_image", env)?;

    let data = parse_data(root.require("data")?, env)?;

    let mut params = ParamSet::new();
    if let Some(v) = root.get("params") {
        let section = Section::new("params", v)?;
        for (key, value) in section.map {
            let name = key.as_str().ok_or_else(|| ConfigError::InvalidValue {
                path: "params".into(),
                message: format!("non-string key {key:?}"),
            })?;
            if value.is_null() {
                continue;
            }
            params.insert(name.to_string(), param_value(value, &join("params", name), env)?);
        }
    }

    let hub = match root.get("hub") {
        None => HubConfig::default(),
        Some(v) => {
            let section = Section::new("hub", v)?;
            section.check_keys(HUB_KEYS)?;
            let push_to_hub = match section.get("push_to_hub") {
                None => false,
                Some(Value::Bool(b)) => *b,
                Some(_) => {
                    return Err(ConfigError::InvalidValue {
                        path: "hub.push_to_hub".into(),
                        message: "expected a bool".into(),
                    })
                }
            };
            HubConfig {
                username: section.string("username", env)?.filter(|s| !s.is_empty()),
                token: section
                    .string("token", env)?
                    .filter(|s| !s.is_empty())
                    .map(Secret::new),
                push_to_hub,
            }
        }
    };

    Ok(ProjectConfig {
        task,
        base_model,
        project_name,
        log,
        backend,
        docker_image,
        data,
        params,
        hub,
    })
}

fn parse_data(v: &Value, env: &HashMap<String, String>) -> Result<DataConfig, ConfigError> {
    let section = Section::new("data", v)?;
    section.check_keys(DATA_KEYS)?;
    let path = section.required_string("path", env)?;
    let train_split = section.required_string("train_split", env)?;
    if train_split.is_empty() {
        return Err(ConfigError::MissingRequiredKey("data.train_split".into()));
    }
    let valid_split = section.string("valid_split", env)?.filter(|s| !s.is_empty());
    let chat_template = match section.string("chat_template", env)?.as_deref() {
        None => None,
        Some("zephyr") => Some(ChatTemplateId::Zephyr),
        Some("chatml") => Some(ChatTemplateId::Chatml),
        Some("none") => Some(ChatTemplateId::None),
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                path: "data.chat_template".into(),
                message: format!("`{other}` is not one of zephyr|chatml|none"),
            })
        }
    };
    let mut column_mapping = ColumnMapping::new();
    if let Some(m) = section.get("column_mapping") {
        let mapping = Section::new("data.column_mapping", m)?;
        for (key, value) in mapping.map {
            let role = key.as_str().unwrap_or_default().to_string();
            let path = join("data.column_mapping", &role);
            let source = match value {
                Value::Sequence(items) => ColumnSource::Many(
                    items
                        .iter()
                        .map(|i| scalar_string(i, &path, env))
                        .collect::<Result<_, _>>()?,
                ),
                Value::Null => continue,
                other => ColumnSource::One(scalar_string(other, &path, env)?),
            };
            column_mapping.insert(role, source);
        }
    }
    Ok(DataConfig {
        path,
        train_split,
        valid_split,
        chat_template,
        column_mapping,
    })
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

pub fn validate_config(cfg: &ProjectConfig) -> Result<ValidatedProject, ConfigError> {
    let spec = registry::Registry::global()
        .resolve_task(&cfg.task.canonical())
        .map_err(|source| ConfigError::Registry {
            path: "task".into(),
            source,
        })?;
    validate_project_name(&cfg.project_name)?;

    let params = registry::validate_params(spec, &cfg.params).map_err(|source| {
        let path = match &source {
            RegistryError::UnknownParam(n) => format!("params.{n}"),
            RegistryError::TypeMismatch { name, .. } | RegistryError::OutOfBounds { name, .. } => {
                format!("params.{name}")
            }
            _ => "params".into(),
        };
        ConfigError::Registry { path, source }
    })?;

    for (role, source) in &cfg.data.column_mapping {
        let def = spec
            .role(role)
            .ok_or_else(|| ConfigError::UnknownKey(format!("data.column_mapping.{role}")))?;
        if matches!(source, ColumnSource::Many(_)) && !def.multi {
            return Err(ConfigError::InvalidValue {
                path: format!("data.column_mapping.{role}"),
                message: "role takes a single column".into(),
            });
        }
    }
    for role in spec.required_roles() {
        if !cfg.data.column_mapping.contains_key(role.name) {
            return Err(ConfigError::MissingColumnRole(role.name.to_string()));
        }
    }

    if cfg.hub.push_to_hub && (cfg.hub.username.is_none() || cfg.hub.token.is_none()) {
        return Err(ConfigError::HubCredentialsMissing);
    }

    Ok(ValidatedProject {
        config: cfg.clone(),
        spec,
        params,
    })
}

/// Parse and validate in one go.
pub fn load_project(text: &str, env: &HashMap<String, String>) -> Result<ValidatedProject, ConfigError> {
    validate_config(&parse_config(text, env)?)
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum TokenRendering {
    Masked,
    EnvPlaceholder,
}

fn param_to_yaml(v: &ParamValue) -> Value {
    match v {
        ParamValue::Bool(b) => Value::Bool(*b),
        ParamValue::Int(i) => Value::Number((*i).into()),
        ParamValue::Float(x) => Value::Number((*x).into()),
        ParamValue::Str(s) => Value::String(s.clone()),
    }
}

fn render(cfg: &ProjectConfig, token: TokenRendering) -> String {
    let s = |x: &str| Value::String(x.to_string());
    let mut root = Mapping::new();
    root.insert(s("task"), s(&cfg.task.canonical()));
    root.insert(s("base_model"), s(&cfg.base_model));
    root.insert(s("project_name"), s(&cfg.project_name));
    root.insert(
        s("log"),
        s(match cfg.log {
            LogTarget::EventLog => "tensorboard",
            LogTarget::None => "none",
        }),
    );
    root.insert(s("backend"), s(cfg.backend.as_str()));
    if let Some(image) = &cfg.docker_image {
        root.insert(s("docker_image"), s(image));
    }

    let mut data = Mapping::new();
    data.insert(s("path"), s(&cfg.data.path));
    data.insert(s("train_split"), s(&cfg.data.train_split));
    data.insert(
        s("valid_split"),
        cfg.data.valid_split.as_deref().map(s).unwrap_or(Value::Null),
    );
    if let Some(t) = cfg.data.chat_template {
        data.insert(s("chat_template"), s(t.as_str()));
    }
    let mut mapping = Mapping::new();
    for (role, source) in &cfg.data.column_mapping {
        let value = match source {
            ColumnSource::One(c) => s(c),
            ColumnSource::Many(cs) => Value::Sequence(cs.iter().map(|c| s(c)).collect()),
        };
        mapping.insert(s(role), value);
    }
    data.insert(s("column_mapping"), Value::Mapping(mapping));
    root.insert(s("data"), Value::Mapping(data));

    // schema order first, then anything else alphabetically
    let mut params = Mapping::new();
    let schema: Vec<&str> = registry::Registry::global()
        .get(&cfg.task)
        .map(|spec| spec.param_schema.iter().map(|p| p.name).collect())
        .unwrap_or_default();
    for name in &schema {
        if let Some(v) = cfg.params.get(*name) {
            params.insert(s(name), param_to_yaml(v));
        }
    }
    for (name, v) in &cfg.params {
        if !schema.contains(&name.as_str()) {
            params.insert(s(name), param_to_yaml(v));
        }
    }
    root.insert(s("params"), Value::Mapping(params));

    let mut hub = Mapping::new();
    if let Some(u) = &cfg.hub.username {
        hub.insert(s("username"), s(u));
    }
    if cfg.hub.token.is_some() {
        let rendered = match token {
            TokenRendering::Masked => MASKED_SECRET.to_string(),
            TokenRendering::EnvPlaceholder => format!("${{{TOKEN_ENV}}}"),
        };
        hub.insert(s("token"), Value::String(rendered));
    }
    hub.insert(s("push_to_hub"), Value::Bool(cfg.hub.push_to_hub));
    root.insert(s("hub"), Value::Mapping(hub));

    serde_yaml::to_string(&Value::Mapping(root)).expect("yaml values always serialize")
}

/// Deterministic YAML rendering with a fixed key order; the token is masked.
pub fn canonicalize(cfg: &ProjectConfig) -> String {
    render(cfg, TokenRendering::Masked)
}

/// Rendering for handing a config to a child process: the token becomes a
/// `${HF_TOKEN}` placeholder to be supplied through the environment.
pub fn render_for_spawn(cfg: &ProjectConfig) -> String {
    render(cfg, TokenRendering::EnvPlaceholder)
}
