//! Fixed-schema scene descriptors, enum normalization, canonical query text
//! and the VLM client abstraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scenario_db::{Fragility, HumanPresence, MainObject, TaskKind};

/// Descriptor keys in canonical order.
pub const SCHEMA_KEYS: [&str; 12] = [
    "task_type",
    "main_object",
    "object_fragility",
    "human_presence",
    "obstacle_count",
    "obstacle_type",
    "workspace_condition",
    "arm_posture",
    "object_location",
    "spacing",
    "complexity",
    "confidence",
];

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("malformed descriptor: {0}")]
    Malformed(String),
    #[error("descriptor is missing key `{0}`")]
    MissingKey(String),
    #[error("descriptor key `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceRange(f64),
    #[error("perception unavailable: {0}")]
    Unavailable(String),
    #[error("normalization table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLocation {
    Left,
    Center,
    Right,
}

impl ObjectLocation {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectLocation::Left => "left",
            ObjectLocation::Center => "center",
            ObjectLocation::Right => "right",
        }
    }
}

impl fmt::Display for ObjectLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectLocation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(ObjectLocation::Left),
            "center" | "centre" => Ok(ObjectLocation::Center),
            "right" => Ok(ObjectLocation::Right),
            other => Err(format!("`{other}` is not one of left, center, right")),
        }
    }
}

/// Raw structured output of the perception model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub task_type: String,
    pub main_object: String,
    pub object_fragility: String,
    pub human_presence: String,
    pub obstacle_count: u32,
    pub obstacle_type: String,
    pub workspace_condition: String,
    pub arm_posture: String,
    pub object_location: ObjectLocation,
    pub spacing: String,
    pub complexity: String,
    pub confidence: f64,
}

impl SceneDescriptor {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }
}

/// Parses a structured message (JSON object) into a descriptor.
///
/// Unknown keys are ignored with a warning.
pub fn parse_descriptor(text: &str) -> Result<SceneDescriptor, PerceptionError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| PerceptionError::Malformed(e.to_string()))?;
    descriptor_from_value(&value)
}

pub fn descriptor_from_value(value: &Value) -> Result<SceneDescriptor, PerceptionError> {
    let obj = value
        .as_object()
        .ok_or_else(|| PerceptionError::Malformed("expected a JSON object".into()))?;
    for key in SCHEMA_KEYS {
        if !obj.contains_key(key) {
            return Err(PerceptionError::MissingKey(key.to_string()));
        }
    }
    for key in obj.keys() {
        if !SCHEMA_KEYS.contains(&key.as_str()) {
            log::warn!("ignoring unknown descriptor key `{key}`");
        }
    }

    let text = |key: &str| -> Result<String, PerceptionError> {
        match &obj[key] {
            Value::String(s) => Ok(s.clone()),
            Value::Null => Ok(String::new()),
            Value::Bool(b) => Ok(b.to_string()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(PerceptionError::InvalidValue {
                key: key.to_string(),
                message: "expected a string".into(),
            }),
        }
    };

    let obstacle_count = match &obj["obstacle_count"] {
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        Value::String(s) => s.trim().parse::<u32>().ok(),
        _ => None,
    }
    .ok_or_else(|| PerceptionError::InvalidValue {
        key: "obstacle_count".into(),
        message: "expected a non-negative integer".into(),
    })?;

    let confidence = match &obj["confidence"] {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| PerceptionError::InvalidValue {
        key: "confidence".into(),
        message: "expected a number".into(),
    })?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(PerceptionError::ConfidenceRange(confidence));
    }

    let object_location =
        text("object_location")?
            .parse()
            .map_err(|message| PerceptionError::InvalidValue {
                key: "object_location".into(),
                message,
            })?;

    Ok(SceneDescriptor {
        task_type: text("task_type")?,
        main_object: text("main_object")?,
        object_fragility: text("object_fragility")?,
        human_presence: text("human_presence")?,
        obstacle_count,
        obstacle_type: text("obstacle_type")?,
        workspace_condition: text("workspace_condition")?,
        arm_posture: text("arm_posture")?,
        object_location,
        spacing: text("spacing")?,
        complexity: text("complexity")?,
        confidence,
    })
}

/// Descriptor with its semantic fields mapped onto database enums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDescriptor {
    pub task_enum: TaskKind,
    pub main_object: MainObject,
    pub object_fragility: Fragility,
    pub human_presence: HumanPresence,
    pub obstacle_count: u32,
    pub obstacle_type: String,
    pub workspace_condition: String,
    pub arm_posture: String,
    pub object_location: ObjectLocation,
    pub spacing: String,
    pub complexity: String,
    pub confidence: f64,
}

impl NormalizedDescriptor {
    /// The descriptor a VLM would have to emit to normalize to `self`.
    pub fn to_descriptor(&self) -> SceneDescriptor {
        SceneDescriptor {
            task_type: self.task_enum.to_string(),
            main_object: self.main_object.to_string(),
            object_fragility: self.object_fragility.to_string(),
            human_presence: self.human_presence.to_string(),
            obstacle_count: self.obstacle_count,
            obstacle_type: self.obstacle_type.clone(),
            workspace_condition: self.workspace_condition.clone(),
            arm_posture: self.arm_posture.clone(),
            object_location: self.object_location,
            spacing: self.spacing.clone(),
            complexity: self.complexity.clone(),
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct Rule {
    value: String,
    #[serde(default)]
    exact: Vec<String>,
    #[serde(default)]
    prefix: Vec<String>,
    #[serde(default)]
    contains: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct FieldTable {
    default: String,
    rules: Vec<Rule>,
}

impl FieldTable {
    fn lookup(&self, raw: &str) -> &str {
        let text = canonical_phrase(raw);
        for rule in &self.rules {
            let hit = rule.exact.iter().any(|e| canonical_phrase(e) == text)
                || rule.prefix.iter().any(|p| text.starts_with(p.as_str()))
                || rule.contains.iter().any(|c| text.contains(c.as_str()));
            if hit {
                return &rule.value;
            }
        }
        &self.default
    }

    fn check_values<T: FromStr<Err = String>>(&self, field: &str) -> Result<(), PerceptionError> {
        std::iter::once(&self.default)
            .chain(self.rules.iter().map(|r| &r.value))
            .try_for_each(|v| {
                v.parse::<T>()
                    .map(|_| ())
                    .map_err(|e| PerceptionError::Table(format!("{field}: {e}")))
            })
    }
}

/// Lowercase, `_`/`-` to spaces, collapsed whitespace.
fn canonical_phrase(raw: &str) -> String {
    raw.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Data-driven mapping from free-text VLM values to database enums.
#[derive(Debug, Clone, Deserialize)]
pub struct NormalizationTable {
    task_type: FieldTable,
    main_object: FieldTable,
    object_fragility: FieldTable,
    human_presence: FieldTable,
}

impl NormalizationTable {
    pub fn from_json(text: &str) -> Result<Self, PerceptionError> {
        let table: NormalizationTable =
            serde_json::from_str(text).map_err(|e| PerceptionError::Table(e.to_string()))?;
        table.task_type.check_values::<TaskKind>("task_type")?;
        table
            .main_object
            .check_values::<MainObject>("main_object")?;
        table
            .object_fragility
            .check_values::<Fragility>("object_fragility")?;
        table
            .human_presence
            .check_values::<HumanPresence>("human_presence")?;
        Ok(table)
    }

    /// Total, deterministic normalization.
    pub fn normalize(&self, d: &SceneDescriptor) -> NormalizedDescriptor {
        // values were checked in from_json
        let parse = |t: &FieldTable, raw: &str| t.lookup(raw).to_string();
        NormalizedDescriptor {
            task_enum: parse(&self.task_type, &d.task_type).parse().unwrap(),
            main_object: parse(&self.main_object, &d.main_object).parse().unwrap(),
            object_fragility: parse(&self.object_fragility, &d.object_fragility)
                .parse()
                .unwrap(),
            human_presence: parse(&self.human_presence, &d.human_presence)
                .parse()
                .unwrap(),
            obstacle_count: d.obstacle_count,
            obstacle_type: d.obstacle_type.clone(),
            workspace_condition: d.workspace_condition.clone(),
            arm_posture: d.arm_posture.clone(),
            object_location: d.object_location,
            spacing: d.spacing.clone(),
            complexity: d.complexity.clone(),
            confidence: d.confidence,
        }
    }
}

/// Normalizes with the bundled table.
pub fn normalize(d: &SceneDescriptor) -> NormalizedDescriptor {
    crate::data::normalization_table().normalize(d)
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        if matches!(c, '\\' | ';' | '=') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Canonical `key=value; ...` text in schema order.
pub fn to_query_text(n: &NormalizedDescriptor) -> String {
    let values: [String; 12] = [
        n.task_enum.to_string(),
        n.main_object.to_string(),
        n.object_fragility.to_string(),
        n.human_presence.to_string(),
        n.obstacle_count.to_string(),
        escape(&n.obstacle_type),
        escape(&n.workspace_condition),
        escape(&n.arm_posture),
        n.object_location.to_string(),
        escape(&n.spacing),
        escape(&n.complexity),
        n.confidence.to_string(),
    ];
    SCHEMA_KEYS
        .iter()
        .zip(values.iter())
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Inverse of [`to_query_text`]. Requires the exact canonical layout.
pub fn from_query_text(text: &str) -> Result<NormalizedDescriptor, PerceptionError> {
    // split on unescaped "; " and unescape values
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut key = String::new();
    let mut value = String::new();
    let mut in_value = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if in_value => match chars.next() {
                Some(e) => value.push(e),
                None => return Err(PerceptionError::Malformed("dangling escape".into())),
            },
            '=' if !in_value => in_value = true,
            ';' if in_value => {
                if chars.next() != Some(' ') {
                    return Err(PerceptionError::Malformed(
                        "expected \"; \" separator".into(),
                    ));
                }
                pairs.push((std::mem::take(&mut key), std::mem::take(&mut value)));
                in_value = false;
            }
            _ if in_value => value.push(c),
            _ => key.push(c),
        }
    }
    if !in_value {
        return Err(PerceptionError::Malformed(
            "trailing key without value".into(),
        ));
    }
    pairs.push((key, value));

    let keys: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
    if keys != SCHEMA_KEYS {
        return Err(PerceptionError::Malformed(format!(
            "keys {keys:?} are not the canonical schema order"
        )));
    }
    let map: BTreeMap<&str, &str> = pairs
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    fn enum_field<T: FromStr<Err = String>>(
        map: &BTreeMap<&str, &str>,
        key: &str,
    ) -> Result<T, PerceptionError> {
        map[key]
            .parse()
            .map_err(|message| PerceptionError::InvalidValue {
                key: key.to_string(),
                message,
            })
    }
    Ok(NormalizedDescriptor {
        task_enum: enum_field(&map, "task_type")?,
        main_object: enum_field(&map, "main_object")?,
        object_fragility: enum_field(&map, "object_fragility")?,
        human_presence: enum_field(&map, "human_presence")?,
        obstacle_count: map["obstacle_count"].parse().map_err(|_| {
            PerceptionError::InvalidValue {
                key: "obstacle_count".into(),
                message: "expected a non-negative integer".into(),
            }
        })?,
        obstacle_type: map["obstacle_type"].to_string(),
        workspace_condition: map["workspace_condition"].to_string(),
        arm_posture: map["arm_posture"].to_string(),
        object_location: enum_field(&map, "object_location")?,
        spacing: map["spacing"].to_string(),
        complexity: map["complexity"].to_string(),
        confidence: map["confidence"]
            .parse()
            .map_err(|_| PerceptionError::InvalidValue {
                key: "confidence".into(),
                message: "expected a number".into(),
            })?,
    })
}

/// What the perception model is asked to describe.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    /// Named scene from the mock table.
    Stub(String),
    /// Encoded camera image (JPEG/PNG bytes).
    Image(Vec<u8>),
}

pub trait VlmClient: Send + Sync {
    fn describe(&self, frame: &Frame) -> Result<SceneDescriptor, PerceptionError>;

    /// Scene stubs this client can describe, if it is a fixed table.
    fn known_stubs(&self) -> Option<BTreeSet<String>> {
        None
    }
}

/// Deterministic stand-in for the VLM: named stubs map to fixed descriptors.
#[derive(Debug, Clone, Default)]
pub struct MockVlm {
    scenes: BTreeMap<String, SceneDescriptor>,
}

impl MockVlm {
    pub fn from_json(text: &str) -> Result<Self, PerceptionError> {
        let raw: BTreeMap<String, Value> =
            serde_json::from_str(text).map_err(|e| PerceptionError::Malformed(e.to_string()))?;
        let scenes = raw
            .iter()
            .map(|(name, v)| descriptor_from_value(v).map(|d| (name.clone(), d)))
            .collect::<Result<_, _>>()?;
        Ok(Self { scenes })
    }

    pub fn insert(&mut self, stub: impl Into<String>, descriptor: SceneDescriptor) {
        self.scenes.insert(stub.into(), descriptor);
    }

    pub fn stubs(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }

    pub fn contains(&self, stub: &str) -> bool {
        self.scenes.contains_key(stub)
    }
}

impl VlmClient for MockVlm {
    fn known_stubs(&self) -> Option<BTreeSet<String>> {
        Some(self.scenes.keys().cloned().collect())
    }

    fn describe(&self, frame: &Frame) -> Result<SceneDescriptor, PerceptionError> {
        match frame {
            Frame::Stub(name) => self.scenes.get(name).cloned().ok_or_else(|| {
                PerceptionError::Unavailable(format!("unknown scene stub `{name}`"))
            }),
            Frame::Image(_) => Err(PerceptionError::Unavailable(
                "the mock client only accepts scene stubs".into(),
            )),
        }
    }
}

/// Remote VLM: POSTs the image and expects the structured message back.
#[cfg(feature = "remote")]
pub struct HttpVlm {
    endpoint: String,
    agent: ureq::Agent,
    // remote requests are serialized
    lock: std::sync::Mutex<()>,
}

#[cfg(feature = "remote")]
impl HttpVlm {
    pub fn new(endpoint: impl Into<String>, timeout: std::time::Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            lock: std::sync::Mutex::new(()),
        }
    }
}

#[cfg(feature = "remote")]
impl VlmClient for HttpVlm {
    fn describe(&self, frame: &Frame) -> Result<SceneDescriptor, PerceptionError> {
        let Frame::Image(bytes) = frame else {
            return Err(PerceptionError::Unavailable(
                "remote VLM needs image bytes".into(),
            ));
        };
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let body = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/octet-stream")
            .send(&bytes[..])
            .map_err(|e| PerceptionError::Unavailable(e.to_string()))?
            .body_mut()
            .read_to_string()
            .map_err(|e| PerceptionError::Unavailable(e.to_string()))?;
        parse_descriptor(&body)
    }
}
