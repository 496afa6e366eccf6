//! The FL plan: the contract every federation member agrees on before the
//! first round starts.
//!
//! A plan is a YAML document with exactly six top-level keys:
//!
//! ```yaml
//! aggregator:
//!   settings:
//!     fqdn: agg.example.com
//!     port: 50051
//!     rounds_to_train: 5
//!     init_model_path: save/mlp_blobs_init.ofmf
//!     final_model_path: save/mlp_blobs_latest.ofmf
//! collaborators: [one, two]
//! tasks:
//!   train: { kind: TRAIN, hyperparams: { batch_size: 32 } }
//!   validate: { kind: VALIDATE, hyperparams: {} }
//! assigner:
//!   groups:
//!     - { group_name: train_and_validate, percentage: 1.0, task_names: [train, validate] }
//! straggler_policy: { mode: ALL }
//! assignment_seed: 42
//! ```
//!
//! Parsing validates the whole document; [`plan_hash`] gives a digest that
//! is independent of key order and formatting; [`assign_tasks`] turns the
//! assigner groups into a per-round, reproducible task assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha384};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan is not valid YAML: {0}")]
    Syntax(String),
    #[error("plan schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("plan is inconsistent: {0}")]
    Consistency(String),
    #[error("round {round} is out of range for a plan with {rounds_to_train} rounds")]
    RoundOutOfRange { round: u32, rounds_to_train: u32 },
}

impl PlanError {
    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        PlanError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlPlan {
    pub aggregator: AggregatorSection,
    pub collaborators: Vec<String>,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub assigner: AssignerSpec,
    pub straggler_policy: StragglerPolicy,
    pub assignment_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSection {
    pub settings: AggregatorSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSettings {
    pub fqdn: String,
    pub port: u16,
    pub rounds_to_train: u32,
    pub init_model_path: String,
    pub final_model_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Train,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Filled from the key under `tasks:`.
    #[serde(skip)]
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

/// A scalar hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl HyperValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            HyperValue::Int(i) => Some(i as f64),
            HyperValue::Float(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            HyperValue::Int(i) if i >= 0 => Some(i as u64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            HyperValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            HyperValue::Bool(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for HyperValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperValue::Bool(b) => write!(f, "{b}"),
            HyperValue::Int(i) => write!(f, "{i}"),
            HyperValue::Float(x) => write!(f, "{x}"),
            HyperValue::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hyperparams(pub BTreeMap<String, HyperValue>);

impl Hyperparams {
    pub fn get(&self, key: &str) -> Option<&HyperValue> {
        self.0.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: HyperValue) {
        self.0.insert(key.into(), value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignerSpec {
    pub groups: Vec<AssignmentGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentGroup {
    pub group_name: String,
    pub percentage: f64,
    pub task_names: Vec<String>,
}

/// When a round may complete without every expected result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStragglerPolicy", into = "RawStragglerPolicy")]
pub enum StragglerPolicy {
    /// Wait for every expected result.
    All,
    /// Complete once `ceil(quorum_fraction * N)` collaborators reported and
    /// `timeout_seconds` elapsed since the round's first result.
    Quorum {
        quorum_fraction: f64,
        timeout_seconds: f64,
    },
}

impl StragglerPolicy {
    /// Number of reporting collaborators needed to close a round early.
    pub fn quorum_count(&self, roster: usize) -> usize {
        match *self {
            StragglerPolicy::All => roster,
            StragglerPolicy::Quorum {
                quorum_fraction, ..
            } => ((quorum_fraction * roster as f64).ceil() as usize).clamp(1, roster),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum StragglerMode {
    #[serde(rename = "ALL")]
    All,
    #[serde(rename = "QUORUM")]
    Quorum,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStragglerPolicy {
    mode: StragglerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quorum_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timeout_seconds: Option<f64>,
}

impl TryFrom<RawStragglerPolicy> for StragglerPolicy {
    type Error = String;

    fn try_from(raw: RawStragglerPolicy) -> Result<Self, Self::Error> {
        match raw.mode {
            StragglerMode::All => Ok(StragglerPolicy::All),
            StragglerMode::Quorum => {
                let quorum_fraction = raw
                    .quorum_fraction
                    .ok_or("QUORUM mode requires `quorum_fraction`")?;
                let timeout_seconds = raw
                    .timeout_seconds
                    .ok_or("QUORUM mode requires `timeout_seconds`")?;
                if !(quorum_fraction > 0.0 && quorum_fraction <= 1.0) {
                    return Err(format!(
                        "`quorum_fraction` must lie in (0, 1], got {quorum_fraction}"
                    ));
                }
                if !(timeout_seconds > 0.0 && timeout_seconds.is_finite()) {
                    return Err(format!(
                        "`timeout_seconds` must be positive, got {timeout_seconds}"
                    ));
                }
                Ok(StragglerPolicy::Quorum {
                    quorum_fraction,
                    timeout_seconds,
                })
            }
        }
    }
}

impl From<StragglerPolicy> for RawStragglerPolicy {
    fn from(policy: StragglerPolicy) -> Self {
        match policy {
            StragglerPolicy::All => RawStragglerPolicy {
                mode: StragglerMode::All,
                quorum_fraction: None,
                timeout_seconds: None,
            },
            StragglerPolicy::Quorum {
                quorum_fraction,
                timeout_seconds,
            } => RawStragglerPolicy {
                mode: StragglerMode::Quorum,
                quorum_fraction: Some(quorum_fraction),
                timeout_seconds: Some(timeout_seconds),
            },
        }
    }
}

/// Which collaborator runs which tasks in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub round: u32,
    pub entries: BTreeMap<String, Vec<String>>,
}

impl TaskAssignment {
    pub fn tasks_for(&self, label: &str) -> &[String] {
        self.entries.get(label).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Truncated SHA-384 digest of a plan's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlanHash(pub [u8; 32]);

impl PlanHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        Some(PlanHash(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for PlanHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlanHash({})", self.to_hex())
    }
}

impl fmt::Display for PlanHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FlPlan {
    pub fn settings(&self) -> &AggregatorSettings {
        &self.aggregator.settings
    }

    pub fn rounds_to_train(&self) -> u32 {
        self.aggregator.settings.rounds_to_train
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.get(name)
    }

    pub fn has_collaborator(&self, label: &str) -> bool {
        self.collaborators.iter().any(|c| c == label)
    }

    /// The first TRAIN task in name order, if any.
    pub fn first_train_task(&self) -> Option<&TaskSpec> {
        self.tasks.values().find(|t| t.kind == TaskKind::Train)
    }

    pub fn hash(&self) -> PlanHash {
        plan_hash(self)
    }

    /// Checks every schema rule without modifying the plan.
    pub fn validate(&self) -> Result<(), PlanError> {
        self.clone().normalize()
    }

    fn normalize(&mut self) -> Result<(), PlanError> {
        let s = &self.aggregator.settings;
        if !is_hostname(&s.fqdn) {
            return Err(PlanError::schema(
                "aggregator.settings.fqdn",
                format!("`{}` is not a valid hostname", s.fqdn),
            ));
        }
        if s.port == 0 {
            return Err(PlanError::schema(
                "aggregator.settings.port",
                "port must be in 1..=65535",
            ));
        }
        if s.rounds_to_train == 0 {
            return Err(PlanError::schema(
                "aggregator.settings.rounds_to_train",
                "must be at least 1",
            ));
        }
        if s.init_model_path.is_empty() {
            return Err(PlanError::schema("aggregator.settings.init_model_path", "empty path"));
        }
        if s.final_model_path.is_empty() {
            return Err(PlanError::schema("aggregator.settings.final_model_path", "empty path"));
        }

        if self.collaborators.is_empty() {
            return Err(PlanError::schema("collaborators", "roster must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for (i, label) in self.collaborators.iter().enumerate() {
            if !is_label(label) {
                return Err(PlanError::schema(
                    format!("collaborators[{i}]"),
                    format!("`{label}` is not an alphanumeric-with-dots label"),
                ));
            }
            if !seen.insert(label.as_str()) {
                return Err(PlanError::Consistency(format!(
                    "collaborator `{label}` listed twice"
                )));
            }
        }

        if self.tasks.is_empty() {
            return Err(PlanError::schema("tasks", "at least one task is required"));
        }
        for (name, task) in self.tasks.iter_mut() {
            if name.is_empty() {
                return Err(PlanError::schema("tasks", "task names must not be empty"));
            }
            task.name = name.clone();
        }

        if self.assigner.groups.is_empty() {
            return Err(PlanError::schema("assigner.groups", "at least one group is required"));
        }
        let mut group_names = BTreeSet::new();
        let mut total = 0.0;
        for (i, group) in self.assigner.groups.iter().enumerate() {
            if !(group.percentage > 0.0 && group.percentage <= 1.0) {
                return Err(PlanError::schema(
                    format!("assigner.groups[{i}].percentage"),
                    format!("must lie in (0, 1], got {}", group.percentage),
                ));
            }
            if group.task_names.is_empty() {
                return Err(PlanError::schema(
                    format!("assigner.groups[{i}].task_names"),
                    "a group needs at least one task",
                ));
            }
            if !group_names.insert(group.group_name.as_str()) {
                return Err(PlanError::Consistency(format!(
                    "assigner group `{}` defined twice",
                    group.group_name
                )));
            }
            let mut trains = 0;
            for task in &group.task_names {
                match self.tasks.get(task) {
                    None => {
                        return Err(PlanError::Consistency(format!(
                            "assigner group `{}` references unknown task `{task}`",
                            group.group_name
                        )))
                    }
                    Some(spec) if spec.kind == TaskKind::Train => trains += 1,
                    Some(_) => {}
                }
            }
            if trains > 1 {
                return Err(PlanError::Consistency(format!(
                    "assigner group `{}` lists more than one TRAIN task",
                    group.group_name
                )));
            }
            total += group.percentage;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(PlanError::Consistency(format!(
                "assigner group percentages sum to {total}, expected 1.0"
            )));
        }
        Ok(())
    }
}

/// Parses and validates a plan. Unknown keys are rejected at every level.
pub fn parse_plan(yaml_text: &str) -> Result<FlPlan, PlanError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(yaml_text).map_err(|e| PlanError::Syntax(e.to_string()))?;
    let mut plan: FlPlan = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        PlanError::Schema {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    plan.normalize()?;
    Ok(plan)
}

pub fn serialize_plan(plan: &FlPlan) -> String {
    serde_yaml::to_string(plan).expect("plan types always serialize")
}

/// SHA-384 of the canonical serialization, truncated to 32 bytes.
///
/// Canonical form: JSON-like text, object keys sorted, floats rendered with
/// 17 significant digits, integers verbatim, strings JSON-escaped.
pub fn plan_hash(plan: &FlPlan) -> PlanHash {
    let digest = Sha384::digest(canonical_serialization(plan).as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest[..32]);
    PlanHash(out)
}

pub fn canonical_serialization(plan: &FlPlan) -> String {
    let value = serde_json::to_value(plan).expect("plan types always serialize");
    let mut out = String::new();
    write_canonical(&value, &mut out);
    out
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                out.push_str(&format!("{f:.16e}"));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string escapes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string escapes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
    }
}

/// Shuffles the roster with a seeded xoshiro256** stream and hands out
/// contiguous slices to the assigner groups in declaration order.
pub fn assign_tasks(plan: &FlPlan, round: u32) -> Result<TaskAssignment, PlanError> {
    let rounds_to_train = plan.rounds_to_train();
    if round >= rounds_to_train {
        return Err(PlanError::RoundOutOfRange {
            round,
            rounds_to_train,
        });
    }
    let mut roster = plan.collaborators.clone();
    let mut rng = Xoshiro256StarStar::seed_from_u64(plan.assignment_seed ^ u64::from(round));
    roster.shuffle(&mut rng);

    let n = roster.len();
    let sizes = group_sizes(
        &plan
            .assigner
            .groups
            .iter()
            .map(|g| g.percentage)
            .collect::<Vec<_>>(),
        n,
    );
    let mut entries = BTreeMap::new();
    let mut offset = 0;
    for (group, size) in plan.assigner.groups.iter().zip(sizes) {
        for label in &roster[offset..offset + size] {
            entries.insert(label.clone(), group.task_names.clone());
        }
        offset += size;
    }
    debug_assert_eq!(offset, n);
    Ok(TaskAssignment { round, entries })
}

/// Round-half-up per group; the last group takes whatever is left so the
/// sizes always add up to `n`.
pub fn group_sizes(percentages: &[f64], n: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(percentages.len());
    let mut remaining = n;
    for (i, p) in percentages.iter().enumerate() {
        let size = if i + 1 == percentages.len() {
            remaining
        } else {
            ((p * n as f64 + 0.5).floor() as usize).min(remaining)
        };
        remaining -= size;
        sizes.push(size);
    }
    sizes
}

/// RFC 1123 hostname: dot-separated labels of letters, digits and hyphens.
pub fn is_hostname(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 253
        && name.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && !label.starts_with('-')
                && !label.ends_with('-')
                && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
        })
}

/// Collaborator labels: non-empty, ASCII letters, digits and dots.
pub fn is_label(label: &str) -> bool {
    !label.is_empty() && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.')
}
