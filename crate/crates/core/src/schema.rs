//! Tool-schema registry and mock executor.
//!
//! The registry is the executability oracle for the perturbation pipeline
//! and for repair validation: a call "executes" iff the tool exists, all
//! required parameters are present, no unknown parameters appear, and every
//! value satisfies its declared type, enum, and range constraints.
//!
//! Validation is deliberately strict: there is no type coercion (`"1"` does
//! not satisfy an integer parameter), and required string parameters reject
//! the empty string unless the schema opts out. Strictness is what makes
//! argument corruption detectable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::trajectory::{canonical_value, ToolCall};

/// Declared type of a tool parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Object,
    Array,
}

/// Constraints for one parameter of a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default)]
    pub required: bool,
    /// Allowed values; checked by deep equality after canonicalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
    /// Inclusive `[min, max]` bounds for numeric parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    /// Whether an empty string is rejected. Defaults to true for required
    /// string parameters and false otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonempty: Option<bool>,
}

impl ParamSpec {
    pub fn new(param_type: ParamType, required: bool) -> Self {
        Self {
            param_type,
            required,
            enum_values: None,
            range: None,
            nonempty: None,
        }
    }

    fn rejects_empty_string(&self) -> bool {
        self.nonempty
            .unwrap_or(self.required && self.param_type == ParamType::String)
    }
}

/// Schema of one tool: its name and parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamSpec>,
}

/// Outcome of validating a call against the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
}

/// Machine-readable failure code, in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecErrorCode {
    UnknownTool,
    MissingRequired,
    UnknownParameter,
    InvalidParameters,
}

/// Report from the mock executor. `status == Ok` iff `code` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ExecErrorCode>,
    pub message: String,
}

impl ExecReport {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    fn ok(name: &str) -> Self {
        Self {
            status: ExecStatus::Ok,
            code: None,
            message: format!("Call to {name} is executable."),
        }
    }

    fn error(code: ExecErrorCode, message: String) -> Self {
        Self {
            status: ExecStatus::Error,
            code: Some(code),
            message,
        }
    }
}

/// Registry construction or load failure.
#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("duplicate tool name `{0}` in registry")]
    DuplicateTool(String),
    #[error("tool schema with empty name")]
    EmptyToolName,
    #[error("failed to read schema file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse schema file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Immutable collection of tool schemas, keyed by tool name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SchemaRegistry {
    tools: BTreeMap<String, ToolSchema>,
}

impl SchemaRegistry {
    pub fn new(schemas: Vec<ToolSchema>) -> Result<Self, SchemaError> {
        let mut tools = BTreeMap::new();
        for schema in schemas {
            if schema.name.is_empty() {
                return Err(SchemaError::EmptyToolName);
            }
            let name = schema.name.clone();
            if tools.insert(name.clone(), schema).is_some() {
                return Err(SchemaError::DuplicateTool(name));
            }
        }
        Ok(Self { tools })
    }

    /// Loads a registry from a JSON array of tool schemas.
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schemas: Vec<ToolSchema> = serde_json::from_str(text)?;
        Self::new(schemas)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSchema> {
        self.tools.values()
    }

    pub fn to_schemas(&self) -> Vec<ToolSchema> {
        self.tools.values().cloned().collect()
    }
}

/// Validates a call against the registry.
///
/// Checks run in a fixed order (unknown tool, missing required parameters,
/// unknown parameters, invalid values) and the first failing check
/// determines the report. Within a check, parameters are visited in sorted
/// order, so reports are deterministic under argument-key reordering.
pub fn validate_call(call: &ToolCall, registry: &SchemaRegistry) -> ExecReport {
    let Some(schema) = registry.get(&call.name) else {
        return ExecReport::error(
            ExecErrorCode::UnknownTool,
            format!("Unknown tool `{}`.", call.name),
        );
    };

    let missing: Vec<&String> = schema
        .params
        .iter()
        .filter(|(name, spec)| spec.required && !call.arguments.contains_key(*name))
        .map(|(name, _)| name)
        .collect();
    if !missing.is_empty() {
        return ExecReport::error(
            ExecErrorCode::MissingRequired,
            format!(
                "Missing required arguments for {}: {}.",
                call.name,
                join_names(&missing)
            ),
        );
    }

    let mut arg_names: Vec<&String> = call.arguments.keys().collect();
    arg_names.sort_unstable();
    let unknown: Vec<&String> = arg_names
        .iter()
        .copied()
        .filter(|name| !schema.params.contains_key(*name))
        .collect();
    if !unknown.is_empty() {
        return ExecReport::error(
            ExecErrorCode::UnknownParameter,
            format!(
                "Unknown parameter(s) for {}: {}.",
                call.name,
                join_names(&unknown)
            ),
        );
    }

    let mut invalid: Vec<String> = Vec::new();
    for name in arg_names {
        let spec = &schema.params[name];
        let value = &call.arguments[name];
        if let Some(reason) = invalid_reason(value, spec) {
            invalid.push(format!("`{name}` {reason}"));
        }
    }
    if !invalid.is_empty() {
        return ExecReport::error(
            ExecErrorCode::InvalidParameters,
            format!(
                "Parameter validation failed for {}. One or more arguments are invalid: {}.",
                call.name,
                invalid.join("; ")
            ),
        );
    }

    ExecReport::ok(&call.name)
}

fn join_names(names: &[&String]) -> String {
    names
        .iter()
        .map(|n| format!("`{n}`"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn invalid_reason(value: &Value, spec: &ParamSpec) -> Option<String> {
    let type_ok = match spec.param_type {
        ParamType::String => value.is_string(),
        ParamType::Number => value.is_number(),
        ParamType::Integer => value.is_i64() || value.is_u64(),
        ParamType::Boolean => value.is_boolean(),
        ParamType::Object => value.is_object(),
        ParamType::Array => value.is_array(),
    };
    if !type_ok {
        return Some(format!("is not of type {:?}", spec.param_type).to_lowercase());
    }
    if spec.rejects_empty_string() && value.as_str() == Some("") {
        return Some("must not be empty".to_string());
    }
    if let Some(allowed) = &spec.enum_values {
        let canon = canonical_value(value);
        if !allowed.iter().any(|v| canonical_value(v) == canon) {
            return Some("is not one of the allowed values".to_string());
        }
    }
    if let Some((min, max)) = spec.range {
        if let Some(n) = value.as_f64() {
            if n < min || n > max {
                return Some(format!("is out of range [{min}, {max}]"));
            }
        }
    }
    None
}
