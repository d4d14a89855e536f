//! Dialog model and strict parser for multi-turn tool-call trajectories.
//!
//! A trajectory alternates system/user/assistant/tool messages. Assistant
//! messages embed structured parts in tags: a diagnosis in
//! `<reflect>…</reflect>`, a JSON array of tool calls in `<call>…</call>`,
//! and a user-facing answer in `<final>…</final>`. This module parses those
//! tagged completions into [`ParsedCompletion`], canonicalizes tool calls for
//! deterministic comparison, and decides order-invariant multiset equality of
//! call sets.
//!
//! Absence is distinguished from emptiness throughout: `<reflect></reflect>`
//! is a present-but-empty reflection, while no tag at all means the part is
//! absent. Downstream scoring depends on that distinction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

/// Speaker of a [`Message`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        f.write_str(s)
    }
}

/// One turn of a dialog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

/// An ordered multi-turn dialog.
///
/// Well-formed trajectories start with a system message followed by a user
/// message, and every tool message directly follows an assistant message
/// that carries at least one `<call>` block. [`Trajectory::validate`] checks
/// those invariants; construction itself does not.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub messages: Vec<Message>,
}

impl Trajectory {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages }
    }

    /// Checks the structural invariants of a clean trajectory.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.validate_with(&ParseOptions::default())
    }

    /// [`Trajectory::validate`] with custom tag recognition.
    pub fn validate_with(&self, opts: &ParseOptions) -> Result<(), TrajectoryError> {
        if let Some(first) = self.messages.first() {
            if first.role != Role::System {
                return Err(TrajectoryError::FirstNotSystem { found: first.role });
            }
        }
        if self.messages.len() >= 2 && self.messages[1].role != Role::User {
            return Err(TrajectoryError::SecondNotUser {
                found: self.messages[1].role,
            });
        }
        for (idx, msg) in self.messages.iter().enumerate() {
            if msg.role != Role::Tool {
                continue;
            }
            let preceded_by_call = idx > 0
                && self.messages[idx - 1].role == Role::Assistant
                && parse_completion_with(&self.messages[idx - 1].content, opts)
                    .map(|p| p.calls.is_some())
                    .map_err(|source| TrajectoryError::UnparseableAssistant {
                        index: idx - 1,
                        source,
                    })?;
            if !preceded_by_call {
                return Err(TrajectoryError::ToolWithoutCall { index: idx });
            }
        }
        Ok(())
    }

    /// Indices of assistant messages that carry at least one `<call>` block.
    ///
    /// The returned positions define the call-step numbering used by the
    /// perturbation operators: step `k` is the `k`-th such message.
    pub fn call_message_indices(&self, opts: &ParseOptions) -> Vec<usize> {
        self.messages
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                m.role == Role::Assistant
                    && parse_completion_with(&m.content, opts)
                        .map(|p| p.calls.is_some())
                        .unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// All tool calls appearing in assistant messages, in dialog order.
    ///
    /// Assistant messages that fail to parse contribute nothing.
    pub fn all_calls(&self, opts: &ParseOptions) -> Vec<ToolCall> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .filter_map(|m| parse_completion_with(&m.content, opts).ok())
            .filter_map(|p| p.calls)
            .flatten()
            .collect()
    }
}

/// A structured tool invocation: a tool name plus a JSON object of arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    /// A call with an empty argument object.
    pub fn no_args(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arguments: Map::new(),
        }
    }
}

/// The three-part decomposition of a tagged assistant completion.
///
/// Each part may be absent (no tag pair in the text). `calls` preserves
/// multiplicity and block order; multiple `<call>` blocks are concatenated
/// into the one list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub reflection: Option<String>,
    pub calls: Option<Vec<ToolCall>>,
    #[serde(rename = "final")]
    pub final_text: Option<String>,
}

impl ParsedCompletion {
    /// Number of calls; zero when the part is absent or the list is empty.
    pub fn call_count(&self) -> usize {
        self.calls.as_ref().map_or(0, |c| c.len())
    }

    /// Calls as a slice; empty when the part is absent.
    pub fn calls_slice(&self) -> &[ToolCall] {
        self.calls.as_deref().unwrap_or(&[])
    }

    /// Renders the completion back to tagged text in
    /// reflection → calls → final order.
    ///
    /// Round-trips through [`parse_completion`]: parsing the rendered text
    /// yields an equal `ParsedCompletion`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.reflection {
            out.push_str("<reflect>");
            out.push_str(r);
            out.push_str("</reflect>");
        }
        if let Some(calls) = &self.calls {
            out.push_str("<call>");
            out.push_str(&serde_json::to_string(calls).expect("calls serialize"));
            out.push_str("</call>");
        }
        if let Some(f) = &self.final_text {
            out.push_str("<final>");
            out.push_str(f);
            out.push_str("</final>");
        }
        out
    }

    /// Linearizes present parts into one string: reflection text, each call
    /// in canonical form, then final text, joined by single spaces.
    pub fn linearize(&self) -> String {
        let mut pieces: Vec<String> = Vec::new();
        if let Some(r) = &self.reflection {
            pieces.push(r.clone());
        }
        for call in self.calls_slice() {
            pieces.push(canonicalize_call(call));
        }
        if let Some(f) = &self.final_text {
            pieces.push(f.clone());
        }
        pieces.join(" ")
    }
}

/// Tag recognition options for the completion parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseOptions {
    /// Accepted names for the call tag. Every listed name is recognized when
    /// parsing; rendering always uses the first. Defaults to `["call"]`.
    pub call_tags: Vec<String>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            call_tags: vec!["call".to_string()],
        }
    }
}

/// Parse failure for a tagged completion.
#[derive(Debug, Error)]
pub enum ParseError {
    /// Unbalanced, nested, mismatched, or duplicated tags.
    #[error("malformed tag structure: {0}")]
    MalformedTag(String),
    /// A `<call>` body that is not a JSON array of `{name, arguments}` objects.
    #[error("malformed call JSON: {0}")]
    MalformedCallJson(String),
}

/// Structural violation in a [`Trajectory`].
#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("first message must have role system, found {found}")]
    FirstNotSystem { found: Role },
    #[error("second message must have role user, found {found}")]
    SecondNotUser { found: Role },
    #[error(
        "tool message at index {index} is not preceded by an assistant message with a call block"
    )]
    ToolWithoutCall { index: usize },
    #[error("assistant message at index {index} does not parse: {source}")]
    UnparseableAssistant {
        index: usize,
        #[source]
        source: ParseError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Reflect,
    Call,
    Final,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCall {
    name: String,
    arguments: Map<String, Value>,
}

/// Parses a raw completion into its three tagged parts with default tag
/// recognition (`<reflect>`, `<call>`, `<final>`).
pub fn parse_completion(text: &str) -> Result<ParsedCompletion, ParseError> {
    parse_completion_with(text, &ParseOptions::default())
}

/// [`parse_completion`] with custom call-tag aliases.
///
/// Tags are case-sensitive and may not nest. Text outside tag pairs is
/// ignored. At most one `<reflect>` and one `<final>` block is accepted;
/// every `<call>` block must contain a JSON array of `{name, arguments}`
/// objects, and the arrays concatenate in block order.
pub fn parse_completion_with(
    text: &str,
    opts: &ParseOptions,
) -> Result<ParsedCompletion, ParseError> {
    // (byte offset, tag, is_open, token length)
    let mut marks: Vec<(usize, TagKind, bool, usize)> = Vec::new();
    let mut push_tag = |name: &str, kind: TagKind| {
        let open = format!("<{name}>");
        let close = format!("</{name}>");
        for (pos, m) in text.match_indices(&open) {
            marks.push((pos, kind, true, m.len()));
        }
        for (pos, m) in text.match_indices(&close) {
            marks.push((pos, kind, false, m.len()));
        }
    };
    push_tag("reflect", TagKind::Reflect);
    push_tag("final", TagKind::Final);
    for alias in &opts.call_tags {
        push_tag(alias, TagKind::Call);
    }
    marks.sort_by_key(|&(pos, _, open, _)| (pos, !open));

    let mut reflection: Option<String> = None;
    let mut final_text: Option<String> = None;
    let mut call_blocks: Vec<&str> = Vec::new();
    let mut open: Option<(TagKind, usize)> = None;

    for (pos, kind, is_open, len) in marks {
        match (&open, is_open) {
            (None, true) => open = Some((kind, pos + len)),
            (None, false) => {
                return Err(ParseError::MalformedTag(format!(
                    "closing tag without opening at byte {pos}"
                )))
            }
            (Some(_), true) => {
                return Err(ParseError::MalformedTag(format!(
                    "nested tag opened at byte {pos}"
                )))
            }
            (Some((open_kind, start)), false) => {
                if *open_kind != kind {
                    return Err(ParseError::MalformedTag(format!(
                        "mismatched closing tag at byte {pos}"
                    )));
                }
                let body = &text[*start..pos];
                match kind {
                    TagKind::Reflect => {
                        if reflection.is_some() {
                            return Err(ParseError::MalformedTag(
                                "more than one <reflect> block".to_string(),
                            ));
                        }
                        reflection = Some(body.to_string());
                    }
                    TagKind::Final => {
                        if final_text.is_some() {
                            return Err(ParseError::MalformedTag(
                                "more than one <final> block".to_string(),
                            ));
                        }
                        final_text = Some(body.to_string());
                    }
                    TagKind::Call => call_blocks.push(body),
                }
                open = None;
            }
        }
    }
    if open.is_some() {
        return Err(ParseError::MalformedTag(
            "unclosed tag at end of input".to_string(),
        ));
    }

    let calls = if call_blocks.is_empty() {
        None
    } else {
        let mut all = Vec::new();
        for block in call_blocks {
            let raw: Vec<RawCall> = serde_json::from_str(block)
                .map_err(|e| ParseError::MalformedCallJson(e.to_string()))?;
            for rc in raw {
                if rc.name.is_empty() {
                    return Err(ParseError::MalformedCallJson(
                        "tool call with empty name".to_string(),
                    ));
                }
                all.push(ToolCall {
                    name: rc.name,
                    arguments: rc.arguments,
                });
            }
        }
        Some(all)
    };

    Ok(ParsedCompletion {
        reflection,
        calls,
        final_text,
    })
}

/// Normalizes a JSON value for canonical comparison: object keys are sorted
/// (recursively), and finite floats with zero fraction become integers, so
/// `1.0` and `1` compare equal.
pub fn canonical_value(value: &Value) -> Value {
    match value {
        Value::Number(n) => Value::Number(canonical_number(n)),
        Value::Array(items) => Value::Array(items.iter().map(canonical_value).collect()),
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let mut out = Map::new();
            for (k, v) in sorted {
                out.insert(k.clone(), canonical_value(v));
            }
            Value::Object(out)
        }
        other => other.clone(),
    }
}

fn canonical_number(n: &Number) -> Number {
    if n.is_i64() || n.is_u64() {
        return n.clone();
    }
    let f = n.as_f64().expect("JSON numbers are i64, u64, or f64");
    if f.fract() == 0.0 && f.is_finite() {
        if (0.0..9.007_199_254_740_992e15).contains(&f) {
            return Number::from(f as u64);
        }
        if (-9.007_199_254_740_992e15..0.0).contains(&f) {
            return Number::from(f as i64);
        }
    }
    n.clone()
}

/// Deterministic canonical serialization of a call: recursively sorted keys,
/// integral floats rendered as integers, no insignificant whitespace.
///
/// Two calls are deep-equal after normalization iff their canonical strings
/// are byte-identical.
pub fn canonicalize_call(call: &ToolCall) -> String {
    let mut obj = Map::new();
    obj.insert(
        "arguments".to_string(),
        canonical_value(&Value::Object(call.arguments.clone())),
    );
    obj.insert("name".to_string(), Value::String(call.name.clone()));
    serde_json::to_string(&Value::Object(obj)).expect("canonical call serializes")
}

/// Order-invariant multiset equality of two call sets: true iff the calls
/// can be matched one-to-one with identical names and deep-equal arguments.
pub fn equal_calls(a: &[ToolCall], b: &[ToolCall]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut ca: Vec<String> = a.iter().map(canonicalize_call).collect();
    let mut cb: Vec<String> = b.iter().map(canonicalize_call).collect();
    ca.sort_unstable();
    cb.sort_unstable();
    ca == cb
}
