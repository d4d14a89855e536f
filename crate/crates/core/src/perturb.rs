//! Benchmark construction: perturb clean trajectories into failure cases
//! with synthesized error feedback, then package each case with a reflection
//! and the corrected call.
//!
//! Four operators break an assistant call step:
//!
//! - **order swap**: replace the step with a premature call to the
//!   next-round tool (empty arguments) and a schema-warning reply;
//! - **redundant**: append a verbatim duplicate of the step's first call
//!   and mark the duplicate item in the reply;
//! - **missing**: delete the step and its reply entirely, empty the next
//!   step's arguments, and return a missing-arguments error;
//! - **argument**: corrupt the step's arguments (wrong type, out-of-range,
//!   empty string, or unknown key) and return a parameter-validation error.
//!
//! Every synthesized message is a deterministic function of the clean
//! trajectory and the [`PerturbationSpec`]; bulk generation derives per-item
//! seeds from the master seed, the trajectory index, and the target, so
//! concurrent processing cannot change outputs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::external::LineClient;
use crate::schema::{validate_call, SchemaRegistry};
use crate::trajectory::{
    canonicalize_call, parse_completion, Message, ParseError, ParseOptions, ParsedCompletion, Role,
    ToolCall, Trajectory,
};

/// The four ways to break a call step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    OrderSwap,
    Redundant,
    Missing,
    Argument,
}

impl Operator {
    pub const ALL: [Operator; 4] = [
        Operator::OrderSwap,
        Operator::Redundant,
        Operator::Missing,
        Operator::Argument,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Operator::OrderSwap => "order_swap",
            Operator::Redundant => "redundant",
            Operator::Missing => "missing",
            Operator::Argument => "argument",
        }
    }
}

impl std::fmt::Display for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the argument operator corrupts values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgCorruption {
    WrongType,
    OutOfRange,
    EmptyString,
    UnknownKey,
}

impl ArgCorruption {
    const ALL: [ArgCorruption; 4] = [
        ArgCorruption::WrongType,
        ArgCorruption::OutOfRange,
        ArgCorruption::EmptyString,
        ArgCorruption::UnknownKey,
    ];
}

/// Which call step to break, how, and with what randomness.
///
/// `call_index` counts assistant messages that carry a `<call>` block,
/// starting at 0. The redundant operator cannot target the first step; the
/// missing operator cannot target the last. `argument_mode`, when set, pins
/// the corruption flavor; otherwise it is drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub operator: Operator,
    pub call_index: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument_mode: Option<ArgCorruption>,
}

/// One packaged benchmark item: the broken prefix, the diagnosis, the
/// corrected call, and the untouched continuation of the clean trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub item_id: String,
    /// Broken prefix ending with the bad assistant call and its error reply.
    pub negative_prefix: Trajectory,
    /// Diagnosis naming the failure cause and the corrective action.
    pub reflection: String,
    /// The original, correct call list at the perturbed step.
    pub corrected_call: Vec<ToolCall>,
    /// Clean messages after the perturbed step's tool reply.
    pub suffix: Vec<Message>,
    pub provenance: PerturbationSpec,
}

impl BenchItem {
    /// The repair rendered as a tagged assistant completion:
    /// `<reflect>…</reflect><call>[…]</call>`.
    pub fn render_repair(&self) -> String {
        ParsedCompletion {
            reflection: Some(self.reflection.clone()),
            calls: Some(self.corrected_call.clone()),
            final_text: None,
        }
        .render()
    }

    /// The broken assistant message (second-to-last of the prefix).
    pub fn broken_message(&self) -> Option<&Message> {
        let msgs = &self.negative_prefix.messages;
        msgs.len().checked_sub(2).map(|i| &msgs[i])
    }

    /// Call multiset of the repaired path: prefix calls before the broken
    /// step, then the corrected call, then the suffix calls.
    pub fn replayed_calls(&self) -> Vec<ToolCall> {
        let opts = ParseOptions::default();
        let msgs = &self.negative_prefix.messages;
        let kept = &msgs[..msgs.len().saturating_sub(2)];
        let mut calls = Trajectory::new(kept.to_vec()).all_calls(&opts);
        calls.extend(self.corrected_call.iter().cloned());
        calls.extend(Trajectory::new(self.suffix.clone()).all_calls(&opts));
        calls
    }
}

/// Retention verdict with machine-readable reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub retained: bool,
    pub reasons: Vec<String>,
}

/// Perturbation failure.
#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid perturbation target: {0}")]
    InvalidTarget(String),
    #[error("argument corruption needs at least one argument at the target step")]
    NoCorruptibleArgs,
    #[error("clean trajectory does not parse: {0}")]
    Parse(#[from] ParseError),
    #[error("external reflection generator failed: {0}")]
    ExternalReflector(String),
}

const ORDER_SWAP_REPLY: &str = "The called function executed but returned partial/mismatched data because the arguments did not match the expected schema for this call.";
const REDUNDANT_REPLY: &str = "This item duplicates a previous result.";
const MISSING_REPLY: &str = "Missing required arguments. The function call failed because necessary parameters were not provided.";
const ARGUMENT_REPLY: &str = "One or more arguments are invalid.";

struct Step {
    /// Message index of the assistant call message.
    msg_index: usize,
    calls: Vec<ToolCall>,
}

fn call_steps(clean: &Trajectory) -> Result<Vec<Step>, PerturbError> {
    let mut steps = Vec::new();
    for (i, msg) in clean.messages.iter().enumerate() {
        if msg.role != Role::Assistant {
            continue;
        }
        let parsed = parse_completion(&msg.content)?;
        if let Some(calls) = parsed.calls {
            steps.push(Step {
                msg_index: i,
                calls,
            });
        }
    }
    Ok(steps)
}

fn step_at<'a>(steps: &'a [Step], spec: &PerturbationSpec) -> Result<&'a Step, PerturbError> {
    let n = steps.len();
    let k = spec.call_index;
    if k >= n {
        return Err(PerturbError::InvalidTarget(format!(
            "call index {k} out of range for {n} call steps"
        )));
    }
    match spec.operator {
        Operator::Redundant if k == 0 => Err(PerturbError::InvalidTarget(
            "redundant operator cannot target the first call step".to_string(),
        )),
        Operator::Missing if k + 1 >= n => Err(PerturbError::InvalidTarget(
            "missing operator cannot target the last call step".to_string(),
        )),
        _ => Ok(&steps[k]),
    }
}

fn render_calls(calls: &[ToolCall]) -> String {
    ParsedCompletion {
        reflection: None,
        calls: Some(calls.to_vec()),
        final_text: None,
    }
    .render()
}

fn compact(value: &Value) -> String {
    serde_json::to_string(value).expect("reply JSON serializes")
}

fn wrong_typed(v: &Value) -> Value {
    match v {
        Value::String(_) => json!(999999),
        Value::Number(_) => json!("many"),
        Value::Bool(_) => json!("yes"),
        _ => json!("invalid"),
    }
}

fn corrupt_args(calls: &[ToolCall], mode: ArgCorruption) -> Vec<ToolCall> {
    calls
        .iter()
        .map(|call| {
            let mut args = call.arguments.clone();
            match mode {
                ArgCorruption::WrongType => {
                    for (_, v) in args.iter_mut() {
                        *v = wrong_typed(v);
                    }
                }
                ArgCorruption::OutOfRange => {
                    for (_, v) in args.iter_mut() {
                        if v.is_number() {
                            *v = json!(999999999);
                        }
                    }
                }
                ArgCorruption::EmptyString => {
                    for (_, v) in args.iter_mut() {
                        if v.is_string() {
                            *v = json!("");
                        }
                    }
                }
                ArgCorruption::UnknownKey => {
                    let mut key = "unexpected_arg".to_string();
                    while args.contains_key(&key) {
                        key.push('_');
                    }
                    args.insert(key, json!(true));
                }
            }
            ToolCall::new(call.name.clone(), args)
        })
        .collect()
}

/// Modes that can change the given call list at all.
fn eligible_modes(calls: &[ToolCall]) -> Vec<ArgCorruption> {
    let has_string = calls
        .iter()
        .any(|c| c.arguments.values().any(Value::is_string));
    let has_number = calls
        .iter()
        .any(|c| c.arguments.values().any(Value::is_number));
    ArgCorruption::ALL
        .into_iter()
        .filter(|mode| match mode {
            ArgCorruption::WrongType | ArgCorruption::UnknownKey => true,
            ArgCorruption::OutOfRange => has_number,
            ArgCorruption::EmptyString => has_string,
        })
        .collect()
}

/// Applies the operator to the addressed step, returning the broken
/// assistant message and the synthesized error reply.
///
/// Deterministic given `(clean, spec)`.
pub fn apply_perturbation(
    clean: &Trajectory,
    spec: &PerturbationSpec,
) -> Result<(Message, Message), PerturbError> {
    let steps = call_steps(clean)?;
    let step = step_at(&steps, spec)?;

    match spec.operator {
        Operator::OrderSwap => {
            // A plausible-but-premature call: the next round's tool (or the
            // last round's when none follows), issued with empty arguments.
            let source = if spec.call_index + 1 < steps.len() {
                &steps[spec.call_index + 1]
            } else {
                steps.last().expect("at least one step")
            };
            let name = source
                .calls
                .first()
                .ok_or_else(|| PerturbError::InvalidTarget("source step has no calls".into()))?
                .name
                .clone();
            let broken = Message::assistant(render_calls(&[ToolCall::no_args(name.clone())]));
            let reply = json!({
                "tool": name,
                "status": "warning",
                "message": ORDER_SWAP_REPLY,
                "result": null,
            });
            Ok((broken, Message::tool(compact(&reply))))
        }
        Operator::Redundant => {
            let first = step
                .calls
                .first()
                .ok_or_else(|| PerturbError::InvalidTarget("target step has no calls".into()))?;
            let mut duplicated = step.calls.clone();
            duplicated.push(first.clone());
            let broken = Message::assistant(render_calls(&duplicated));

            let reply_idx = step.msg_index + 1;
            let original_reply = clean
                .messages
                .get(reply_idx)
                .filter(|m| m.role == Role::Tool)
                .ok_or_else(|| {
                    PerturbError::InvalidTarget("target step has no tool reply".into())
                })?;
            let reply = redundant_reply(&original_reply.content);
            Ok((broken, Message::tool(reply)))
        }
        Operator::Missing => {
            let next = &steps[spec.call_index + 1];
            let degraded: Vec<ToolCall> = next
                .calls
                .iter()
                .map(|c| ToolCall::no_args(c.name.clone()))
                .collect();
            let broken = Message::assistant(render_calls(&degraded));
            let reply = json!([{
                "status": "error",
                "message": MISSING_REPLY,
                "result": null,
            }]);
            Ok((broken, Message::tool(compact(&reply))))
        }
        Operator::Argument => {
            let total_args: usize = step.calls.iter().map(|c| c.arguments.len()).sum();
            if total_args == 0 {
                return Err(PerturbError::NoCorruptibleArgs);
            }
            let mode = spec.argument_mode.unwrap_or_else(|| {
                let modes = eligible_modes(&step.calls);
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                modes[rng.gen_range(0..modes.len())]
            });
            let corrupted = corrupt_args(&step.calls, mode);
            let broken = Message::assistant(render_calls(&corrupted));
            let name = &step.calls[0].name;
            let reply = json!([{
                "status": "error",
                "message": format!("Parameter validation failed for {name}. {ARGUMENT_REPLY}"),
                "result": null,
                "error_code": "INVALID_PARAMETERS",
            }]);
            Ok((broken, Message::tool(compact(&reply))))
        }
    }
}

/// Builds the redundant tool reply: the original reply content with a
/// duplicate of its first item appended, marked as redundant.
fn redundant_reply(original: &str) -> String {
    let marker = |base: Value| -> Value {
        match base {
            Value::Object(mut map) => {
                map.insert("status".to_string(), json!("redundant"));
                map.insert("message".to_string(), json!(REDUNDANT_REPLY));
                Value::Object(map)
            }
            _ => json!({"status": "redundant", "message": REDUNDANT_REPLY}),
        }
    };
    let items = match serde_json::from_str::<Value>(original) {
        Ok(Value::Array(mut items)) => {
            let dup = marker(items.first().cloned().unwrap_or(Value::Null));
            items.push(dup);
            items
        }
        Ok(other) => {
            let dup = marker(other.clone());
            vec![other, dup]
        }
        Err(_) => vec![json!(original), marker(Value::Null)],
    };
    compact(&Value::Array(items))
}

/// The broken prefix: clean messages before the perturbed step, then the
/// broken call and its error reply.
pub fn build_negative(
    clean: &Trajectory,
    spec: &PerturbationSpec,
) -> Result<Trajectory, PerturbError> {
    let steps = call_steps(clean)?;
    let step = step_at(&steps, spec)?;
    let (broken, reply) = apply_perturbation(clean, spec)?;
    let mut messages = clean.messages[..step.msg_index].to_vec();
    messages.push(broken);
    messages.push(reply);
    Ok(Trajectory::new(messages))
}

/// Keys whose values differ between the clean and broken call lists,
/// including keys present on only one side. Lists are compared pairwise by
/// position; extra calls contribute all their keys.
fn corrupted_keys(clean_calls: &[ToolCall], broken_calls: &[ToolCall]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    let pairs = clean_calls.len().max(broken_calls.len());
    for i in 0..pairs {
        match (clean_calls.get(i), broken_calls.get(i)) {
            (Some(c), Some(b)) => {
                for (k, v) in &c.arguments {
                    if b.arguments.get(k).map(|bv| canonical_eq(v, bv)) != Some(true) {
                        keys.push(k.clone());
                    }
                }
                for k in b.arguments.keys() {
                    if !c.arguments.contains_key(k) {
                        keys.push(k.clone());
                    }
                }
            }
            (Some(only), None) | (None, Some(only)) => {
                keys.extend(only.arguments.keys().cloned());
            }
            (None, None) => unreachable!(),
        }
    }
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn canonical_eq(a: &Value, b: &Value) -> bool {
    crate::trajectory::canonical_value(a) == crate::trajectory::canonical_value(b)
}

/// Deterministic diagnosis template for one perturbed step.
///
/// Always names the broken call's tool; the missing-call template also names
/// the omitted tool, and the argument template names every corrupted key.
pub fn synth_reflection(
    clean_pair: (&Message, &Message),
    broken_pair: (&Message, &Message),
    operator: Operator,
) -> String {
    let first_name = |msg: &Message| -> String {
        parse_completion(&msg.content)
            .ok()
            .and_then(|p| p.calls)
            .and_then(|c| c.first().map(|call| call.name.clone()))
            .unwrap_or_else(|| "unknown".to_string())
    };
    let correct = first_name(clean_pair.0);
    let broken = first_name(broken_pair.0);
    match operator {
        Operator::OrderSwap => format!(
            "The call to `{broken}` was premature and ran with empty arguments, so it returned \
             mismatched data. The correct next step is `{correct}` with its required arguments."
        ),
        Operator::Redundant => format!(
            "The last call list is redundant: `{correct}` was repeated with identical arguments \
             and the duplicate added no information. Keep a single call to `{correct}` and continue."
        ),
        Operator::Missing => format!(
            "The call to `{broken}` failed because a prerequisite call was missed: `{correct}` \
             was never invoked, so its output was unavailable. First call `{correct}` with the \
             original arguments, then retry `{broken}`."
        ),
        Operator::Argument => {
            let clean_calls = parse_completion(&clean_pair.0.content)
                .ok()
                .and_then(|p| p.calls)
                .unwrap_or_default();
            let broken_calls = parse_completion(&broken_pair.0.content)
                .ok()
                .and_then(|p| p.calls)
                .unwrap_or_default();
            let keys = corrupted_keys(&clean_calls, &broken_calls);
            let listed = keys
                .iter()
                .map(|k| format!("`{k}`"))
                .collect::<Vec<_>>()
                .join(", ");
            format!(
                "The call to `{correct}` failed parameter validation: argument(s) {listed} did \
                 not match the expected schema. Retry `{correct}` with the original, schema-valid \
                 values."
            )
        }
    }
}

/// Packages one item: broken prefix, template reflection, the original call
/// list at the perturbed step, and the clean suffix beyond that step's reply.
pub fn package_item(
    clean: &Trajectory,
    spec: &PerturbationSpec,
) -> Result<BenchItem, PerturbError> {
    let steps = call_steps(clean)?;
    let step = step_at(&steps, spec)?;
    let reply_idx = step.msg_index + 1;
    let clean_reply = clean
        .messages
        .get(reply_idx)
        .filter(|m| m.role == Role::Tool)
        .ok_or_else(|| PerturbError::InvalidTarget("perturbed step has no tool reply".into()))?;

    let negative_prefix = build_negative(clean, spec)?;
    let n = negative_prefix.messages.len();
    let (broken, err_reply) = (
        &negative_prefix.messages[n - 2],
        &negative_prefix.messages[n - 1],
    );
    let reflection = synth_reflection(
        (&clean.messages[step.msg_index], clean_reply),
        (broken, err_reply),
        spec.operator,
    );

    Ok(BenchItem {
        item_id: format!("{}-k{}-s{}", spec.operator, spec.call_index, spec.seed),
        negative_prefix: negative_prefix.clone(),
        reflection,
        corrected_call: step.calls.clone(),
        suffix: clean.messages[reply_idx + 1..].to_vec(),
        provenance: spec.clone(),
    })
}

/// The full training dialog: broken prefix, the repair message, the clean
/// tool reply for the repaired step, then the clean suffix.
pub fn render_training_messages(
    clean: &Trajectory,
    item: &BenchItem,
) -> Result<Trajectory, PerturbError> {
    let steps = call_steps(clean)?;
    let step = step_at(&steps, &item.provenance)?;
    let clean_reply = clean
        .messages
        .get(step.msg_index + 1)
        .filter(|m| m.role == Role::Tool)
        .ok_or_else(|| PerturbError::InvalidTarget("perturbed step has no tool reply".into()))?;
    let mut messages = item.negative_prefix.messages.clone();
    messages.push(Message::assistant(item.render_repair()));
    messages.push(clean_reply.clone());
    messages.extend(item.suffix.iter().cloned());
    Ok(Trajectory::new(messages))
}

/// Retention check: tags reparse, the corrected call executes, and the
/// reflection cites the broken tool (plus a corrupted key for the argument
/// operator).
pub fn validate_item(item: &BenchItem, registry: &SchemaRegistry) -> ItemVerdict {
    let mut reasons = Vec::new();

    // (i) every tagged region in the rendered item reparses cleanly.
    let mut render_ok = true;
    for msg in &item.negative_prefix.messages {
        if msg.role == Role::Assistant && parse_completion(&msg.content).is_err() {
            render_ok = false;
        }
    }
    match parse_completion(&item.render_repair()) {
        Ok(parsed) => {
            if parsed.reflection.as_deref() != Some(item.reflection.as_str())
                || parsed.calls_slice() != item.corrected_call.as_slice()
            {
                render_ok = false;
            }
        }
        Err(_) => render_ok = false,
    }
    if !render_ok {
        reasons.push("malformed_render".to_string());
    }

    // (ii) the corrected call is executable.
    for call in &item.corrected_call {
        let report = validate_call(call, registry);
        if !report.is_ok() {
            reasons.push(format!("unexecutable_repair:{}", call.name));
        }
    }

    // (iii) the reflection cites the clean-broken contrast.
    let broken_calls: Vec<ToolCall> = item
        .broken_message()
        .and_then(|m| parse_completion(&m.content).ok())
        .and_then(|p| p.calls)
        .unwrap_or_default();
    let broken_name = broken_calls
        .first()
        .map(|c| c.name.clone())
        .unwrap_or_default();
    if broken_name.is_empty() || !item.reflection.contains(&broken_name) {
        reasons.push("citation_missing_tool".to_string());
    }
    if item.provenance.operator == Operator::Argument {
        let keys = corrupted_keys(&item.corrected_call, &broken_calls);
        if !keys.iter().any(|k| item.reflection.contains(k.as_str())) {
            reasons.push("citation_missing_key".to_string());
        }
    }

    ItemVerdict {
        retained: reasons.is_empty(),
        reasons,
    }
}

/// Per-operator sampling weights for bulk generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorMix {
    pub order_swap: f64,
    pub redundant: f64,
    pub missing: f64,
    pub argument: f64,
}

impl Default for OperatorMix {
    fn default() -> Self {
        Self {
            order_swap: 1.0,
            redundant: 1.0,
            missing: 1.0,
            argument: 1.0,
        }
    }
}

impl OperatorMix {
    fn weight(&self, op: Operator) -> f64 {
        match op {
            Operator::OrderSwap => self.order_swap,
            Operator::Redundant => self.redundant,
            Operator::Missing => self.missing,
            Operator::Argument => self.argument,
        }
    }
}

/// External reflection generator: line-delimited JSON over a child process.
/// Request `{"operator", "clean_call", "clean_reply", "broken_call",
/// "broken_reply"}`, response `{"reflection": …}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalReflectorConfig {
    pub command: Vec<String>,
    #[serde(default = "default_reflector_timeout")]
    pub timeout_ms: u64,
}

fn default_reflector_timeout() -> u64 {
    crate::external::DEFAULT_TIMEOUT_MS
}

/// Bulk generation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbOptions {
    pub seed: u64,
    pub operator_mix: OperatorMix,
    /// Fraction of retained items routed to the test split.
    pub test_fraction: f64,
    /// Fraction of trajectories whose clean form is also emitted to train.
    pub passthrough_fraction: f64,
    /// Distinct perturbations drawn per trajectory.
    pub items_per_trajectory: usize,
    /// Optional external generator that replaces the reflection templates.
    pub external_reflector: Option<ExternalReflectorConfig>,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            operator_mix: OperatorMix::default(),
            test_fraction: 0.2,
            passthrough_fraction: 0.0,
            items_per_trajectory: 1,
            external_reflector: None,
        }
    }
}

impl PerturbOptions {
    pub fn validate(&self) -> Result<(), PerturbError> {
        for (name, v) in [
            ("test_fraction", self.test_fraction),
            ("passthrough_fraction", self.passthrough_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PerturbError::InvalidTarget(format!(
                    "{name} must be in [0, 1]"
                )));
            }
        }
        if self.items_per_trajectory == 0 {
            return Err(PerturbError::InvalidTarget(
                "items_per_trajectory must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// A training record: the full rendered dialog. Pass-through records carry
/// no provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub item_id: String,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PerturbationSpec>,
}

/// A test record: the broken prefix only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub item_id: String,
    pub messages: Vec<Message>,
}

/// Hidden answer for a test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub reflection: String,
    pub corrected_call: Vec<ToolCall>,
    pub operator: Operator,
    pub target_index: usize,
}

/// A rejected trajectory or item with its reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub item_id: String,
    pub reasons: Vec<String>,
}

/// Everything one pipeline run emits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratedCorpus {
    pub train: Vec<TrainRecord>,
    pub test: Vec<TestRecord>,
    pub answers: Vec<AnswerRecord>,
    pub rejects: Vec<RejectRecord>,
    /// Retained items in emission order, for downstream checks.
    pub items: Vec<BenchItem>,
}

fn mix_seed(master: u64, salt: u64) -> u64 {
    // splitmix64 over the combined value.
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn spec_candidates(
    clean: &Trajectory,
    steps: &[Step],
    mix: &OperatorMix,
) -> Vec<(Operator, usize, f64)> {
    let n = steps.len();
    let mut out = Vec::new();
    for op in Operator::ALL {
        let weight = mix.weight(op);
        if weight <= 0.0 {
            continue;
        }
        for (k, step) in steps.iter().enumerate() {
            let valid = match op {
                Operator::OrderSwap => true,
                Operator::Redundant => k > 0,
                Operator::Missing => k + 1 < n,
                Operator::Argument => step.calls.iter().any(|c| !c.arguments.is_empty()),
            };
            // Packaging needs the step's tool reply.
            let has_reply = clean
                .messages
                .get(step.msg_index + 1)
                .is_some_and(|m| m.role == Role::Tool);
            if valid && has_reply {
                out.push((op, k, weight));
            }
        }
    }
    out
}

fn weighted_draw(
    candidates: &mut Vec<(Operator, usize, f64)>,
    rng: &mut ChaCha8Rng,
) -> Option<(Operator, usize)> {
    let total: f64 = candidates.iter().map(|(_, _, w)| w).sum();
    if candidates.is_empty() || total <= 0.0 {
        return None;
    }
    let mut target = rng.gen_range(0.0..total);
    let mut chosen = candidates.len() - 1;
    for (i, (_, _, w)) in candidates.iter().enumerate() {
        if target < *w {
            chosen = i;
            break;
        }
        target -= w;
    }
    let (op, k, _) = candidates.remove(chosen);
    Some((op, k))
}

/// Picks an argument-corruption mode that provably breaks the call under
/// the registry, preferring the seeded draw among all breaking modes.
fn failing_mode(
    calls: &[ToolCall],
    registry: &SchemaRegistry,
    rng: &mut ChaCha8Rng,
) -> ArgCorruption {
    let breaking: Vec<ArgCorruption> = eligible_modes(calls)
        .into_iter()
        .filter(|mode| {
            corrupt_args(calls, *mode)
                .iter()
                .any(|c| !validate_call(c, registry).is_ok())
        })
        .collect();
    if breaking.is_empty() {
        // Wrong-type corruption always fails for schema-valid calls with
        // at least one argument.
        ArgCorruption::WrongType
    } else {
        breaking[rng.gen_range(0..breaking.len())]
    }
}

/// Whether the broken step actually fails against the registry (or, for the
/// redundant operator, contains a verbatim duplicate).
fn is_negative(item: &BenchItem, registry: &SchemaRegistry) -> bool {
    let broken_calls: Vec<ToolCall> = item
        .broken_message()
        .and_then(|m| parse_completion(&m.content).ok())
        .and_then(|p| p.calls)
        .unwrap_or_default();
    match item.provenance.operator {
        Operator::Redundant => {
            let canon: Vec<String> = broken_calls.iter().map(canonicalize_call).collect();
            canon
                .iter()
                .enumerate()
                .any(|(i, c)| canon.iter().skip(i + 1).any(|d| c == d))
        }
        _ => {
            !broken_calls.is_empty()
                && broken_calls
                    .iter()
                    .any(|c| !validate_call(c, registry).is_ok())
        }
    }
}

/// Runs the full pipeline over a clean corpus.
///
/// Output is a pure function of `(corpus, registry, opts)`; per-item
/// randomness derives from the master seed, the trajectory index, and the
/// drawn target, so trajectories could be processed in any order.
pub fn generate(
    corpus: &[Trajectory],
    registry: &SchemaRegistry,
    opts: &PerturbOptions,
) -> Result<GeneratedCorpus, PerturbError> {
    opts.validate()?;
    let reflector = opts
        .external_reflector
        .as_ref()
        .map(|cfg| LineClient::new(cfg.command.clone(), cfg.timeout_ms));

    let mut out = GeneratedCorpus::default();
    for (traj_idx, clean) in corpus.iter().enumerate() {
        let traj_id = format!("t{traj_idx:05}");
        if let Err(e) = clean.validate() {
            out.rejects.push(RejectRecord {
                item_id: traj_id,
                reasons: vec![format!("invalid_trajectory:{e}")],
            });
            continue;
        }
        let steps = match call_steps(clean) {
            Ok(s) => s,
            Err(e) => {
                out.rejects.push(RejectRecord {
                    item_id: traj_id,
                    reasons: vec![format!("unparseable:{e}")],
                });
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, traj_idx as u64));
        let mut candidates = spec_candidates(clean, &steps, &opts.operator_mix);
        if candidates.is_empty() {
            out.rejects.push(RejectRecord {
                item_id: traj_id,
                reasons: vec!["no_valid_perturbation".to_string()],
            });
            continue;
        }

        for _ in 0..opts.items_per_trajectory {
            let Some((op, k)) = weighted_draw(&mut candidates, &mut rng) else {
                break;
            };
            let item_seed = mix_seed(
                opts.seed,
                mix_seed(traj_idx as u64, (k as u64) << 3 | op as u64),
            );
            let mut spec = PerturbationSpec {
                operator: op,
                call_index: k,
                seed: item_seed,
                argument_mode: None,
            };
            if op == Operator::Argument {
                let mut mode_rng = ChaCha8Rng::seed_from_u64(item_seed);
                spec.argument_mode = Some(failing_mode(&steps[k].calls, registry, &mut mode_rng));
            }
            let item_id = format!("{traj_id}-{}-k{k}", op.as_str());

            let mut item = match package_item(clean, &spec) {
                Ok(item) => item,
                Err(e) => {
                    out.rejects.push(RejectRecord {
                        item_id,
                        reasons: vec![format!("packaging_failed:{e}")],
                    });
                    continue;
                }
            };
            item.item_id = item_id.clone();

            if let Some(client) = &reflector {
                match external_reflection(client, clean, &item) {
                    Ok(text) => item.reflection = text,
                    Err(e) => {
                        out.rejects.push(RejectRecord {
                            item_id,
                            reasons: vec![format!("reflector_failed:{e}")],
                        });
                        continue;
                    }
                }
            }

            let verdict = validate_item(&item, registry);
            if !verdict.retained {
                out.rejects.push(RejectRecord {
                    item_id,
                    reasons: verdict.reasons,
                });
                continue;
            }
            if !is_negative(&item, registry) {
                out.rejects.push(RejectRecord {
                    item_id,
                    reasons: vec!["broken_call_still_executable".to_string()],
                });
                continue;
            }

            let to_test = rng.gen_bool(opts.test_fraction);
            if to_test {
                out.test.push(TestRecord {
                    item_id: item_id.clone(),
                    messages: item.negative_prefix.messages.clone(),
                });
                out.answers.push(AnswerRecord {
                    item_id: item_id.clone(),
                    reflection: item.reflection.clone(),
                    corrected_call: item.corrected_call.clone(),
                    operator: op,
                    target_index: k,
                });
            } else {
                let rendered = render_training_messages(clean, &item)?;
                out.train.push(TrainRecord {
                    item_id: item_id.clone(),
                    messages: rendered.messages,
                    provenance: Some(spec.clone()),
                });
            }
            out.items.push(item);
        }

        if opts.passthrough_fraction > 0.0 && rng.gen_bool(opts.passthrough_fraction) {
            out.train.push(TrainRecord {
                item_id: format!("{traj_id}-orig"),
                messages: clean.messages.clone(),
                provenance: None,
            });
        }
    }
    Ok(out)
}

fn external_reflection(
    client: &LineClient,
    clean: &Trajectory,
    item: &BenchItem,
) -> Result<String, PerturbError> {
    let steps = call_steps(clean)?;
    let step = step_at(&steps, &item.provenance)?;
    let n = item.negative_prefix.messages.len();
    let request = json!({
        "operator": item.provenance.operator.as_str(),
        "clean_call": clean.messages[step.msg_index].content,
        "clean_reply": clean.messages.get(step.msg_index + 1).map(|m| m.content.as_str()),
        "broken_call": item.negative_prefix.messages[n - 2].content,
        "broken_reply": item.negative_prefix.messages[n - 1].content,
    });
    let reply = client
        .call(&request)
        .map_err(|e| PerturbError::ExternalReflector(e.to_string()))?;
    reply
        .get("reflection")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| {
            PerturbError::ExternalReflector("reply missing `reflection` field".to_string())
        })
}
