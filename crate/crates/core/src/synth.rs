//! Seeded generation of synthetic tool registries and clean trajectories.
//!
//! The generated dialogs follow the documented corpus shape (system, user,
//! alternating `<call>`/tool-reply rounds, a `<final>` answer) with calls
//! that validate against the generated registry. Every tool carries at least
//! one required parameter so that empty-argument corruptions are always
//! detectable. Output is a pure function of the configuration.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::schema::{ParamSpec, ParamType, SchemaRegistry, ToolSchema};
use crate::trajectory::{Message, ParsedCompletion, ToolCall, Trajectory};

/// Knobs for the synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub trajectories: usize,
    /// Distinct tools in the registry (capped by the name pool).
    pub tools: usize,
    /// Inclusive bounds on call rounds per trajectory.
    pub min_rounds: usize,
    pub max_rounds: usize,
    /// Probability that a round issues two calls instead of one.
    pub multi_call_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trajectories: 20,
            tools: 8,
            min_rounds: 2,
            max_rounds: 5,
            multi_call_prob: 0.15,
        }
    }
}

const TOOL_NAMES: &[&str] = &[
    "search_flights",
    "book_flight",
    "search_hotels",
    "book_hotel",
    "arrange_transport",
    "get_weather",
    "fetch_user_profile",
    "add_tax_document",
    "list_products",
    "create_order",
    "track_package",
    "get_account_balance",
    "start_watering",
    "check_water_level",
    "get_bank_services",
    "find_recipes",
];

const PARAM_NAMES: &[&str] = &[
    "city", "date", "query", "user_id", "amount", "count", "category", "location", "duration",
    "style", "priority", "limit", "name", "season",
];

const STRING_VALUES: &[&str] = &[
    "backyard",
    "impressionism",
    "new york",
    "SFO",
    "JFK",
    "2025-11-02",
    "u_1293",
    "breakfast",
    "spring",
    "B001",
];

const ENUM_VALUES: &[&str] = &["low", "medium", "high"];

/// Generates a registry of `cfg.tools` distinct tools.
pub fn synth_registry(cfg: &SynthConfig) -> SchemaRegistry {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x52454749);
    let count = cfg.tools.min(TOOL_NAMES.len()).max(1);
    let mut schemas = Vec::with_capacity(count);
    for name in TOOL_NAMES.iter().take(count) {
        let mut params = BTreeMap::new();
        let n_params = rng.gen_range(1..=4usize);
        let mut names: Vec<&str> = PARAM_NAMES.to_vec();
        names.shuffle(&mut rng);
        for (slot, pname) in names.into_iter().take(n_params).enumerate() {
            let ptype = match rng.gen_range(0..6u8) {
                0..=2 => ParamType::String,
                3 => ParamType::Integer,
                4 => ParamType::Number,
                _ => ParamType::Boolean,
            };
            // The first parameter is always required so every tool rejects
            // an empty argument object.
            let required = slot == 0 || rng.gen_bool(0.7);
            let mut spec = ParamSpec::new(ptype, required);
            match ptype {
                ParamType::Integer if rng.gen_bool(0.5) => spec.range = Some((1.0, 100.0)),
                ParamType::Number if rng.gen_bool(0.5) => spec.range = Some((0.0, 1000.0)),
                ParamType::String if rng.gen_bool(0.2) => {
                    spec.enum_values = Some(ENUM_VALUES.iter().map(|v| json!(v)).collect());
                }
                _ => {}
            }
            params.insert(pname.to_string(), spec);
        }
        schemas.push(ToolSchema {
            name: name.to_string(),
            params,
        });
    }
    SchemaRegistry::new(schemas).expect("generated tool names are distinct")
}

fn value_for(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Value {
    if let Some(allowed) = &spec.enum_values {
        return allowed[rng.gen_range(0..allowed.len())].clone();
    }
    match spec.param_type {
        ParamType::String => json!(STRING_VALUES[rng.gen_range(0..STRING_VALUES.len())]),
        ParamType::Integer => {
            let (lo, hi) = spec.range.unwrap_or((1.0, 50.0));
            json!(rng.gen_range(lo as i64..=hi as i64))
        }
        ParamType::Number => {
            let (lo, hi) = spec.range.unwrap_or((0.0, 100.0));
            // One decimal place keeps values readable and reproducible.
            let v = (rng.gen_range(lo..hi) * 10.0).round() / 10.0;
            json!(v)
        }
        ParamType::Boolean => json!(rng.gen_bool(0.5)),
        ParamType::Object => json!({}),
        ParamType::Array => json!([]),
    }
}

fn synth_call(schema: &ToolSchema, rng: &mut ChaCha8Rng) -> ToolCall {
    let mut args = Map::new();
    for (pname, spec) in &schema.params {
        if spec.required || rng.gen_bool(0.5) {
            args.insert(pname.clone(), value_for(spec, rng));
        }
    }
    ToolCall::new(schema.name.clone(), args)
}

fn tool_reply(calls: &[ToolCall], rng: &mut ChaCha8Rng) -> String {
    let items: Vec<Value> = calls
        .iter()
        .map(|c| {
            json!({
                "tool": c.name,
                "status": "ok",
                "result": {"id": rng.gen_range(1..10_000u32), "summary": "completed"},
            })
        })
        .collect();
    if items.len() == 1 {
        serde_json::to_string(&items[0]).expect("reply serializes")
    } else {
        serde_json::to_string(&items).expect("reply serializes")
    }
}

/// Generates one clean trajectory against the registry.
pub fn synth_trajectory(registry: &SchemaRegistry, cfg: &SynthConfig, index: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x54524159 + index as u64));
    let schemas: Vec<&ToolSchema> = registry.iter().collect();
    let rounds = rng.gen_range(cfg.min_rounds..=cfg.max_rounds.max(cfg.min_rounds));

    let mut messages = vec![
        Message::system(
            "You are a tool-calling assistant. Issue calls inside <call> tags and finish with a <final> answer.",
        ),
        Message::user(format!(
            "Please complete task #{index} end to end using the available tools."
        )),
    ];
    for _ in 0..rounds {
        let n_calls = if rng.gen_bool(cfg.multi_call_prob) {
            2
        } else {
            1
        };
        let calls: Vec<ToolCall> = (0..n_calls)
            .map(|_| synth_call(schemas[rng.gen_range(0..schemas.len())], &mut rng))
            .collect();
        let content = ParsedCompletion {
            reflection: None,
            calls: Some(calls.clone()),
            final_text: None,
        }
        .render();
        messages.push(Message::assistant(content));
        messages.push(Message::tool(tool_reply(&calls, &mut rng)));
    }
    messages.push(Message::assistant(
        ParsedCompletion {
            reflection: None,
            calls: None,
            final_text: Some(format!("Task #{index} is complete.")),
        }
        .render(),
    ));
    Trajectory::new(messages)
}

/// Generates the whole corpus: a registry plus clean trajectories.
pub fn synth_corpus(cfg: &SynthConfig) -> (SchemaRegistry, Vec<Trajectory>) {
    let registry = synth_registry(cfg);
    let trajectories = (0..cfg.trajectories)
        .map(|i| synth_trajectory(&registry, cfg, i))
        .collect();
    (registry, trajectories)
}
