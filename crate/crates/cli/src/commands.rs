//! Subcommand implementations. All outputs are plain JSONL/JSON with no
//! timestamps or machine-specific content, so re-runs on the same inputs
//! are byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use reflex_core::evalmetrics::{self, AttemptRecord};
use reflex_core::jsonl;
use reflex_core::perturb::{self, RejectRecord, TrainRecord};
use reflex_core::reward::{RewardBreakdown, Rewarder};
use reflex_core::rlkernel::{self, GroupStatus, RolloutGroup};
use reflex_core::schema::{validate_call, SchemaRegistry};
use reflex_core::trajectory::{parse_completion, Role, Trajectory};

use crate::config::RunConfig;
use crate::stream::process_jsonl;

fn create(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| {
        format!("cannot create output {}", path.display())
    })?))
}

// ---------------------------------------------------------------------------
// perturb
// ---------------------------------------------------------------------------

pub fn perturb(
    cfg: &RunConfig,
    input: &Path,
    schema: &Path,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let registry = SchemaRegistry::from_file(schema)
        .map_err(|e| anyhow::anyhow!("invalid config: schema file: {e}"))?;
    let corpus: Vec<Trajectory> = jsonl::read_jsonl(input)?;
    let mut opts = cfg.perturb.clone();
    if let Some(s) = seed {
        opts.seed = s;
    }
    let generated = perturb::generate(&corpus, &registry, &opts)
        .map_err(|e| anyhow::anyhow!("pipeline failed: {e}"))?;

    jsonl::write_jsonl(out.join("train.jsonl"), generated.train.iter())?;
    jsonl::write_jsonl(out.join("test.jsonl"), generated.test.iter())?;
    jsonl::write_jsonl(out.join("answers.jsonl"), generated.answers.iter())?;
    jsonl::write_jsonl(out.join("rejects.jsonl"), generated.rejects.iter())?;
    println!(
        "perturb: {} train, {} test, {} rejected",
        generated.train.len(),
        generated.test.len(),
        generated.rejects.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ScoreInput {
    completion: String,
    ground_truth: String,
}

pub fn score(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    let rewarder =
        Rewarder::new(cfg.reward.clone()).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    let mut scores = create(out, "scores.jsonl")?;
    let mut rejects = create(out, "rejects.jsonl")?;
    let stats = process_jsonl(input, &mut scores, &mut rejects, |record: ScoreInput| {
        rewarder
            .total_reward(&record.completion, &record.ground_truth)
            .map_err(|e| e.to_string())
    })?;
    scores.flush()?;
    rejects.flush()?;
    println!("score: {} scored, {} rejected", stats.ok, stats.rejected);
    Ok(())
}

// ---------------------------------------------------------------------------
// rl-eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct GroupOutput {
    group_id: String,
    value: f64,
    status: GroupStatus,
    advantages: Vec<f64>,
    accepted: Vec<usize>,
    /// Sequence ratios for accepted indices, in `accepted` order.
    ratios: Vec<f64>,
}

pub fn rl_eval(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    let rl = cfg.rl.clone();
    let mut groups = create(out, "groups.jsonl")?;
    let mut rejects = create(out, "rejects.jsonl")?;
    let stats = process_jsonl(
        input,
        &mut groups,
        &mut rejects,
        |group: RolloutGroup<f64>| {
            let eval = rlkernel::group_objective(&group, &rl).map_err(|e| e.to_string())?;
            Ok(GroupOutput {
                group_id: group.group_id,
                value: eval.value,
                status: eval.decision.status,
                advantages: eval.decision.advantages,
                accepted: eval.decision.accepted,
                ratios: eval.per_sample.iter().map(|s| s.ratio).collect(),
            })
        },
    )?;
    groups.flush()?;
    rejects.flush()?;
    println!("rl-eval: {} groups, {} rejected", stats.ok, stats.rejected);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct EvalReport {
    /// What counts as a successful repair, spelled out for the record.
    predicate: String,
    items: usize,
    answers_failing_schema: Option<usize>,
    rates: BTreeMap<String, f64>,
}

pub fn eval(
    cfg: &RunConfig,
    attempts: &Path,
    answers: &Path,
    schema: Option<&Path>,
    ns: &[usize],
    out: &Path,
) -> anyhow::Result<()> {
    let _ = cfg;
    let records: Vec<AttemptRecord> = jsonl::read_jsonl(attempts)?;
    let answer_records: Vec<perturb::AnswerRecord> = jsonl::read_jsonl(answers)?;
    let answer_map: BTreeMap<String, Vec<reflex_core::trajectory::ToolCall>> = answer_records
        .iter()
        .map(|a| (a.item_id.clone(), a.corrected_call.clone()))
        .collect();

    let answers_failing_schema = match schema {
        Some(path) => {
            let registry = SchemaRegistry::from_file(path)
                .map_err(|e| anyhow::anyhow!("invalid config: schema file: {e}"))?;
            Some(
                answer_records
                    .iter()
                    .filter(|a| {
                        a.corrected_call
                            .iter()
                            .any(|c| !validate_call(c, &registry).is_ok())
                    })
                    .count(),
            )
        }
        None => None,
    };

    let mut rates = BTreeMap::new();
    for &n in ns {
        let rate: f64 = if records.is_empty() {
            0.0
        } else {
            evalmetrics::repair_at_n(&records, n, &answer_map)
                .map_err(|e| anyhow::anyhow!("eval failed: {e}"))?
        };
        rates.insert(n.to_string(), rate);
    }
    let verdicts = if records.is_empty() {
        Vec::new()
    } else {
        evalmetrics::verdicts(&records, &answer_map)
            .map_err(|e| anyhow::anyhow!("eval failed: {e}"))?
    };

    let report = EvalReport {
        predicate: "an attempt succeeds iff it parses, carries a non-empty <reflect> part, and \
                    its <call> multiset exactly matches the hidden corrected call"
            .to_string(),
        items: records.len(),
        answers_failing_schema,
        rates,
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    jsonl::write_jsonl(out.join("verdicts.jsonl"), verdicts.iter())?;
    println!("eval: {} items, rates {:?}", report.items, report.rates);
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

/// Checks one corpus line: JSON shape, trajectory invariants, completion
/// parses, and (when a registry is given) call executability. Empty result
/// means valid.
fn validate_corpus_line(line: &str, registry: Option<&SchemaRegistry>) -> Vec<String> {
    let trajectory: Trajectory = match serde_json::from_str(line) {
        Ok(t) => t,
        Err(e) => return vec![format!("parse:{e}")],
    };
    let mut reasons = Vec::new();
    if let Err(e) = trajectory.validate() {
        reasons.push(format!("invalid_trajectory:{e}"));
    }
    for (idx, msg) in trajectory.messages.iter().enumerate() {
        if msg.role != Role::Assistant {
            continue;
        }
        match parse_completion(&msg.content) {
            Ok(parsed) => {
                if let Some(reg) = registry {
                    for call in parsed.calls_slice() {
                        if !validate_call(call, reg).is_ok() {
                            reasons.push(format!("invalid_call:message {idx}:{}", call.name));
                        }
                    }
                }
            }
            Err(e) => reasons.push(format!("unparseable_assistant:message {idx}:{e}")),
        }
    }
    reasons.dedup();
    reasons
}

pub fn validate(
    cfg: &RunConfig,
    input: &Path,
    schema: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let _ = cfg;
    let registry = match schema {
        Some(path) => Some(
            SchemaRegistry::from_file(path)
                .map_err(|e| anyhow::anyhow!("invalid config: schema file: {e}"))?,
        ),
        None => None,
    };
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("cannot open input {}", input.display()))?;
    let mut rejects_out = create(out, "validation.jsonl")?;
    let mut checked = 0usize;
    let mut rejected = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        checked += 1;
        let reasons = validate_corpus_line(line, registry.as_ref());
        if !reasons.is_empty() {
            rejected += 1;
            let record = RejectRecord {
                item_id: format!("line-{}", idx + 1),
                reasons,
            };
            rejects_out.write_all(serde_json::to_string(&record)?.as_bytes())?;
            rejects_out.write_all(b"\n")?;
        }
    }
    rejects_out.flush()?;
    println!("validate: {checked} checked, {rejected} rejected");
    Ok(())
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
struct StatsReport {
    train_items: usize,
    test_items: usize,
    passthrough_items: usize,
    operator_counts: BTreeMap<String, usize>,
    reject_reasons: BTreeMap<String, usize>,
    records_scored: usize,
    reward_histogram: Vec<usize>,
    reward_min: Option<f64>,
    reward_max: Option<f64>,
    group_status_counts: BTreeMap<String, usize>,
}

pub fn stats(input: &Path, out: &Path) -> anyhow::Result<()> {
    let mut report = StatsReport {
        reward_histogram: vec![0; 10],
        ..Default::default()
    };

    let train_path = input.join("train.jsonl");
    if train_path.exists() {
        let train: Vec<TrainRecord> = jsonl::read_jsonl(&train_path)?;
        for record in &train {
            match &record.provenance {
                Some(spec) => {
                    report.train_items += 1;
                    *report
                        .operator_counts
                        .entry(spec.operator.as_str().to_string())
                        .or_default() += 1;
                }
                None => report.passthrough_items += 1,
            }
        }
    }
    let answers_path = input.join("answers.jsonl");
    if answers_path.exists() {
        let answers: Vec<perturb::AnswerRecord> = jsonl::read_jsonl(&answers_path)?;
        report.test_items = answers.len();
        for a in &answers {
            *report
                .operator_counts
                .entry(a.operator.as_str().to_string())
                .or_default() += 1;
        }
    }
    for name in ["rejects.jsonl", "validation.jsonl"] {
        let path = input.join(name);
        if path.exists() {
            let rejects: Vec<RejectRecord> = jsonl::read_jsonl(&path)?;
            for r in &rejects {
                for reason in &r.reasons {
                    let key = reason.split(':').next().unwrap_or(reason).to_string();
                    *report.reject_reasons.entry(key).or_default() += 1;
                }
            }
        }
    }
    let scores_path = input.join("scores.jsonl");
    if scores_path.exists() {
        let scores: Vec<RewardBreakdown<f64>> = jsonl::read_jsonl(&scores_path)?;
        report.records_scored = scores.len();
        for s in &scores {
            let bin = ((s.r_total * 10.0).floor() as usize).min(9);
            report.reward_histogram[bin] += 1;
            report.reward_min = Some(
                report
                    .reward_min
                    .map_or(s.r_total, |m: f64| m.min(s.r_total)),
            );
            report.reward_max = Some(
                report
                    .reward_max
                    .map_or(s.r_total, |m: f64| m.max(s.r_total)),
            );
        }
    }
    let groups_path = input.join("groups.jsonl");
    if groups_path.exists() {
        #[derive(Deserialize)]
        struct GroupLine {
            status: GroupStatus,
        }
        let groups: Vec<GroupLine> = jsonl::read_jsonl(&groups_path)?;
        for g in &groups {
            let key = serde_json::to_value(g.status)?
                .as_str()
                .unwrap_or("unknown")
                .to_string();
            *report.group_status_counts.entry(key).or_default() += 1;
        }
    }

    std::fs::write(
        out.join("stats.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "stats: {} train, {} test, {} scored",
        report.train_items, report.test_items, report.records_scored
    );
    Ok(())
}
