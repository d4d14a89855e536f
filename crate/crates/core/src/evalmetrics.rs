//! Repair-rate metrics over multi-attempt records.
//!
//! An attempt repairs a test item when it parses, carries a non-empty
//! reflection, and its call multiset exactly matches the item's corrected
//! call. `repair_at_n` is the fraction of items where at least one of the
//! first `n` attempts succeeds; it is nondecreasing in `n` by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{equal_calls, parse_completion, ToolCall};
use crate::Real;

/// All attempts one model made on one test item, in the order produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub item_id: String,
    pub attempts: Vec<String>,
}

/// Metric computation failure.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n must be >= 1")]
    ZeroN,
    #[error("no attempt records to aggregate")]
    NoRecords,
    #[error("record `{item_id}` has {have} attempts but n = {need}")]
    InsufficientAttempts {
        item_id: String,
        have: usize,
        need: usize,
    },
    #[error("record `{item_id}` matches no known test item")]
    UnknownItem { item_id: String },
}

/// Whether one raw attempt repairs the item with the given corrected call.
///
/// Parse failures count as unsuccessful attempts, never as errors. Any
/// `<final>` text in the attempt is ignored; only the reflection's presence
/// and the exact call multiset matter.
pub fn attempt_success(attempt: &str, corrected_call: &[ToolCall]) -> bool {
    let Ok(parsed) = parse_completion(attempt) else {
        return false;
    };
    let reflected = parsed.reflection.as_deref().is_some_and(|r| !r.is_empty());
    reflected && equal_calls(parsed.calls_slice(), corrected_call)
}

/// Per-item verdict: which attempts succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub item_id: String,
    pub successes: Vec<bool>,
}

/// Fraction of records where at least one of the first `n` attempts
/// succeeds against its item's corrected call.
pub fn repair_at_n<R: Real>(
    records: &[AttemptRecord],
    n: usize,
    answers: &BTreeMap<String, Vec<ToolCall>>,
) -> Result<R, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut hits = 0usize;
    for record in records {
        let corrected = answers
            .get(&record.item_id)
            .ok_or_else(|| EvalError::UnknownItem {
                item_id: record.item_id.clone(),
            })?;
        if record.attempts.len() < n {
            return Err(EvalError::InsufficientAttempts {
                item_id: record.item_id.clone(),
                have: record.attempts.len(),
                need: n,
            });
        }
        if record.attempts[..n]
            .iter()
            .any(|a| attempt_success(a, corrected))
        {
            hits += 1;
        }
    }
    Ok(R::from_count(hits) / R::from_count(records.len()))
}

/// Per-attempt verdicts for every record, for reporting.
pub fn verdicts(
    records: &[AttemptRecord],
    answers: &BTreeMap<String, Vec<ToolCall>>,
) -> Result<Vec<ItemVerdict>, EvalError> {
    records
        .iter()
        .map(|record| {
            let corrected = answers
                .get(&record.item_id)
                .ok_or_else(|| EvalError::UnknownItem {
                    item_id: record.item_id.clone(),
                })?;
            Ok(ItemVerdict {
                item_id: record.item_id.clone(),
                successes: record
                    .attempts
                    .iter()
                    .map(|a| attempt_success(a, corrected))
                    .collect(),
            })
        })
        .collect()
}
