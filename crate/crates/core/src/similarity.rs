//! Text similarity in `[0, 1]` for reward components and backoff shaping.
//!
//! Two deterministic built-in metrics are provided (token-set F1 and
//! normalized edit distance) plus a hook for an external scorer process for
//! callers that want embedding-based similarity. All kinds are symmetric,
//! score identical texts as 1, and treat two empty texts as trivially
//! agreeing (score 1).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::external::{ExternalError, LineClient, DEFAULT_TIMEOUT_MS};
use crate::Real;

/// Which similarity function to use.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimilarityKind {
    /// F1 overlap of lowercased alphanumeric token sets. The default.
    #[default]
    TokenF1,
    /// `1 - levenshtein(a, b) / max(|a|, |b|)` over characters.
    NormalizedEdit,
    /// Child process speaking line-delimited JSON:
    /// request `{"a": …, "b": …}`, response `{"score": …}`.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

/// Similarity failure. Built-in kinds are total; only the external kind errors.
#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("external scorer unavailable: {0}")]
    ExternalScorerUnavailable(#[from] ExternalError),
    #[error("external scorer reply missing numeric `score` field")]
    MalformedScore,
}

/// A ready-to-use scorer. Built-in kinds are stateless; the external kind
/// owns a persistent child process, so construct once and reuse for batches.
#[derive(Debug)]
pub struct Scorer {
    inner: ScorerImpl,
}

#[derive(Debug)]
enum ScorerImpl {
    TokenF1,
    NormalizedEdit,
    External(LineClient),
}

impl Scorer {
    pub fn new(kind: &SimilarityKind) -> Self {
        let inner = match kind {
            SimilarityKind::TokenF1 => ScorerImpl::TokenF1,
            SimilarityKind::NormalizedEdit => ScorerImpl::NormalizedEdit,
            SimilarityKind::External {
                command,
                timeout_ms,
            } => ScorerImpl::External(LineClient::new(command.clone(), *timeout_ms)),
        };
        Self { inner }
    }

    /// Scores a pair of texts in `[0, 1]`.
    pub fn score<R: Real>(&self, a: &str, b: &str) -> Result<R, SimilarityError> {
        match &self.inner {
            ScorerImpl::TokenF1 => Ok(token_f1(a, b)),
            ScorerImpl::NormalizedEdit => Ok(normalized_edit(a, b)),
            ScorerImpl::External(client) => {
                let reply = client.call(&serde_json::json!({"a": a, "b": b}))?;
                let raw = reply
                    .get("score")
                    .and_then(|v| v.as_f64())
                    .ok_or(SimilarityError::MalformedScore)?;
                // External scores are clamped so the [0, 1] contract holds
                // regardless of what the scorer returns.
                Ok(R::from_f64_const(raw.clamp(0.0, 1.0)))
            }
        }
    }
}

/// One-shot similarity. For the external kind this spawns a process per
/// call; batch users should hold a [`Scorer`] instead.
pub fn sim<R: Real>(a: &str, b: &str, kind: &SimilarityKind) -> Result<R, SimilarityError> {
    Scorer::new(kind).score(a, b)
}

/// Lowercased tokens split on any non-alphanumeric character.
fn tokens(text: &str) -> std::collections::BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// F1 overlap of token sets; 1 when both texts are empty, 0 when exactly one is.
pub fn token_f1<R: Real>(a: &str, b: &str) -> R {
    let ta = tokens(a);
    let tb = tokens(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return R::one(),
        (true, false) | (false, true) => return R::zero(),
        _ => {}
    }
    let common = ta.intersection(&tb).count();
    if common == 0 {
        return R::zero();
    }
    let precision = R::from_count(common) / R::from_count(ta.len());
    let recall = R::from_count(common) / R::from_count(tb.len());
    let two = R::from_count(2);
    two * precision * recall / (precision + recall)
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over characters; 1 when both empty.
pub fn normalized_edit<R: Real>(a: &str, b: &str) -> R {
    let ca: Vec<char> = a.chars().collect();
    let cb: Vec<char> = b.chars().collect();
    let longest = ca.len().max(cb.len());
    if longest == 0 {
        return R::one();
    }
    let dist = levenshtein(&ca, &cb);
    R::one() - R::from_count(dist) / R::from_count(longest)
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ac) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bc) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ac != bc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
