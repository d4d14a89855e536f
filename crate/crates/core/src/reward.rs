//! Multi-component reward for tagged tool-calling completions.
//!
//! A completion and its ground truth each decompose into reflection, calls,
//! and final answer. Scoring proceeds in stages:
//!
//! 1. per-part component scores: text similarity for reflection/final,
//!    exact multiset equality for calls;
//! 2. aggregation under presence masks, renormalized over the parts the
//!    ground truth actually specifies so the maximum stays 1;
//! 3. structural penalties for missing parts, extra parts, and call-count
//!    mismatch, combined into a format factor in `[0, 1]` (attenuated when
//!    the call sets already match exactly);
//! 4. the core reward `S · F`, replaced by a scaled similarity of the
//!    linearized texts whenever it falls below the backoff threshold, so a
//!    dense signal survives when exact matching fails.
//!
//! Every intermediate quantity is recorded in [`RewardBreakdown`] so batch
//! scoring output is fully auditable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{Scorer, SimilarityError, SimilarityKind};
use crate::trajectory::{equal_calls, parse_completion, ParseError, ParsedCompletion};
use crate::Real;

/// All knobs of the reward function.
///
/// `w_r`/`w_c`/`w_f` weight the reflection/calls/final component scores in
/// the aggregate; `w_ref`/`w_calls`/`w_final` weight the same parts inside
/// the miss/extra penalties. The two triples are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig<R: Real = f64> {
    /// Base weight of the reflection score in the aggregate.
    pub w_r: R,
    /// Base weight of the call score in the aggregate.
    pub w_c: R,
    /// Base weight of the final-answer score in the aggregate.
    pub w_f: R,
    /// Penalty weight of a missing/extra reflection part.
    pub w_ref: R,
    /// Penalty weight of missing/extra/miscounted calls.
    pub w_calls: R,
    /// Penalty weight of a missing/extra final part.
    pub w_final: R,
    /// Strength of the extra-part penalty in the total.
    pub beta_extra: R,
    /// Strength of the count-mismatch penalty in the total.
    pub gamma_count: R,
    /// Overall penalty scale inside the format factor.
    pub lambda_m: R,
    /// Penalty attenuation applied when the call sets match exactly; in (0, 1].
    pub r_reduce: R,
    /// Core-reward threshold below which the similarity backoff kicks in; in (0, 1).
    pub epsilon_backoff: R,
    /// Scale of the backoff similarity reward; in (0, 1].
    pub w_b: R,
    /// Similarity function for reflection/final scores and the backoff.
    pub similarity: SimilarityKind,
}

impl<R: Real> Default for RewardConfig<R> {
    fn default() -> Self {
        let c = R::from_f64_const;
        Self {
            w_r: c(1.0 / 3.0),
            w_c: c(1.0 / 3.0),
            w_f: c(1.0 / 3.0),
            w_ref: c(0.25),
            w_calls: c(0.5),
            w_final: c(0.25),
            beta_extra: c(0.5),
            gamma_count: c(1.0),
            lambda_m: c(1.0),
            r_reduce: c(0.5),
            epsilon_backoff: c(0.05),
            w_b: c(0.3),
            similarity: SimilarityKind::TokenF1,
        }
    }
}

impl<R: Real> RewardConfig<R> {
    /// Checks the value constraints on every knob.
    pub fn validate(&self) -> Result<(), RewardError> {
        let nonneg = [
            ("w_r", self.w_r),
            ("w_c", self.w_c),
            ("w_f", self.w_f),
            ("w_ref", self.w_ref),
            ("w_calls", self.w_calls),
            ("w_final", self.w_final),
            ("beta_extra", self.beta_extra),
            ("gamma_count", self.gamma_count),
            ("lambda_m", self.lambda_m),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < R::zero() {
                return Err(RewardError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if self.w_r + self.w_c + self.w_f <= R::zero() {
            return Err(RewardError::InvalidConfig(
                "w_r + w_c + w_f must be > 0".to_string(),
            ));
        }
        let in_unit = |v: R, open_top: bool| {
            v.is_finite()
                && v > R::zero()
                && if open_top {
                    v < R::one()
                } else {
                    v <= R::one()
                }
        };
        if !in_unit(self.r_reduce, false) {
            return Err(RewardError::InvalidConfig(
                "r_reduce must be in (0, 1]".to_string(),
            ));
        }
        if !in_unit(self.w_b, false) {
            return Err(RewardError::InvalidConfig(
                "w_b must be in (0, 1]".to_string(),
            ));
        }
        if !in_unit(self.epsilon_backoff, true) {
            return Err(RewardError::InvalidConfig(
                "epsilon_backoff must be in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Which branch produced the total reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBranch {
    Core,
    Backoff,
}

/// Every intermediate quantity of one reward evaluation.
///
/// Scores of parts the ground truth does not specify are recorded as 0 and
/// never enter the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<R: Real = f64> {
    /// Reflection similarity score.
    pub s_ref: R,
    /// Call-set equality indicator (0 or 1).
    pub s_call: R,
    /// Final-answer similarity score.
    pub s_final: R,
    /// Presence mask: ground truth has a reflection part.
    pub i_ref: u8,
    /// Presence mask: ground truth has at least one call.
    pub i_call: u8,
    /// Presence mask: ground truth has a final part.
    pub i_final: u8,
    /// Total active weight the aggregate is normalized by.
    pub w_act: R,
    /// Aggregate score over active parts.
    #[serde(rename = "s")]
    pub aggregate: R,
    /// Number of ground-truth calls.
    #[serde(rename = "n")]
    pub truth_calls: usize,
    /// Number of completion calls.
    #[serde(rename = "m")]
    pub completion_calls: usize,
    /// Missing-part penalty.
    pub p_miss: R,
    /// Extra-part penalty.
    pub p_extra: R,
    /// Call-count mismatch penalty.
    pub p_count: R,
    /// Penalty attenuation actually applied (`r_reduce` or 1).
    pub r_fmt: R,
    /// Weighted total penalty.
    pub p_total: R,
    /// Format factor in [0, 1].
    #[serde(rename = "f")]
    pub format_factor: R,
    /// Core reward `S · F`.
    pub r_core: R,
    /// Final reward in [0, 1].
    pub r_total: R,
    /// Branch that produced `r_total`.
    pub branch: RewardBranch,
}

/// Reward computation failure.
#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    /// The ground truth specifies no part with positive weight, so the
    /// aggregate is undefined.
    #[error("no active part: ground truth specifies nothing to score")]
    NoActivePart,
    #[error("completion does not parse: {0}")]
    CompletionParse(#[source] ParseError),
    #[error("ground truth does not parse: {0}")]
    GroundTruthParse(#[source] ParseError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Presence masks plus the aggregate they normalize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateScore<R: Real = f64> {
    pub aggregate: R,
    pub i_ref: bool,
    pub i_call: bool,
    pub i_final: bool,
    pub w_act: R,
}

/// Per-part component scores: similarity for reflection and final, the
/// call-set equality indicator for calls. Absent texts compare as empty.
pub fn component_scores<R: Real>(
    c: &ParsedCompletion,
    g: &ParsedCompletion,
    scorer: &Scorer,
) -> Result<(R, R, R), RewardError> {
    let s_ref = scorer.score(
        c.reflection.as_deref().unwrap_or(""),
        g.reflection.as_deref().unwrap_or(""),
    )?;
    let s_call = if equal_calls(c.calls_slice(), g.calls_slice()) {
        R::one()
    } else {
        R::zero()
    };
    let s_final = scorer.score(
        c.final_text.as_deref().unwrap_or(""),
        g.final_text.as_deref().unwrap_or(""),
    )?;
    Ok((s_ref, s_call, s_final))
}

/// Aggregates component scores over the parts the ground truth specifies,
/// renormalizing by the active weight so the maximum stays 1.
pub fn aggregate_score<R: Real>(
    scores: (R, R, R),
    g: &ParsedCompletion,
    cfg: &RewardConfig<R>,
) -> Result<AggregateScore<R>, RewardError> {
    let (s_ref, s_call, s_final) = scores;
    let i_ref = g.reflection.is_some();
    let i_call = g.call_count() > 0;
    let i_final = g.final_text.is_some();
    let gate = |on: bool, w: R| if on { w } else { R::zero() };
    let w_act = gate(i_ref, cfg.w_r) + gate(i_call, cfg.w_c) + gate(i_final, cfg.w_f);
    let active = w_act.is_finite() && w_act > R::zero();
    if !active {
        return Err(RewardError::NoActivePart);
    }
    let numerator = gate(i_ref, cfg.w_r) * s_ref
        + gate(i_call, cfg.w_c) * s_call
        + gate(i_final, cfg.w_f) * s_final;
    Ok(AggregateScore {
        aggregate: numerator / w_act,
        i_ref,
        i_call,
        i_final,
        w_act,
    })
}

/// The three structural penalties: missing parts, extra parts, and
/// call-count mismatch (scaled by `|n - m| / max(n, m)` when both sides
/// have calls).
pub fn penalty_components<R: Real>(
    c: &ParsedCompletion,
    g: &ParsedCompletion,
    cfg: &RewardConfig<R>,
) -> (R, R, R) {
    let n = g.call_count();
    let m = c.call_count();
    let ind = |p: bool, w: R| if p { w } else { R::zero() };

    let p_miss = ind(g.reflection.is_some() && c.reflection.is_none(), cfg.w_ref)
        + ind(
            g.final_text.is_some() && c.final_text.is_none(),
            cfg.w_final,
        )
        + ind(n > 0 && m == 0, cfg.w_calls);

    let p_extra = ind(c.reflection.is_some() && g.reflection.is_none(), cfg.w_ref)
        + ind(
            c.final_text.is_some() && g.final_text.is_none(),
            cfg.w_final,
        )
        + ind(m > 0 && n == 0, cfg.w_calls);

    let p_count = if n > 0 && m > 0 && n != m {
        let diff = R::from_count(n.abs_diff(m));
        let largest = R::from_count(n.max(m));
        cfg.w_calls * diff / largest
    } else {
        R::zero()
    };

    (p_miss, p_extra, p_count)
}

/// Combines penalties into the format factor.
///
/// Returns `(F, r_fmt, P_total)`. `F` is exactly 1 when all three penalty
/// components are zero; otherwise `1 - lambda_m * P_total * r_fmt` clipped
/// to `[0, 1]`, where `r_fmt` attenuates to `r_reduce` when the call sets
/// already match.
pub fn format_factor<R: Real>(
    pens: (R, R, R),
    calls_equal: bool,
    cfg: &RewardConfig<R>,
) -> (R, R, R) {
    let (p_miss, p_extra, p_count) = pens;
    let r_fmt = if calls_equal { cfg.r_reduce } else { R::one() };
    let p_total = p_miss + cfg.beta_extra * p_extra + cfg.gamma_count * p_count;
    let f = if p_miss == R::zero() && p_extra == R::zero() && p_count == R::zero() {
        R::one()
    } else {
        clip01(R::one() - cfg.lambda_m * p_total * r_fmt)
    };
    (f, r_fmt, p_total)
}

fn clip01<R: Real>(x: R) -> R {
    x.max(R::zero()).min(R::one())
}

/// Reward evaluator that owns the similarity scorer, for batch use.
#[derive(Debug)]
pub struct Rewarder<R: Real = f64> {
    cfg: RewardConfig<R>,
    scorer: Scorer,
}

impl<R: Real> Rewarder<R> {
    pub fn new(cfg: RewardConfig<R>) -> Result<Self, RewardError> {
        cfg.validate()?;
        let scorer = Scorer::new(&cfg.similarity);
        Ok(Self { cfg, scorer })
    }

    pub fn config(&self) -> &RewardConfig<R> {
        &self.cfg
    }

    /// Scores a raw completion against a raw ground truth.
    pub fn total_reward(
        &self,
        c_raw: &str,
        g_raw: &str,
    ) -> Result<RewardBreakdown<R>, RewardError> {
        let c = parse_completion(c_raw).map_err(RewardError::CompletionParse)?;
        let g = parse_completion(g_raw).map_err(RewardError::GroundTruthParse)?;
        self.total_reward_parsed(&c, &g)
    }

    /// Scores already-parsed completions.
    pub fn total_reward_parsed(
        &self,
        c: &ParsedCompletion,
        g: &ParsedCompletion,
    ) -> Result<RewardBreakdown<R>, RewardError> {
        let cfg = &self.cfg;
        let raw_scores = component_scores::<R>(c, g, &self.scorer)?;
        let agg = aggregate_score(raw_scores, g, cfg)?;
        let pens = penalty_components(c, g, cfg);
        let calls_equal = raw_scores.1 == R::one();
        let (f, r_fmt, p_total) = format_factor(pens, calls_equal, cfg);
        let r_core = agg.aggregate * f;

        let (branch, r_total) = if r_core >= cfg.epsilon_backoff {
            (RewardBranch::Core, clip01(r_core))
        } else {
            let backoff_sim: R = self.scorer.score(&c.linearize(), &g.linearize())?;
            (RewardBranch::Backoff, clip01(cfg.w_b * backoff_sim))
        };

        let masked = |on: bool, s: R| if on { s } else { R::zero() };
        Ok(RewardBreakdown {
            s_ref: masked(agg.i_ref, raw_scores.0),
            s_call: masked(agg.i_call, raw_scores.1),
            s_final: masked(agg.i_final, raw_scores.2),
            i_ref: u8::from(agg.i_ref),
            i_call: u8::from(agg.i_call),
            i_final: u8::from(agg.i_final),
            w_act: agg.w_act,
            aggregate: agg.aggregate,
            truth_calls: g.call_count(),
            completion_calls: c.call_count(),
            p_miss: pens.0,
            p_extra: pens.1,
            p_count: pens.2,
            r_fmt,
            p_total,
            format_factor: f,
            r_core,
            r_total,
            branch,
        })
    }
}

/// One-shot total reward; constructs a scorer per call. Batch users should
/// hold a [`Rewarder`].
pub fn total_reward<R: Real>(
    c_raw: &str,
    g_raw: &str,
    cfg: &RewardConfig<R>,
) -> Result<RewardBreakdown<R>, RewardError> {
    Rewarder::new(cfg.clone())?.total_reward(c_raw, g_raw)
}
