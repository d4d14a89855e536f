//! Numerical kernel for the sequence-level clipped RL objective.
//!
//! Rewards and per-token log-probabilities arrive as data (no policy network
//! lives here). For each rollout group the kernel computes group-normalized
//! advantages, applies the dynamic acceptance filter (sufficient reward
//! dispersion, neither all nor none of the rollouts informative), forms the
//! geometric-mean length-normalized importance ratio per rollout, and sums
//! the asymmetrically clipped per-sample terms under a fixed `1/G`
//! normalization.
//!
//! Everything is deterministic: reductions run in index order, and identical
//! inputs produce bit-identical outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

/// `G` rollouts for one prompt: scalar rewards plus per-token log-probs
/// under the current and the behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<R: Real = f64> {
    pub group_id: String,
    /// One reward in [0, 1] per rollout.
    pub rewards: Vec<R>,
    /// Per-token log-probabilities under the current policy, one sequence
    /// per rollout.
    pub logp_new: Vec<Vec<R>>,
    /// Per-token log-probabilities under the behavior policy; same shape as
    /// `logp_new`.
    pub logp_old: Vec<Vec<R>>,
}

impl<R: Real> RolloutGroup<R> {
    /// Checks the structural invariants: at least two rollouts, matching
    /// shapes, non-empty sequences, finite non-positive log-probs, and
    /// rewards in [0, 1].
    pub fn validate(&self) -> Result<(), RlError> {
        let g = self.rewards.len();
        if g < 2 {
            return Err(RlError::TooFewRollouts { found: g });
        }
        if self.logp_new.len() != g || self.logp_old.len() != g {
            return Err(RlError::ShapeMismatch {
                group_id: self.group_id.clone(),
                detail: format!(
                    "rewards has {g} entries but logp_new has {} and logp_old has {}",
                    self.logp_new.len(),
                    self.logp_old.len()
                ),
            });
        }
        for (i, r) in self.rewards.iter().enumerate() {
            if !r.is_finite() || *r < R::zero() || *r > R::one() {
                return Err(RlError::RewardOutOfRange {
                    index: i,
                    value: r.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        for i in 0..g {
            let (new, old) = (&self.logp_new[i], &self.logp_old[i]);
            if new.len() != old.len() {
                return Err(RlError::LengthMismatch {
                    new_len: new.len(),
                    old_len: old.len(),
                });
            }
            if new.is_empty() {
                return Err(RlError::EmptySequence { index: i });
            }
            for lp in new.iter().chain(old.iter()) {
                if !lp.is_finite() || *lp > R::zero() {
                    return Err(RlError::InvalidLogProb {
                        index: i,
                        value: lp.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Clipping bounds and filtering thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig<R: Real = f64> {
    /// Lower clip offset: ratios clip at `1 - eps_low`. In (0, 1).
    pub eps_low: R,
    /// Upper clip offset: ratios clip at `1 + eps_high`. Usually larger than
    /// `eps_low` so positive-advantage updates get a looser ceiling.
    pub eps_high: R,
    /// Advantages with `|A| <= tau_adv` are excluded from the accepted set.
    pub tau_adv: R,
    /// Groups need reward variance strictly above this to be accepted.
    pub tau_var: R,
    /// How many extra candidates a host may draw for a rejected group.
    /// Generation is external; the kernel only reports statuses.
    pub max_resample: u32,
}

impl<R: Real> Default for RlConfig<R> {
    fn default() -> Self {
        Self {
            eps_low: R::from_f64_const(0.2),
            eps_high: R::from_f64_const(0.28),
            tau_adv: R::zero(),
            tau_var: R::from_f64_const(1e-6),
            max_resample: 0,
        }
    }
}

impl<R: Real> RlConfig<R> {
    pub fn validate(&self) -> Result<(), RlError> {
        let eps_low_ok = self.eps_low > R::zero() && self.eps_low < R::one();
        if !eps_low_ok {
            return Err(RlError::InvalidConfig(
                "eps_low must be in (0, 1)".to_string(),
            ));
        }
        let eps_high_ok = self.eps_high.is_finite() && self.eps_high > R::zero();
        if !eps_high_ok {
            return Err(RlError::InvalidConfig(
                "eps_high must be finite and > 0".to_string(),
            ));
        }
        let threshold_ok = |v: R| v.is_finite() && v >= R::zero();
        if !threshold_ok(self.tau_adv) {
            return Err(RlError::InvalidConfig("tau_adv must be >= 0".to_string()));
        }
        if !threshold_ok(self.tau_var) {
            return Err(RlError::InvalidConfig("tau_var must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Why a group was kept or skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Accepted,
    /// Reward dispersion at or below `tau_var`.
    RejectedVariance,
    /// Zero reward standard deviation; advantages are undefined.
    RejectedDegenerate,
    /// Every rollout or no rollout cleared the advantage threshold.
    RejectedAllOrNone,
}

impl GroupStatus {
    pub fn is_accepted(&self) -> bool {
        matches!(self, GroupStatus::Accepted)
    }
}

/// Filtering outcome for one group.
///
/// `advantages` always has one entry per rollout; when the standard
/// deviation is zero they are recorded as zeros. `accepted` holds the
/// 0-based indices that cleared the threshold, in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDecision<R: Real = f64> {
    pub advantages: Vec<R>,
    pub accepted: Vec<usize>,
    pub status: GroupStatus,
}

/// One accepted rollout's contribution to the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTerm<R: Real = f64> {
    pub index: usize,
    pub ratio: R,
    pub advantage: R,
    pub term: R,
}

/// Objective value plus everything that went into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvaluation<R: Real = f64> {
    pub value: R,
    pub decision: GroupDecision<R>,
    pub per_sample: Vec<SampleTerm<R>>,
}

/// RL kernel failure.
#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid RL config: {0}")]
    InvalidConfig(String),
    #[error("group needs at least 2 rollouts, found {found}")]
    TooFewRollouts { found: usize },
    #[error("group `{group_id}` has mismatched shapes: {detail}")]
    ShapeMismatch { group_id: String, detail: String },
    #[error("reward {value} at index {index} is outside [0, 1]")]
    RewardOutOfRange { index: usize, value: f64 },
    #[error("log-prob sequences differ in length: {new_len} vs {old_len}")]
    LengthMismatch { new_len: usize, old_len: usize },
    #[error("rollout {index} has an empty log-prob sequence")]
    EmptySequence { index: usize },
    #[error("log-prob {value} at rollout {index} is not finite and <= 0")]
    InvalidLogProb { index: usize, value: f64 },
    /// All rewards equal: the z-score denominator is zero.
    #[error("degenerate group: zero reward dispersion")]
    DegenerateGroup,
}

fn mean_and_population_std<R: Real>(values: &[R]) -> (R, R) {
    let g = R::from_count(values.len());
    let mut sum = R::zero();
    for v in values {
        sum = sum + *v;
    }
    let mean = sum / g;
    let mut sq = R::zero();
    for v in values {
        let d = *v - mean;
        sq = sq + d * d;
    }
    let var = sq / g;
    (mean, var.sqrt())
}

/// Population variance (division by the group size).
pub fn population_variance<R: Real>(values: &[R]) -> R {
    let (_, std) = mean_and_population_std(values);
    std * std
}

/// Z-scores the rewards with the population standard deviation.
///
/// Errors with [`RlError::DegenerateGroup`] when all rewards are equal.
pub fn normalized_advantages<R: Real>(rewards: &[R]) -> Result<Vec<R>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::TooFewRollouts {
            found: rewards.len(),
        });
    }
    let (mean, std) = mean_and_population_std(rewards);
    if std == R::zero() {
        return Err(RlError::DegenerateGroup);
    }
    Ok(rewards.iter().map(|r| (*r - mean) / std).collect())
}

/// Applies the group acceptance filter.
///
/// Conditions are checked in order: reward dispersion above `tau_var`,
/// non-zero standard deviation, and an accepted set that is neither empty
/// nor the whole group. Failures are statuses, not errors.
pub fn group_filter<R: Real>(group: &RolloutGroup<R>, cfg: &RlConfig<R>) -> GroupDecision<R> {
    decide(&group.rewards, cfg)
}

fn decide<R: Real>(rewards: &[R], cfg: &RlConfig<R>) -> GroupDecision<R> {
    let g = rewards.len();
    let (mean, std) = mean_and_population_std(rewards);
    let variance = std * std;
    let dispersed = variance > cfg.tau_var;
    if !dispersed {
        let advantages = if std > R::zero() {
            rewards.iter().map(|r| (*r - mean) / std).collect()
        } else {
            vec![R::zero(); g]
        };
        return GroupDecision {
            advantages,
            accepted: Vec::new(),
            status: GroupStatus::RejectedVariance,
        };
    }
    if std == R::zero() {
        return GroupDecision {
            advantages: vec![R::zero(); g],
            accepted: Vec::new(),
            status: GroupStatus::RejectedDegenerate,
        };
    }
    let advantages: Vec<R> = rewards.iter().map(|r| (*r - mean) / std).collect();
    let accepted: Vec<usize> = advantages
        .iter()
        .enumerate()
        .filter(|(_, a)| a.abs() > cfg.tau_adv)
        .map(|(i, _)| i)
        .collect();
    if accepted.is_empty() || accepted.len() == g {
        return GroupDecision {
            advantages,
            accepted: Vec::new(),
            status: GroupStatus::RejectedAllOrNone,
        };
    }
    GroupDecision {
        advantages,
        accepted,
        status: GroupStatus::Accepted,
    }
}

/// Geometric-mean, length-normalized importance ratio:
/// `exp(mean_t(logp_new[t] - logp_old[t]))`. Strictly positive, and bounded
/// by `e^±L` whenever every per-token log-ratio is bounded by `L`,
/// independent of sequence length.
pub fn sequence_ratio<R: Real>(logp_new: &[R], logp_old: &[R]) -> Result<R, RlError> {
    if logp_new.len() != logp_old.len() {
        return Err(RlError::LengthMismatch {
            new_len: logp_new.len(),
            old_len: logp_old.len(),
        });
    }
    if logp_new.is_empty() {
        return Err(RlError::EmptySequence { index: 0 });
    }
    let mut sum = R::zero();
    for (n, o) in logp_new.iter().zip(logp_old.iter()) {
        if !n.is_finite() || !o.is_finite() {
            return Err(RlError::InvalidLogProb {
                index: 0,
                value: if n.is_finite() {
                    o.to_f64().unwrap_or(f64::NAN)
                } else {
                    n.to_f64().unwrap_or(f64::NAN)
                },
            });
        }
        sum = sum + (*n - *o);
    }
    Ok((sum / R::from_count(logp_new.len())).exp())
}

/// One clipped surrogate term:
/// `min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A)`.
pub fn clipped_term<R: Real>(r_seq: R, adv: R, cfg: &RlConfig<R>) -> R {
    let clipped = r_seq
        .max(R::one() - cfg.eps_low)
        .min(R::one() + cfg.eps_high);
    (r_seq * adv).min(clipped * adv)
}

/// Evaluates the clipped objective for one group.
///
/// Rejected groups contribute value 0 with an empty per-sample list. For
/// accepted groups only accepted indices contribute, but the normalization
/// stays `1/G` over the full group size.
pub fn group_objective<R: Real>(
    group: &RolloutGroup<R>,
    cfg: &RlConfig<R>,
) -> Result<GroupEvaluation<R>, RlError> {
    group.validate()?;
    let decision = group_filter(group, cfg);
    if !decision.status.is_accepted() {
        return Ok(GroupEvaluation {
            value: R::zero(),
            decision,
            per_sample: Vec::new(),
        });
    }
    let mut per_sample = Vec::with_capacity(decision.accepted.len());
    let mut total = R::zero();
    for &i in &decision.accepted {
        let ratio = sequence_ratio(&group.logp_new[i], &group.logp_old[i])?;
        let advantage = decision.advantages[i];
        let term = clipped_term(ratio, advantage, cfg);
        total = total + term;
        per_sample.push(SampleTerm {
            index: i,
            ratio,
            advantage,
            term,
        });
    }
    let value = total / R::from_count(group.rewards.len());
    Ok(GroupEvaluation {
        value,
        decision,
        per_sample,
    })
}
