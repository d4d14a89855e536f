//! Acceptance suite: one test per shipping criterion, each printing a
//! `[PASS]` line with its measured numbers (run with `-- --nocapture` to see
//! them). Tolerances and case counts are pinned in the constants below.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Number, Value};

use reflex_core::evalmetrics::{repair_at_n, AttemptRecord};
use reflex_core::perturb::{self, Operator, PerturbOptions};
use reflex_core::reward::{aggregate_score, format_factor, RewardConfig, Rewarder};
use reflex_core::rlkernel::{
    clipped_term, group_objective, sequence_ratio, RlConfig, RolloutGroup,
};
use reflex_core::schema::validate_call;
use reflex_core::synth::{synth_corpus, SynthConfig};
use reflex_core::trajectory::{
    canonicalize_call, equal_calls, parse_completion, ParseOptions, ParsedCompletion, ToolCall,
};

// ---------------------------------------------------------------------------
// Seeded generators shared by the fuzzed criteria
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "repair",
    "the",
    "call",
    "missing",
    "required",
    "arguments",
    "schema",
    "order",
    "redundant",
    "retry",
    "tool",
    "first",
    "then",
    "continue",
    "duplicate",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_value(rng: &mut ChaCha8Rng, depth: usize) -> Value {
    let top = if depth == 0 { 5 } else { 7 };
    match rng.gen_range(0..top) {
        0 => Value::Null,
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(rng.gen_range(-1000i64..1000)),
        3 => {
            // Halves, so integral floats like 2.0 appear often.
            let v = rng.gen_range(-200i64..200) as f64 / 2.0;
            Value::Number(Number::from_f64(v).unwrap())
        }
        4 => json!(WORDS[rng.gen_range(0..WORDS.len())]),
        5 => Value::Array(
            (0..rng.gen_range(0..3))
                .map(|_| random_value(rng, depth - 1))
                .collect(),
        ),
        _ => {
            let mut map = Map::new();
            for _ in 0..rng.gen_range(0..3) {
                map.insert(
                    WORDS[rng.gen_range(0..WORDS.len())].to_string(),
                    random_value(rng, depth - 1),
                );
            }
            Value::Object(map)
        }
    }
}

fn random_call(rng: &mut ChaCha8Rng) -> ToolCall {
    let names = ["alpha", "beta", "gamma", "delta", "epsilon"];
    let mut args = Map::new();
    for _ in 0..rng.gen_range(0..3) {
        args.insert(
            ["x", "y", "z", "k"][rng.gen_range(0..4)].to_string(),
            random_value(rng, 2),
        );
    }
    ToolCall::new(names[rng.gen_range(0..names.len())], args)
}

fn random_multiset(rng: &mut ChaCha8Rng, max: usize) -> Vec<ToolCall> {
    (0..rng.gen_range(0..=max))
        .map(|_| random_call(rng))
        .collect()
}

fn random_completion(rng: &mut ChaCha8Rng) -> ParsedCompletion {
    ParsedCompletion {
        reflection: rng.gen_bool(0.6).then(|| random_text(rng, 6)),
        calls: rng.gen_bool(0.7).then(|| random_multiset(rng, 3)),
        final_text: rng.gen_bool(0.5).then(|| random_text(rng, 6)),
    }
}

/// Ground truth with at least one part present.
fn random_truth(rng: &mut ChaCha8Rng) -> ParsedCompletion {
    loop {
        let g = random_completion(rng);
        if g.reflection.is_some() || g.call_count() > 0 || g.final_text.is_some() {
            return g;
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Reward range and batch variance
// ---------------------------------------------------------------------------

#[test]
fn c01_reward_range_and_variance() {
    const CASES: usize = 100_000;
    let start = Instant::now();
    let rewarder = Rewarder::new(RewardConfig::<f64>::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..CASES {
        let c = random_completion(&mut rng);
        let g = random_truth(&mut rng);
        let b = rewarder.total_reward(&c.render(), &g.render()).unwrap();
        assert!(
            (0.0..=1.0).contains(&b.r_total),
            "reward {} outside [0, 1] for {c:?} vs {g:?}",
            b.r_total
        );
        sum += b.r_total;
        sum_sq += b.r_total * b.r_total;
        lo = lo.min(b.r_total);
        hi = hi.max(b.r_total);
    }
    let mean = sum / CASES as f64;
    let var = sum_sq / CASES as f64 - mean * mean;
    assert!(var <= 0.25, "batch variance {var} exceeds 1/4");
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "took {elapsed:?}, budget 30 s"
    );
    println!(
        "[PASS] 01 reward range & variance: {CASES} pairs in [{lo:.3}, {hi:.3}], var {var:.4} <= 0.25, {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// 2. Aggregate-score suite: bounds, absent-part stability, weight scaling
// ---------------------------------------------------------------------------

#[test]
fn c02_aggregate_bounds_toggles_and_scaling() {
    const CASES: usize = 10_000;
    let start = Instant::now();
    let cfg = RewardConfig::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..CASES {
        let g = random_truth(&mut rng);
        let scores = (
            rng.gen_range(0.0..=1.0),
            rng.gen_range(0.0..=1.0),
            rng.gen_range(0.0..=1.0),
        );
        let agg = aggregate_score(scores, &g, &cfg).unwrap();

        // (a) aggregate confined to the active scores' range.
        let mut active = Vec::new();
        if agg.i_ref {
            active.push(scores.0);
        }
        if agg.i_call {
            active.push(scores.1);
        }
        if agg.i_final {
            active.push(scores.2);
        }
        let lo = active.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(agg.aggregate >= lo - 1e-12 && agg.aggregate <= hi + 1e-12);

        // (b) toggling parts with a zero mask is bit-invisible. The call
        // part toggles between absent and present-but-empty; masked-off
        // completion parts are not part of the aggregate at all.
        if g.call_count() == 0 {
            let mut toggled = g.clone();
            toggled.calls = match g.calls {
                None => Some(vec![]),
                Some(_) => None,
            };
            let b = aggregate_score(scores, &toggled, &cfg).unwrap();
            assert_eq!(agg.aggregate.to_bits(), b.aggregate.to_bits());
        }

        // (c) scaling every base weight by a common factor moves the
        // aggregate by less than 1e-12.
        let lambda = 10f64.powf(rng.gen_range(-3.0..=3.0));
        let mut scaled = cfg.clone();
        scaled.w_r *= lambda;
        scaled.w_c *= lambda;
        scaled.w_f *= lambda;
        let s = aggregate_score(scores, &g, &scaled).unwrap();
        assert!(
            (agg.aggregate - s.aggregate).abs() < 1e-12,
            "lambda {lambda}: {} vs {}",
            agg.aggregate,
            s.aggregate
        );
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "took {elapsed:?}, budget 10 s"
    );
    println!(
        "[PASS] 02 aggregate bounds, absent-part stability, weight scaling: {CASES} cases, {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// 3. Format-factor suite: monotonicity, plateaus, sensitivity bound
// ---------------------------------------------------------------------------

#[test]
fn c03_format_factor_monotonicity_and_plateaus() {
    const PAIRS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let base = RewardConfig::<f64>::default();

    // Monotone nonincrease in each penalty component, lambda_m, and r_fmt.
    for _ in 0..PAIRS {
        let pens = (
            rng.gen_range(0.0..1.5),
            rng.gen_range(0.0..1.5),
            rng.gen_range(0.0..1.5),
        );
        let equal = rng.gen_bool(0.5);
        let (f0, _, _) = format_factor(pens, equal, &base);

        let mut bumped = pens;
        let bump = rng.gen_range(0.0..1.0);
        match rng.gen_range(0..3) {
            0 => bumped.0 += bump,
            1 => bumped.1 += bump,
            _ => bumped.2 += bump,
        }
        let (f1, _, _) = format_factor(bumped, equal, &base);
        assert!(f1 <= f0 + 1e-12, "penalty bump raised F: {f0} -> {f1}");

        let (lam_lo, lam_hi) = {
            let a: f64 = rng.gen_range(0.0..3.0);
            let b: f64 = rng.gen_range(0.0..3.0);
            (a.min(b), a.max(b))
        };
        let mut cfg = base.clone();
        cfg.lambda_m = lam_lo;
        let (f_lo, _, _) = format_factor(pens, equal, &cfg);
        cfg.lambda_m = lam_hi;
        let (f_hi, _, _) = format_factor(pens, equal, &cfg);
        assert!(f_hi <= f_lo + 1e-12, "lambda bump raised F");

        // Larger attenuation scalar means a larger effective penalty.
        let (r_lo, r_hi) = {
            let a: f64 = rng.gen_range(0.01..1.0);
            let b: f64 = rng.gen_range(0.01..1.0);
            (a.min(b), a.max(b))
        };
        let mut cfg = base.clone();
        cfg.r_reduce = r_lo;
        let (f_small, _, _) = format_factor(pens, true, &cfg);
        cfg.r_reduce = r_hi;
        let (f_big, _, _) = format_factor(pens, true, &cfg);
        assert!(f_big <= f_small + 1e-12, "r_fmt bump raised F");

        // Flipping call equality from false to true never lowers F.
        let (f_neq, _, _) = format_factor(pens, false, &base);
        let (f_eq, _, _) = format_factor(pens, true, &base);
        assert!(f_eq >= f_neq - 1e-12);
    }

    // Plateau characterizations, exact on constructed boundary cases.
    let (f, _, _) = format_factor((0.0, 0.0, 0.0), false, &base);
    assert_eq!(f, 1.0);
    let mut zero_lambda = base.clone();
    zero_lambda.lambda_m = 0.0;
    let (f, _, _) = format_factor((0.7, 0.3, 0.2), false, &zero_lambda);
    assert_eq!(f, 1.0, "zero scale must sit on the F = 1 plateau");
    let (f, _, _) = format_factor((1e-9, 0.0, 0.0), false, &base);
    assert!(f < 1.0, "any scaled penalty must leave the F = 1 plateau");

    // F = 0 exactly at P_total = 1 / (lambda_m * r_fmt) and beyond.
    let mut cfg = base.clone();
    cfg.lambda_m = 2.0;
    cfg.r_reduce = 0.5;
    for equal in [false, true] {
        let r_fmt = if equal { 0.5 } else { 1.0 };
        let threshold = 1.0 / (cfg.lambda_m * r_fmt);
        let (f, _, _) = format_factor((threshold, 0.0, 0.0), equal, &cfg);
        assert_eq!(f, 0.0, "boundary case must floor exactly");
        let (f, _, _) = format_factor((threshold * 1.5, 0.0, 0.0), equal, &cfg);
        assert_eq!(f, 0.0);
        let (f, _, _) = format_factor((threshold * 0.99, 0.0, 0.0), equal, &cfg);
        assert!(f > 0.0);
    }

    // Sensitivity bound off the plateaus.
    let mut checked = 0usize;
    for _ in 0..PAIRS {
        let a = (
            rng.gen_range(0.001..0.4),
            rng.gen_range(0.001..0.4),
            rng.gen_range(0.001..0.4),
        );
        let b = (
            rng.gen_range(0.001..0.4),
            rng.gen_range(0.001..0.4),
            rng.gen_range(0.001..0.4),
        );
        let equal = rng.gen_bool(0.5);
        let (f_a, r_fmt, p_a) = format_factor(a, equal, &base);
        let (f_b, _, p_b) = format_factor(b, equal, &base);
        let inner_a = 1.0 - base.lambda_m * p_a * r_fmt;
        let inner_b = 1.0 - base.lambda_m * p_b * r_fmt;
        if !(inner_a > 0.0 && inner_a < 1.0 && inner_b > 0.0 && inner_b < 1.0) {
            continue;
        }
        let bound = base.lambda_m
            * r_fmt
            * ((a.0 - b.0).abs()
                + base.beta_extra * (a.1 - b.1).abs()
                + base.gamma_count * (a.2 - b.2).abs());
        assert!(
            (f_a - f_b).abs() <= bound + 1e-12,
            "sensitivity bound violated"
        );
        checked += 1;
    }
    assert!(
        checked > PAIRS / 2,
        "too few off-plateau samples: {checked}"
    );
    println!(
        "[PASS] 03 format-factor monotonicity, plateaus, sensitivity: {PAIRS} ordered pairs, {checked} off-plateau"
    );
}

// ---------------------------------------------------------------------------
// 4. Sequence-ratio range and the unnormalized blow-up
// ---------------------------------------------------------------------------

#[test]
fn c04_sequence_ratio_range_and_blowup() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for l in [0.1f64, 0.5, 1.0] {
        for t in 1..=512usize {
            let deltas: Vec<f64> = (0..t).map(|_| rng.gen_range(-l..=l)).collect();
            let logp_old: Vec<f64> = (0..t).map(|_| -rng.gen_range(1.0..3.0)).collect();
            let logp_new: Vec<f64> = logp_old
                .iter()
                .zip(&deltas)
                .map(|(lp, d)| (lp + d).min(0.0))
                .collect();
            // Clamping at 0 can only shrink a positive delta, so the
            // per-token log-ratio stays within [-L, L].
            let r = sequence_ratio(&logp_new, &logp_old).unwrap();
            assert!(
                r >= (-l).exp() - 1e-12 && r <= l.exp() + 1e-12,
                "L={l} T={t}: ratio {r} escapes [e^-L, e^L]"
            );
        }
    }

    // The unnormalized running product escapes the same band almost surely
    // at T = 256, L = 0.5, while the normalized ratio never does.
    const TRIALS: usize = 1_000;
    let l = 0.5f64;
    let t = 256usize;
    let mut escaped = 0usize;
    for _ in 0..TRIALS {
        let deltas: Vec<f64> = (0..t).map(|_| rng.gen_range(-l..=l)).collect();
        let mut log_product = 0.0f64;
        let mut did_escape = false;
        for d in &deltas {
            log_product += d;
            if log_product.abs() > l {
                did_escape = true;
            }
        }
        if did_escape {
            escaped += 1;
        }
        let logp_old: Vec<f64> = vec![-2.0; t];
        let logp_new: Vec<f64> = deltas.iter().map(|d| -2.0 + d).collect();
        let r = sequence_ratio(&logp_new, &logp_old).unwrap();
        assert!(r >= (-l).exp() - 1e-12 && r <= l.exp() + 1e-12);
    }
    let fraction = escaped as f64 / TRIALS as f64;
    assert!(fraction > 0.99, "only {fraction:.3} of products blew up");
    println!(
        "[PASS] 04 ratio in [e^-L, e^L] for T=1..512, L in {{0.1, 0.5, 1.0}}; raw product escaped in {:.1}% of {TRIALS} trials",
        fraction * 100.0
    );
}

// ---------------------------------------------------------------------------
// 5. Filtering invariance
// ---------------------------------------------------------------------------

/// Group whose rewards contain exact zero-advantage entries: pairs
/// symmetric about `mid` plus `mid` itself, so the mean is exactly `mid`.
fn symmetric_group(rng: &mut ChaCha8Rng) -> RolloutGroup<f64> {
    let mid = rng.gen_range(0.35..0.65);
    let mut rewards = vec![mid];
    for _ in 0..rng.gen_range(1..4) {
        let d = rng.gen_range(0.05..0.3);
        rewards.push(mid - d);
        rewards.push(mid + d);
    }
    // Per-token log-ratios within +-0.2 keep every sequence ratio inside
    // the (1 - eps_low, 1 + eps_high) window, the regime of the bound.
    let mut logp_new = Vec::new();
    let mut logp_old = Vec::new();
    for _ in &rewards {
        let len = rng.gen_range(1..12);
        let old: Vec<f64> = (0..len).map(|_| -rng.gen_range(1.0..3.0)).collect();
        let new: Vec<f64> = old
            .iter()
            .map(|lp| (lp + rng.gen_range(-0.2..0.2)).min(0.0))
            .collect();
        logp_old.push(old);
        logp_new.push(new);
    }
    RolloutGroup {
        group_id: "sym".to_string(),
        rewards,
        logp_new,
        logp_old,
    }
}

#[test]
fn c05_filtering_invariance() {
    const GROUPS: usize = 1_000;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = RlConfig::<f64>::default();
    let mut zero_checked = 0usize;
    let mut bound_checked = 0usize;

    for _ in 0..GROUPS {
        let group = symmetric_group(&mut rng);
        let g = group.rewards.len();

        // Zero-advantage rollouts contribute exactly nothing: adding their
        // terms back into the filtered sum changes the value by 0.
        let eval = group_objective(&group, &cfg).unwrap();
        if eval.decision.status.is_accepted() {
            let mut padded = eval.value;
            for (i, adv) in eval.decision.advantages.iter().enumerate() {
                if *adv == 0.0 {
                    let r = sequence_ratio(&group.logp_new[i], &group.logp_old[i]).unwrap();
                    padded += clipped_term(r, 0.0, &cfg) / g as f64;
                    zero_checked += 1;
                }
            }
            assert_eq!(
                padded.to_bits(),
                eval.value.to_bits(),
                "zero-advantage rollout changed the objective"
            );
        }

        // Discarding all |A| <= tau_adv moves the value by at most
        // (1 + eps_high) * tau_adv * |discarded| / G.
        let mut tau_cfg = cfg.clone();
        tau_cfg.tau_adv = rng.gen_range(0.2..1.2);
        let filtered = group_objective(&group, &tau_cfg).unwrap();
        if !filtered.decision.status.is_accepted() {
            continue;
        }
        let mut unfiltered = 0.0;
        for i in 0..g {
            let r = sequence_ratio(&group.logp_new[i], &group.logp_old[i]).unwrap();
            unfiltered += clipped_term(r, filtered.decision.advantages[i], &tau_cfg);
        }
        unfiltered /= g as f64;
        let discarded = g - filtered.decision.accepted.len();
        let bound = (1.0 + tau_cfg.eps_high) * tau_cfg.tau_adv * discarded as f64 / g as f64;
        assert!(
            (unfiltered - filtered.value).abs() <= bound + 1e-12,
            "discard delta {} over bound {bound}",
            (unfiltered - filtered.value).abs()
        );
        bound_checked += 1;
    }
    assert!(
        zero_checked >= GROUPS / 2,
        "too few zero-advantage rollouts: {zero_checked}"
    );
    assert!(
        bound_checked >= GROUPS / 10,
        "too few accepted tau groups: {bound_checked}"
    );
    println!(
        "[PASS] 05 filtering invariance: {GROUPS} groups, {zero_checked} zero-advantage rollouts inert, {bound_checked} discard bounds held"
    );
}

// ---------------------------------------------------------------------------
// 6. Published clip values
// ---------------------------------------------------------------------------

#[test]
fn c06_clip_values_exact() {
    let cfg = RlConfig::<f64>::default();
    assert_eq!(cfg.eps_low, 0.2);
    assert_eq!(cfg.eps_high, 0.28);

    let up = clipped_term(2.0, 1.0, &cfg);
    assert_eq!(up, 1.0 + 0.28, "upper clip must bind exactly");
    assert!((up - 1.28).abs() < 1e-15);

    let down = clipped_term(0.5, -1.0, &cfg);
    assert_eq!(down, -(1.0 - 0.2), "lower clip must bind exactly");
    assert!((down + 0.8).abs() < 1e-15);

    println!("[PASS] 06 clip values: clipped_term(2, 1) = {up}, clipped_term(0.5, -1) = {down}");
}

// ---------------------------------------------------------------------------
// 7. Call-equality oracle equivalence
// ---------------------------------------------------------------------------

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(p, q)| json_eq(p, q))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len()
                && xs
                    .iter()
                    .all(|(k, v)| ys.get(k).is_some_and(|w| json_eq(v, w)))
        }
        _ => a == b,
    }
}

/// Brute-force matcher: backtracking search for a perfect pairing.
fn oracle_equal(a: &[ToolCall], b: &[ToolCall]) -> bool {
    fn assign(a: &[ToolCall], b: &[ToolCall], used: &mut Vec<bool>, i: usize) -> bool {
        if i == a.len() {
            return true;
        }
        for j in 0..b.len() {
            if used[j]
                || a[i].name != b[j].name
                || !json_eq(
                    &Value::Object(a[i].arguments.clone()),
                    &Value::Object(b[j].arguments.clone()),
                )
            {
                continue;
            }
            used[j] = true;
            if assign(a, b, used, i + 1) {
                return true;
            }
            used[j] = false;
        }
        false
    }
    a.len() == b.len() && assign(a, b, &mut vec![false; b.len()], 0)
}

#[test]
fn c07_call_equality_matches_bruteforce() {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut equal_seen = 0usize;
    for case in 0..CASES {
        let a = random_multiset(&mut rng, 6);
        let b = match case % 3 {
            // Independent draw: usually unequal.
            0 => random_multiset(&mut rng, 6),
            // Shuffle of a: always equal.
            1 => {
                let mut b = a.clone();
                for i in (1..b.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    b.swap(i, j);
                }
                b
            }
            // Near miss: shuffle plus one mutation.
            _ => {
                let mut b = a.clone();
                for i in (1..b.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    b.swap(i, j);
                }
                if !b.is_empty() {
                    let idx = rng.gen_range(0..b.len());
                    b[idx]
                        .arguments
                        .insert("mutated".to_string(), random_value(&mut rng, 1));
                }
                b
            }
        };
        let fast = equal_calls(&a, &b);
        let slow = oracle_equal(&a, &b);
        assert_eq!(fast, slow, "disagreement on {a:?} vs {b:?}");
        if fast {
            equal_seen += 1;
        }
    }
    assert!(
        equal_seen >= CASES / 4,
        "generator exercised too few equal pairs: {equal_seen}"
    );
    println!(
        "[PASS] 07 call-equality oracle: {CASES} multiset pairs (size <= 6), {equal_seen} equal, 0 disagreements"
    );
}

// ---------------------------------------------------------------------------
// 8. Pipeline round-trip on a 200-trajectory fixture corpus
// ---------------------------------------------------------------------------

#[test]
fn c08_pipeline_roundtrip_200_trajectories() {
    let synth_cfg = SynthConfig {
        trajectories: 200,
        seed: 808,
        ..Default::default()
    };
    let (registry, corpus) = synth_corpus(&synth_cfg);
    let opts = PerturbOptions {
        seed: 8080,
        test_fraction: 0.25,
        items_per_trajectory: 2,
        ..Default::default()
    };
    let out = perturb::generate(&corpus, &registry, &opts).unwrap();
    assert!(
        out.items.len() >= 300,
        "only {} items emitted",
        out.items.len()
    );

    let parse_opts = ParseOptions::default();
    let mut by_operator: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &out.items {
        let verdict = perturb::validate_item(item, &registry);
        assert!(verdict.retained, "{}: {:?}", item.item_id, verdict.reasons);

        let traj_idx: usize = item.item_id[1..6].parse().unwrap();
        let clean_calls = corpus[traj_idx].all_calls(&parse_opts);
        assert!(
            equal_calls(&item.replayed_calls(), &clean_calls),
            "{}: replay does not reproduce the clean call multiset",
            item.item_id
        );

        let broken = parse_completion(&item.broken_message().unwrap().content)
            .unwrap()
            .calls
            .unwrap_or_default();
        match item.provenance.operator {
            Operator::Redundant => {
                let canon: Vec<String> = broken.iter().map(canonicalize_call).collect();
                let has_dup = canon
                    .iter()
                    .enumerate()
                    .any(|(i, c)| canon.iter().skip(i + 1).any(|d| c == d));
                assert!(has_dup, "{}: no verbatim duplicate", item.item_id);
            }
            _ => {
                assert!(
                    broken.iter().any(|c| !validate_call(c, &registry).is_ok()),
                    "{}: broken call still executes",
                    item.item_id
                );
            }
        }
        *by_operator
            .entry(item.provenance.operator.as_str())
            .or_default() += 1;
    }
    assert_eq!(
        by_operator.len(),
        4,
        "all four operators must appear: {by_operator:?}"
    );
    println!(
        "[PASS] 08 pipeline round-trip: {} items from 200 trajectories, all retained/negative/replayable, mix {:?}",
        out.items.len(),
        by_operator
    );
}

// ---------------------------------------------------------------------------
// 9. Repair-rate calibration
// ---------------------------------------------------------------------------

#[test]
fn c09_repair_rate_calibration() {
    const ITEMS: usize = 2_000;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);

    // Per item: five candidate calls, exactly one correct.
    let mut answers: BTreeMap<String, Vec<ToolCall>> = BTreeMap::new();
    let mut candidates: Vec<Vec<String>> = Vec::with_capacity(ITEMS);
    for i in 0..ITEMS {
        let id = format!("item-{i:05}");
        let correct = vec![ToolCall::new(
            "repair",
            serde_json::from_value(json!({"target": i, "mode": "exact"})).unwrap(),
        )];
        let mut cands = Vec::with_capacity(5);
        let correct_slot = rng.gen_range(0..5);
        for slot in 0..5 {
            let calls = if slot == correct_slot {
                correct.clone()
            } else {
                vec![ToolCall::new(
                    "repair",
                    serde_json::from_value(json!({"target": i, "mode": format!("wrong-{slot}")}))
                        .unwrap(),
                )]
            };
            cands.push(
                ParsedCompletion {
                    reflection: Some("diagnosed and corrected".to_string()),
                    calls: Some(calls),
                    final_text: None,
                }
                .render(),
            );
        }
        answers.insert(id, correct);
        candidates.push(cands);
    }

    // Oracle repairer: always emits the correct candidate.
    let oracle: Vec<AttemptRecord> = answers
        .iter()
        .map(|(id, correct)| AttemptRecord {
            item_id: id.clone(),
            attempts: vec![ParsedCompletion {
                reflection: Some("exact repair".to_string()),
                calls: Some(correct.clone()),
                final_text: None,
            }
            .render()],
        })
        .collect();
    let at1: f64 = repair_at_n(&oracle, 1, &answers).unwrap();
    assert_eq!(at1, 1.0, "oracle repairer must score 1.0");

    // Always-wrong repairer.
    let wrong: Vec<AttemptRecord> = answers
        .keys()
        .map(|id| AttemptRecord {
            item_id: id.clone(),
            attempts: vec!["<reflect>r</reflect><call>[]</call>".to_string(); 5],
        })
        .collect();
    for n in [1usize, 3, 5] {
        let rate: f64 = repair_at_n(&wrong, n, &answers).unwrap();
        assert_eq!(rate, 0.0, "always-wrong repairer must score 0.0 at n={n}");
    }

    // Uniform-among-five scripted repairer, three attempts per item.
    let scripted: Vec<AttemptRecord> = answers
        .keys()
        .enumerate()
        .map(|(i, id)| AttemptRecord {
            item_id: id.clone(),
            attempts: (0..3)
                .map(|_| candidates[i][rng.gen_range(0..5)].clone())
                .collect(),
        })
        .collect();
    let at3: f64 = repair_at_n(&scripted, 3, &answers).unwrap();
    let expected = 1.0 - (4.0f64 / 5.0).powi(3);
    let ci99 = 2.576 * (expected * (1.0 - expected) / ITEMS as f64).sqrt();
    assert!(
        (at3 - expected).abs() <= ci99,
        "scripted rate {at3:.4} outside {expected:.4} +- {ci99:.4}"
    );

    // Monotonicity in the attempt budget.
    let at1_scripted: f64 = repair_at_n(&scripted, 1, &answers).unwrap();
    let at2_scripted: f64 = repair_at_n(&scripted, 2, &answers).unwrap();
    assert!(at1_scripted <= at2_scripted && at2_scripted <= at3);

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "took {elapsed:?}, budget 60 s"
    );
    println!(
        "[PASS] 09 repair-rate calibration: oracle 1.0, always-wrong 0.0, scripted {at3:.4} in {expected:.4} +- {ci99:.4}, {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// 10. Byte-identical determinism of every subcommand
// ---------------------------------------------------------------------------

fn run_reflex(args: &[&str]) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_reflex"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    assert!(status.success(), "reflex {args:?} failed");
}

fn assert_same_bytes(a: &Path, b: &Path, name: &str) {
    let left = std::fs::read(a.join(name)).unwrap_or_else(|_| panic!("{name} missing in {a:?}"));
    let right = std::fs::read(b.join(name)).unwrap_or_else(|_| panic!("{name} missing in {b:?}"));
    assert_eq!(left, right, "{name} differs between runs");
}

#[test]
fn c10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Inputs: synthetic corpus + schema, score pairs, rollout groups.
    let (registry, corpus) = synth_corpus(&SynthConfig {
        trajectories: 40,
        seed: 1010,
        ..Default::default()
    });
    reflex_core::jsonl::write_jsonl(root.join("clean.jsonl"), corpus.iter()).unwrap();
    std::fs::write(
        root.join("tools.json"),
        serde_json::to_string_pretty(&registry.to_schemas()).unwrap(),
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let pairs: Vec<Value> = (0..300)
        .map(|_| {
            let c = random_completion(&mut rng);
            let g = random_truth(&mut rng);
            json!({"completion": c.render(), "ground_truth": g.render()})
        })
        .collect();
    reflex_core::jsonl::write_jsonl(root.join("pairs.jsonl"), pairs.iter()).unwrap();

    let groups: Vec<Value> = (0..150)
        .map(|i| {
            let g = rng.gen_range(2..6usize);
            let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let logp_old: Vec<Vec<f64>> = (0..g)
                .map(|_| (0..rng.gen_range(1..8)).map(|_| -rng.gen_range(0.5..3.0)).collect())
                .collect();
            let logp_new: Vec<Vec<f64>> = logp_old
                .iter()
                .map(|seq| seq.iter().map(|lp| (lp + rng.gen_range(-0.3..0.3)).min(0.0)).collect())
                .collect();
            json!({"group_id": format!("g{i}"), "rewards": rewards, "logp_new": logp_new, "logp_old": logp_old})
        })
        .collect();
    reflex_core::jsonl::write_jsonl(root.join("groups.jsonl"), groups.iter()).unwrap();

    let clean = root.join("clean.jsonl");
    let tools = root.join("tools.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // perturb twice.
    let (p1, p2) = (root.join("p1"), root.join("p2"));
    for out in [&p1, &p2] {
        run_reflex(&[
            "perturb",
            "--input",
            &s(&clean),
            "--schema",
            &s(&tools),
            "--seed",
            "42",
            "--out",
            &s(out),
        ]);
    }
    for name in [
        "train.jsonl",
        "test.jsonl",
        "answers.jsonl",
        "rejects.jsonl",
    ] {
        assert_same_bytes(&p1, &p2, name);
    }

    // score twice.
    let (s1, s2) = (root.join("s1"), root.join("s2"));
    for out in [&s1, &s2] {
        run_reflex(&[
            "score",
            "--input",
            &s(&root.join("pairs.jsonl")),
            "--out",
            &s(out),
        ]);
    }
    for name in ["scores.jsonl", "rejects.jsonl"] {
        assert_same_bytes(&s1, &s2, name);
    }

    // rl-eval twice.
    let (r1, r2) = (root.join("r1"), root.join("r2"));
    for out in [&r1, &r2] {
        run_reflex(&[
            "rl-eval",
            "--input",
            &s(&root.join("groups.jsonl")),
            "--out",
            &s(out),
        ]);
    }
    for name in ["groups.jsonl", "rejects.jsonl"] {
        assert_same_bytes(&r1, &r2, name);
    }

    // eval twice, attempts scripted from the answers of the perturb run.
    let answers: Vec<perturb::AnswerRecord> =
        reflex_core::jsonl::read_jsonl(p1.join("answers.jsonl")).unwrap();
    let attempts: Vec<Value> = answers
        .iter()
        .map(|a| {
            let repair = ParsedCompletion {
                reflection: Some(a.reflection.clone()),
                calls: Some(a.corrected_call.clone()),
                final_text: None,
            }
            .render();
            json!({"item_id": a.item_id, "attempts": [repair, "<reflect>x</reflect>", repair]})
        })
        .collect();
    reflex_core::jsonl::write_jsonl(root.join("attempts.jsonl"), attempts.iter()).unwrap();
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    for out in [&e1, &e2] {
        run_reflex(&[
            "eval",
            "--attempts",
            &s(&root.join("attempts.jsonl")),
            "--answers",
            &s(&p1.join("answers.jsonl")),
            "--schema",
            &s(&tools),
            "-n",
            "1",
            "-n",
            "3",
            "--out",
            &s(out),
        ]);
    }
    for name in ["report.json", "verdicts.jsonl"] {
        assert_same_bytes(&e1, &e2, name);
    }

    println!(
        "[PASS] 10 determinism: perturb/score/rl-eval/eval byte-identical across repeated runs"
    );
}
