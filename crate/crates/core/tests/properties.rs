use std::collections::HashMap;

use proptest::prelude::*;

use cose_loop::confidence::{SignalKind, TokenDistribution};
use cose_loop::credit::{proposer_weight, solver_weight, UpdateWeight};
use cose_loop::experiment::RunConfig;
use cose_loop::feedback::{assess, normalize_score, RawVerdict, ScoreScale};
use cose_loop::orchestrator::AblationMode;
use cose_loop::ppo::{
    advantages, kl_divergence, surrogate_loss, Context, OptimizerConfig, PolicyParams, PolicyToken,
    RolloutBatch, Sample,
};
use cose_loop::replay::{priority, BufferConfig, InsertOutcome, QuestionRecord, ReplayBuffer};
use cose_loop::Role;

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn policy(rows: usize, cols: usize) -> impl Strategy<Value = PolicyParams> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| PolicyParams::from_vec(rows, cols, v).unwrap())
}

/// `(action, log-ratio, reward, weight)` per single-token sample on a `[1 x 3]` policy.
fn sample_draws() -> impl Strategy<Value = Vec<(usize, f64, f64, f64)>> {
    prop::collection::vec((0usize..3, -0.5f64..0.5, unit(), 0.1f64..=1.0), 1..12)
}

fn build(params: &PolicyParams, draws: &[(usize, f64, f64, f64)], scale: f64) -> RolloutBatch {
    RolloutBatch {
        samples: draws
            .iter()
            .map(|&(action, log_ratio, reward, w)| {
                let tokens = vec![PolicyToken {
                    context: Context::row(0),
                    action,
                }];
                let logp = params.sequence_log_prob(&tokens).unwrap();
                Sample {
                    role: Role::Solver,
                    tokens,
                    logp_behavior: logp - log_ratio,
                    logp_ref: logp,
                    reward,
                    weight: UpdateWeight {
                        value: w * scale,
                        role: Role::Solver,
                    },
                }
            })
            .collect(),
    }
}

fn oracle_priority(r: &QuestionRecord<String>) -> f64 {
    let p = if r.answer_count == 0 {
        0.5
    } else {
        r.judge_score_sum / r.answer_count as f64
    };
    r.v * r.c_v * f64::max(4.0 * p * (1.0 - p), 0.1)
}

fn no_kl() -> OptimizerConfig {
    OptimizerConfig {
        kl_coeff: 0.0,
        ..OptimizerConfig::published()
    }
}

proptest! {
    #[test]
    fn normalized_scores_are_affine(min in -20i64..20, width in 1i64..30, a in 0i64..30, b in 0i64..30) {
        let scale = ScoreScale::new(min, min + width).unwrap();
        let (a, b) = (min + a % (width + 1), min + b % (width + 1));
        let na = normalize_score(a, scale).unwrap();
        let nb = normalize_score(b, scale).unwrap();
        prop_assert!((na - (a - min) as f64 / width as f64).abs() < 1e-12);
        prop_assert_eq!(a < b, na < nb);
        prop_assert_eq!(normalize_score(min, scale).unwrap(), 0.0);
        prop_assert_eq!(normalize_score(min + width, scale).unwrap(), 1.0);
        prop_assert!(normalize_score(min + width + 1, scale).is_err());
    }

    #[test]
    fn format_failure_always_zeroes_the_score(score in 1i64..=10, p in 0.01f64..0.99, format_ok: bool) {
        let raw = RawVerdict {
            role: Role::Validator,
            score,
            scale: ScoreScale::default(),
            emission: vec![TokenDistribution::new(vec![p, 1.0 - p]).unwrap(); 3],
            emitted: None,
            score_span: 2..3,
            format_ok,
        };
        for kind in SignalKind::ALL {
            let a = assess(&raw, kind).unwrap();
            prop_assert_eq!(a, assess(&raw, kind).unwrap());
            prop_assert!((0.0..=1.0).contains(&a.confidence));
            if !format_ok {
                prop_assert_eq!(a.normalized_score, 0.0);
            }
        }
    }

    #[test]
    fn judge_factor_is_an_extra_multiplicand(v in unit(), cv in unit()) {
        prop_assert_eq!(solver_weight(v, cv, 1.0).unwrap(), UpdateWeight {
            role: Role::Solver,
            ..proposer_weight(v, cv).unwrap()
        });
    }

    #[test]
    fn priority_is_positive_and_peaks_at_half(v in 0.01f64..=1.0, cv in 0.01f64..=1.0, count in 1u64..50, k in 0u64..50) {
        let k = k.min(count);
        let mut r = QuestionRecord::new(0, String::new(), v, cv, 0);
        r.answer_count = count;
        r.judge_score_sum = k as f64;
        let mut peak = r.clone();
        peak.answer_count = 2;
        peak.judge_score_sum = 1.0;
        let p = priority(&r, 0.1);
        prop_assert!(p > 0.0);
        prop_assert!(p <= priority(&peak, 0.1));
    }

    #[test]
    fn buffer_operations_keep_their_contract(
        cap in 1usize..10,
        ops in prop::collection::vec((unit(), unit(), prop::option::of(unit()), any::<prop::sample::Index>()), 1..80),
    ) {
        let mut b = ReplayBuffer::new(BufferConfig { capacity: cap, ..BufferConfig::default() }).unwrap();
        let mut history: HashMap<u64, Vec<f64>> = HashMap::new();
        for (id, (v, cv, judgment, pick)) in ops.into_iter().enumerate() {
            let id = id as u64;
            match judgment {
                Some(score) if !b.is_empty() => {
                    let target = b.records()[pick.index(b.len())].id;
                    let p = b.record_judgment(target, score).unwrap();
                    let h = history.entry(target).or_default();
                    h.push(score);
                    let brute = h.iter().sum::<f64>() / h.len() as f64;
                    prop_assert!((p - brute).abs() < 1e-12);
                }
                _ => {
                    let before: Vec<(u64, f64, u64)> = b
                        .records()
                        .iter()
                        .map(|r| (r.id, oracle_priority(r), r.insertion_step))
                        .collect();
                    let out = b.insert(QuestionRecord::new(id, String::new(), v, cv, id)).unwrap();
                    if before.len() == cap {
                        let victim = before
                            .iter()
                            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.2.cmp(&y.2)))
                            .unwrap()
                            .0;
                        prop_assert_eq!(out, InsertOutcome::Evicted(victim));
                        prop_assert!(!b.contains(victim));
                    } else {
                        prop_assert_eq!(out, InsertOutcome::Inserted);
                    }
                    history.insert(id, Vec::new());
                }
            }
            prop_assert!(b.len() <= cap);
        }
    }

    #[test]
    fn weight_scaling_scales_the_policy_loss(params in policy(1, 3), draws in sample_draws(), k in 0.1f64..=1.0) {
        let base = build(&params, &draws, 1.0);
        let scaled = build(&params, &draws, k);
        let adv = advantages(&base);
        let a = surrogate_loss(&params, &params, &base, &adv, &no_kl()).unwrap().policy_loss;
        let b = surrogate_loss(&params, &params, &scaled, &adv, &no_kl()).unwrap().policy_loss;
        prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn clipping_is_inert_inside_the_trust_region(params in policy(1, 3), draws in sample_draws()) {
        let draws: Vec<_> = draws.into_iter().map(|(a, lr, r, w)| (a, lr.clamp(-0.15, 0.15), r, w)).collect();
        let batch = build(&params, &draws, 1.0);
        let adv = advantages(&batch);
        let report = surrogate_loss(&params, &params, &batch, &adv, &no_kl()).unwrap();
        for ((c, rho), (s, a)) in report.contributions.iter().zip(&report.ratios).zip(batch.samples.iter().zip(&adv)) {
            prop_assert!((c - (-s.weight.value * rho * a)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(p in policy(3, 4), q in policy(3, 4), offsets in prop::collection::vec(-1.0f64..1.0, 4)) {
        let contexts = [Context::row(0), Context::row(2), Context::with_offset(1, offsets)];
        prop_assert!(kl_divergence(&p, &q, &contexts).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p, &contexts).unwrap(), 0.0);
    }

    #[test]
    fn advantages_have_zero_mean(params in policy(1, 3), draws in sample_draws()) {
        let adv = advantages(&build(&params, &draws, 1.0));
        prop_assert!(adv.iter().sum::<f64>().abs() / (adv.len() as f64) < 1e-9);
    }

    #[test]
    fn resolved_config_round_trips(
        seed in 0..=i64::MAX as u64,
        lr in 1e-8f64..100.0,
        batch in 1usize..512,
        tau in unit(),
        signal in prop::sample::select(SignalKind::ALL.to_vec()),
        ablation in prop::sample::select(AblationMode::ALL.to_vec()),
        noise in 0.0f64..=0.5,
    ) {
        let mut c = RunConfig::desk();
        c.seed = seed;
        c.optimizer.learning_rate = lr;
        c.looping.solver_batch_size = batch;
        c.looping.validator_accept_threshold = tau;
        c.looping.ablation = ablation;
        c.signal = signal;
        c.world.judge_noise = noise;
        let text = c.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
