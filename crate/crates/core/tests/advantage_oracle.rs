//! The advantage pipeline against the brute-force oracle, plus the golden
//! fixture used by the CLI tests.

mod common;

use common::oracle::{oracle, OracleParams, OracleResponse, OracleToken};
use common::{max_oracle_diff, oracle_params, random_group};
use epgrpo::compute_group_advantages;
use epgrpo::rollout::{
    serialize_rollout_group, AdvantageConfig, ResponseRecord, RolloutGroup, TokenRecord,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const TOL: f64 = 1e-10;

#[test]
fn matches_oracle_on_random_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_241);
    let cfg = AdvantageConfig::default();
    let mut worst: f64 = 0.0;
    for id in 0..1000 {
        let (group, plain) = random_group(&mut rng, id);
        let adv = compute_group_advantages(&group, &cfg).unwrap();
        worst = worst.max(max_oracle_diff(&adv, &oracle(&plain, oracle_params(&cfg))));
    }
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn matches_oracle_under_other_hyperparameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let configs = [
        AdvantageConfig::new(1.0, 0.5, 1.0, 1, 0.5, 1e-3, 1e-6).unwrap(),
        AdvantageConfig::new(20.0, 0.01, 0.0, 3, 0.0, 1e-4, 1e-8).unwrap(),
        AdvantageConfig::new(5.0, 1.0, 0.5, 32, 1.0, 1e-2, 1e-4).unwrap(),
    ];
    for cfg in &configs {
        for id in 0..200 {
            let (group, plain) = random_group(&mut rng, id);
            let adv = compute_group_advantages(&group, cfg).unwrap();
            let d = max_oracle_diff(&adv, &oracle(&plain, oracle_params(cfg)));
            assert!(d <= TOL, "group {id}: deviation {d:e} under {cfg:?}");
        }
    }
}

/// Two responses of four tokens with hand-picked values, rewards [1, 0].
pub fn hand_listed_group() -> Vec<OracleResponse> {
    let tok = |logp_cur, logp_ref, entropy| OracleToken {
        logp_cur,
        logp_ref,
        entropy,
    };
    vec![
        OracleResponse {
            tokens: vec![
                tok(-0.2, -0.9, 1.6),
                tok(-1.1, -1.0, 0.4),
                tok(-0.05, -0.6, 2.1),
                tok(-0.7, -0.7, 0.0),
            ],
            reward: 1.0,
        },
        OracleResponse {
            tokens: vec![
                tok(-2.3, -1.2, 1.9),
                tok(-0.4, -0.5, 0.8),
                tok(-1.5, -0.3, 1.2),
                tok(-0.9, -2.0, 0.3),
            ],
            reward: 0.0,
        },
    ]
}

fn to_group(id: &str, plain: &[OracleResponse], ids: &[u32]) -> RolloutGroup {
    let mut k = 0;
    let responses = plain
        .iter()
        .map(|r| {
            let toks = r
                .tokens
                .iter()
                .map(|t| {
                    k += 1;
                    TokenRecord::new(ids[k % ids.len()], t.logp_cur, t.logp_ref, t.entropy).unwrap()
                })
                .collect();
            ResponseRecord::new(toks, r.reward).unwrap()
        })
        .collect();
    RolloutGroup::new(id, responses).unwrap()
}

#[test]
fn hand_listed_group_matches_oracle() {
    let plain = hand_listed_group();
    let group = to_group("hand", &plain, &[3, 7, 1, 12]);
    let cfg = AdvantageConfig::default();
    let adv = compute_group_advantages(&group, &cfg).unwrap();
    let want = oracle(&plain, OracleParams::default());
    assert!(max_oracle_diff(&adv, &want) <= TOL);
    // Spot values computed by hand: population std of [1, 0] is 0.5.
    assert!((want.a_hat[0] - 0.5 / 0.5001).abs() < 1e-15);
    assert_eq!(want.anchors, vec![1.0, -1.0]);
    assert!((want.tokens[0][0].s - 0.07).abs() < 1e-15);
}

fn oracle_record(
    id: &str,
    plain: &[OracleResponse],
    group: &RolloutGroup,
    p: OracleParams,
) -> Value {
    let o = oracle(plain, p);
    let responses: Vec<Value> = plain
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let tokens: Vec<Value> = o.tokens[i]
                .iter()
                .zip(group.responses()[i].tokens())
                .map(|(t, rec)| {
                    json!({
                        "id": rec.token_id(),
                        "gate_weight": t.gate,
                        "implicit_signal": t.s,
                        "anchored_signal": t.s_anchored,
                        "progress": t.tau,
                        "bucket": t.bucket,
                        "normalized_signal": t.z,
                        "outcome_adv": t.outcome,
                        "progress_adv": t.progress,
                        "final_adv": t.total,
                    })
                })
                .collect();
            json!({
                "reward": r.reward,
                "outcome_advantage": o.a_hat[i],
                "anchor": o.anchors[i] as i64,
                "tokens": tokens,
            })
        })
        .collect();
    json!({
        "prompt_id": id,
        "zero_variance": o.zero_variance,
        "reward_mean": o.reward_mean,
        "reward_std": o.reward_std,
        "entropy_mean": o.entropy_mean,
        "entropy_std": o.entropy_std,
        "responses": responses,
    })
}

/// Regenerates `tests/fixtures/rollouts.jsonl` and the oracle-produced
/// `tests/fixtures/advantages.golden.jsonl`.
#[test]
#[ignore = "writes fixtures; run explicitly to regenerate"]
fn regenerate_fixtures() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut inputs = String::new();
    let mut golden = String::new();
    let hand = hand_listed_group();
    let mut cases = vec![(
        "hand".to_string(),
        to_group("hand", &hand, &[3, 7, 1, 12]),
        hand,
    )];
    for id in 0..7 {
        let (g, plain) = random_group(&mut rng, id);
        cases.push((format!("g{id}"), g, plain));
    }
    for (id, group, plain) in &cases {
        inputs.push_str(&serialize_rollout_group(group));
        inputs.push('\n');
        golden.push_str(&oracle_record(id, plain, group, OracleParams::default()).to_string());
        golden.push('\n');
    }
    std::fs::write(dir.join("rollouts.jsonl"), inputs).unwrap();
    std::fs::write(dir.join("advantages.golden.jsonl"), golden).unwrap();
}
