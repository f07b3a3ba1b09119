#![allow(dead_code)]

pub mod oracle;

use epgrpo::rollout::{
    AdvantageConfig, GroupAdvantages, ResponseRecord, RolloutGroup, TokenRecord,
};
use oracle::{OracleOut, OracleParams, OracleResponse, OracleToken};
use rand::{Rng, SeedableRng};

pub const VOCAB: u32 = 16;

/// Random group with G in [2, 8], lengths in [1, 32], binary rewards.
/// Roughly one group in five has an all-zero entropy response and one in
/// four a zero-variance reward vector.
pub fn random_group<R: Rng>(rng: &mut R, id: usize) -> (RolloutGroup, Vec<OracleResponse>) {
    let g = rng.gen_range(2..=8);
    let zero_var = rng.gen_bool(0.25);
    let shared = f64::from(rng.gen_bool(0.5) as u8);
    let max_h = (VOCAB as f64).ln();
    let mut records = Vec::new();
    let mut plain = Vec::new();
    for _ in 0..g {
        let len = rng.gen_range(1..=32);
        let flat = rng.gen_bool(0.2);
        let mut toks = Vec::new();
        let mut otoks = Vec::new();
        for _ in 0..len {
            let logp_cur = -rng.gen_range(0.0..6.0);
            let logp_ref = if rng.gen_bool(0.1) {
                logp_cur
            } else {
                -rng.gen_range(0.0..6.0)
            };
            let entropy = if flat { 0.0 } else { rng.gen_range(0.0..max_h) };
            toks.push(
                TokenRecord::new(rng.gen_range(0..VOCAB), logp_cur, logp_ref, entropy).unwrap(),
            );
            otoks.push(OracleToken {
                logp_cur,
                logp_ref,
                entropy,
            });
        }
        let reward = if zero_var {
            shared
        } else {
            f64::from(rng.gen_bool(0.4) as u8)
        };
        records.push(ResponseRecord::new(toks, reward).unwrap());
        plain.push(OracleResponse {
            tokens: otoks,
            reward,
        });
    }
    (RolloutGroup::new(format!("g{id}"), records).unwrap(), plain)
}

pub fn oracle_params(cfg: &AdvantageConfig) -> OracleParams {
    OracleParams {
        gamma: cfg.gamma(),
        lambda: cfg.lambda(),
        eta: cfg.eta(),
        buckets: cfg.num_buckets(),
        theta: cfg.reward_threshold(),
        delta: cfg.delta(),
        eps: cfg.eps_stab(),
    }
}

/// Largest componentwise difference between the pipeline and the oracle.
pub fn max_oracle_diff(adv: &GroupAdvantages, want: &OracleOut) -> f64 {
    assert_eq!(adv.zero_variance(), want.zero_variance);
    let mut worst: f64 = 0.0;
    let mut see = |a: f64, b: f64| worst = worst.max((a - b).abs());
    see(adv.reward_mean(), want.reward_mean);
    see(adv.reward_std(), want.reward_std);
    see(adv.entropy_mean(), want.entropy_mean);
    see(adv.entropy_std(), want.entropy_std);
    for (i, resp) in adv.responses().iter().enumerate() {
        see(resp.outcome_advantage, want.a_hat[i]);
        see(f64::from(resp.anchor), want.anchors[i]);
        assert_eq!(resp.tokens.len(), want.tokens[i].len());
        for (t, tok) in resp.tokens.iter().enumerate() {
            let o = &want.tokens[i][t];
            assert_eq!(tok.bucket, o.bucket, "bucket of token ({i}, {t})");
            see(tok.gate_weight, o.gate);
            see(tok.implicit_signal, o.s);
            see(tok.anchored_signal, o.s_anchored);
            see(tok.progress, o.tau);
            see(tok.normalized_signal, o.z);
            see(tok.outcome_adv, o.outcome);
            see(tok.progress_adv, o.progress);
            see(tok.final_adv, o.total);
        }
    }
    worst
}

/// A batch of four groups whose rewards all equal `reward`, sampled from a
/// policy that differs from its reference.
pub fn constant_reward_batch(
    seed: u64,
    reward: f64,
    flags: epgrpo::ShapingFlags,
) -> (epgrpo::policy::PolicyParams, epgrpo::trainer::SampledBatch) {
    use epgrpo::policy::{
        freeze_reference, sample_response, PolicyGroup, PolicyParams, PolicyShape, SamplingConfig,
    };
    let shape = PolicyShape::new(8, 2, 4).unwrap();
    let reference = PolicyParams::random(shape, 0.5, seed);
    let noise = PolicyParams::random(shape, 0.3, seed.wrapping_add(1_000_003));
    let mut current = reference.clone();
    for (w, n) in current.weights_mut().iter_mut().zip(noise.weights()) {
        *w += n;
    }
    let snapshot = freeze_reference(&reference);
    let sampling = SamplingConfig {
        max_len: 5,
        temperature: 1.0,
        top_p: 1.0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut batch = epgrpo::trainer::SampledBatch {
        groups: Vec::new(),
        advantages: Vec::new(),
        format_ok: Vec::new(),
    };
    for b in 0..4 {
        let prompt: Vec<u32> = (0..2).map(|_| rng.gen_range(2..8)).collect();
        let samples: Vec<_> = (0..8)
            .map(|g| sample_response(&current, &prompt, &sampling, rng.gen::<u64>() ^ g))
            .collect();
        let group = PolicyGroup::new(
            format!("b{b}"),
            prompt,
            samples,
            &[reward; 8],
            &current,
            &snapshot,
        )
        .unwrap();
        let adv = epgrpo::compute_group_advantages_with(
            group.rollout(),
            &AdvantageConfig::default(),
            flags,
        )
        .unwrap();
        batch.groups.push(group);
        batch.advantages.push(adv);
        batch.format_ok.push(vec![true; 8]);
    }
    (current, batch)
}
