//! GRPO outcome advantages and the entropy-gated, progress-aligned token
//! advantage pipeline.
//!
//! The pipeline for one group, in order:
//!
//! 1. outcome advantage `A_i = (r_i - mean(r)) / (std(r) + delta)`;
//! 2. entropy gate `W = logistic(gamma * (H - mu_H) / (sigma_H + eps))` with
//!    statistics pooled over every token of the group;
//! 3. gated outcome advantage `W * A_i`;
//! 4. implicit signal `s = lambda * (logp_cur - logp_ref)`;
//! 5. anchor `d_i`: `sign(A_i)` when rewards vary, otherwise the side of the
//!    reward threshold the raw reward falls on;
//! 6. anchored signal `d_i * s`, z-scored within cumulative-entropy progress
//!    buckets pooled across the group;
//! 7. progress advantage `eta * z` and final advantage as the sum.
//!
//! All standard deviations are population standard deviations. Inputs are the
//! log-probabilities and entropies recorded at sampling time; nothing here
//! touches a policy.

use thiserror::Error;

use crate::rollout::{
    AdvantageConfig, GroupAdvantages, ResponseAdvantages, RolloutError, RolloutGroup,
    TokenAdvantage,
};
use crate::stats::{all_equal, logistic, population_stats, sign};

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("distribution sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("distribution has invalid entry {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },
}

/// Predictive entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> Result<f64, AdvantageError> {
    for (index, &p) in dist.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(AdvantageError::InvalidProbability { index, value: p });
        }
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AdvantageError::NotNormalized { sum });
    }
    Ok(dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Group-normalised outcome advantages. A group with identical rewards gets
/// exactly zero for every response.
pub fn grpo_advantage(rewards: &[f64], delta: f64) -> Vec<f64> {
    let (mean, std) = population_stats(rewards);
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + delta)).collect()
}

/// Mean and population std of entropy over all tokens of all responses.
pub fn group_entropy_stats(group: &RolloutGroup) -> (f64, f64) {
    let pooled: Vec<f64> = group
        .responses()
        .iter()
        .flat_map(|r| r.tokens().iter().map(|t| t.entropy()))
        .collect();
    population_stats(&pooled)
}

pub fn entropy_gate(entropy: f64, mu_h: f64, sigma_h: f64, gamma: f64, eps_stab: f64) -> f64 {
    logistic(gamma * (entropy - mu_h) / (sigma_h + eps_stab))
}

pub fn gated_outcome_advantage(gate_weights: &[f64], outcome_advantage: f64) -> Vec<f64> {
    gate_weights.iter().map(|w| w * outcome_advantage).collect()
}

pub fn implicit_signal(logp_cur: f64, logp_ref: f64, lambda: f64) -> f64 {
    lambda * (logp_cur - logp_ref)
}

/// Polarity anchors for the implicit signal.
///
/// When rewards vary the anchor is `sign(A_i)`; a response sitting exactly on
/// the group mean falls back to `sign(r_i - threshold)`. When rewards are all
/// equal the anchor is `sign(r_i - threshold)`.
pub fn anchor_sign(rewards: &[f64], outcome_advantages: &[f64], reward_threshold: f64) -> Vec<i8> {
    anchor_sign_with(rewards, outcome_advantages, reward_threshold, true)
}

/// As [`anchor_sign`]; with `zero_variance_degradation` off, a collapsed
/// group keeps `sign(A_i) = 0` for every response.
pub fn anchor_sign_with(
    rewards: &[f64],
    outcome_advantages: &[f64],
    reward_threshold: f64,
    zero_variance_degradation: bool,
) -> Vec<i8> {
    let varied = !all_equal(rewards);
    rewards
        .iter()
        .zip(outcome_advantages)
        .map(|(&r, &a)| {
            if varied {
                match sign(a) {
                    0 => sign(r - reward_threshold),
                    s => s,
                }
            } else if zero_variance_degradation {
                sign(r - reward_threshold)
            } else {
                0
            }
        })
        .collect()
}

/// Cumulative-entropy progress `tau_t = S_t / S_T`.
///
/// A sequence with zero total entropy falls back to positional progress
/// `t / T` (1-based `t`).
pub fn cumulative_progress(entropies: &[f64]) -> Vec<f64> {
    let mut cumulative = Vec::with_capacity(entropies.len());
    let mut acc = 0.0;
    for &h in entropies {
        acc += h;
        cumulative.push(acc);
    }
    let total = acc;
    if total > 0.0 {
        cumulative.into_iter().map(|s| s / total).collect()
    } else {
        let n = entropies.len() as f64;
        (1..=entropies.len()).map(|t| t as f64 / n).collect()
    }
}

/// Equal-width bucket of `[0, 1]`; `tau = 1` lands in the last bucket.
pub fn bucket_index(tau: f64, num_buckets: usize) -> usize {
    let k = (tau * num_buckets as f64).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(num_buckets - 1)
    }
}

/// Z-scores `values` within the bucket given by `buckets[j]`.
///
/// Buckets with fewer than two members, or whose members are all equal,
/// produce 0 for each member.
pub fn bucket_normalize(
    values: &[f64],
    buckets: &[usize],
    num_buckets: usize,
    eps_stab: f64,
) -> Vec<f64> {
    assert_eq!(values.len(), buckets.len(), "one bucket label per value");
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_buckets];
    for (j, &k) in buckets.iter().enumerate() {
        members[k].push(j);
    }
    let mut out = vec![0.0; values.len()];
    for idx in members.iter().filter(|m| m.len() >= 2) {
        let bucket_values: Vec<f64> = idx.iter().map(|&j| values[j]).collect();
        let (mean, std) = population_stats(&bucket_values);
        if std == 0.0 {
            continue;
        }
        for &j in idx {
            out[j] = (values[j] - mean) / (std + eps_stab);
        }
    }
    out
}

/// Per-bucket `(mean, std, count)` of the values, using the same conventions
/// as [`bucket_normalize`].
pub fn bucket_statistics(
    values: &[f64],
    buckets: &[usize],
    num_buckets: usize,
) -> Vec<(f64, f64, usize)> {
    let mut grouped: Vec<Vec<f64>> = vec![Vec::new(); num_buckets];
    for (&v, &k) in values.iter().zip(buckets) {
        grouped[k].push(v);
    }
    grouped
        .iter()
        .map(|g| {
            let (m, s) = population_stats(g);
            (m, s, g.len())
        })
        .collect()
}

/// Which shaping components are active.
///
/// All three on is EP-GRPO; all three off reduces exactly to GRPO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ShapingFlags {
    /// Scale the outcome advantage by the entropy gate.
    pub entropy_gate: bool,
    /// Add the bucket-normalised implicit progress advantage.
    pub progress_signal: bool,
    /// Anchor the implicit signal on the raw reward in collapsed groups.
    pub zero_variance_degradation: bool,
}

impl ShapingFlags {
    pub const GRPO: Self = Self {
        entropy_gate: false,
        progress_signal: false,
        zero_variance_degradation: false,
    };
    pub const EPGRPO: Self = Self {
        entropy_gate: true,
        progress_signal: true,
        zero_variance_degradation: true,
    };
}

impl Default for ShapingFlags {
    fn default() -> Self {
        Self::EPGRPO
    }
}

/// Full EP-GRPO advantages for one group.
pub fn compute_group_advantages(
    group: &RolloutGroup,
    cfg: &AdvantageConfig,
) -> Result<GroupAdvantages, RolloutError> {
    compute_group_advantages_with(group, cfg, ShapingFlags::EPGRPO)
}

pub fn compute_group_advantages_with(
    group: &RolloutGroup,
    cfg: &AdvantageConfig,
    flags: ShapingFlags,
) -> Result<GroupAdvantages, RolloutError> {
    let rewards = group.rewards();
    let (reward_mean, reward_std) = population_stats(&rewards);
    let outcome = grpo_advantage(&rewards, cfg.delta());

    let (mu_h, sigma_h) = group_entropy_stats(group);

    let anchors = anchor_sign_with(
        &rewards,
        &outcome,
        cfg.reward_threshold(),
        flags.zero_variance_degradation,
    );

    // Pooled per-token quantities, laid out response-major.
    let mut gates = Vec::new();
    let mut signals = Vec::new();
    let mut anchored = Vec::new();
    let mut progress = Vec::new();
    let mut buckets = Vec::new();
    for (resp, &d) in group.responses().iter().zip(&anchors) {
        let entropies: Vec<f64> = resp.tokens().iter().map(|t| t.entropy()).collect();
        for (tok, tau) in resp.tokens().iter().zip(cumulative_progress(&entropies)) {
            gates.push(entropy_gate(
                tok.entropy(),
                mu_h,
                sigma_h,
                cfg.gamma(),
                cfg.eps_stab(),
            ));
            let s = implicit_signal(tok.logp_cur(), tok.logp_ref(), cfg.lambda());
            signals.push(s);
            anchored.push(f64::from(d) * s);
            progress.push(tau);
            buckets.push(bucket_index(tau, cfg.num_buckets()));
        }
    }
    let normalized = bucket_normalize(&anchored, &buckets, cfg.num_buckets(), cfg.eps_stab());

    let mut responses = Vec::with_capacity(group.group_size());
    let mut j = 0;
    for ((resp, &a_hat), &d) in group.responses().iter().zip(&outcome).zip(&anchors) {
        let mut tokens = Vec::with_capacity(resp.len());
        for tok in resp.tokens() {
            let outcome_adv = if flags.entropy_gate {
                gates[j] * a_hat
            } else {
                a_hat
            };
            let progress_adv = if flags.progress_signal {
                cfg.eta() * normalized[j]
            } else {
                0.0
            };
            tokens.push(TokenAdvantage {
                id: tok.token_id(),
                gate_weight: gates[j],
                implicit_signal: signals[j],
                anchored_signal: anchored[j],
                progress: progress[j],
                bucket: buckets[j],
                normalized_signal: normalized[j],
                outcome_adv,
                progress_adv,
                final_adv: outcome_adv + progress_adv,
            });
            j += 1;
        }
        responses.push(ResponseAdvantages {
            reward: resp.reward(),
            outcome_advantage: a_hat,
            anchor: d,
            tokens,
        });
    }

    GroupAdvantages::new(
        group.prompt_id(),
        reward_mean,
        reward_std,
        mu_h,
        sigma_h,
        responses,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{ResponseRecord, TokenRecord};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_examples() {
        assert!(close(token_entropy(&[0.25; 4]).unwrap(), 4f64.ln(), 1e-15));
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(
            token_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        assert!(matches!(
            token_entropy(&[0.5, 0.4]),
            Err(AdvantageError::NotNormalized { .. })
        ));
        assert!(token_entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn grpo_advantage_examples() {
        // population std sqrt(3)/4; values evaluated independently
        let a = grpo_advantage(&[1.0, 0.0, 0.0, 0.0], 1e-4);
        assert!(close(a[0], 1.731650899923592, 1e-12));
        for v in &a[1..] {
            assert!(close(*v, -0.5772169666411974, 1e-12));
        }
        assert_eq!(grpo_advantage(&[1.0; 4], 1e-4), vec![0.0; 4]);
        assert_eq!(grpo_advantage(&[1.0, 0.0], 0.0), vec![1.0, -1.0]);
    }

    #[test]
    fn gate_examples() {
        assert_eq!(entropy_gate(1.3, 1.3, 0.4, 5.0, 1e-8), 0.5);
        let up = entropy_gate(1.0 + 0.4, 1.0, 0.4, 5.0, 1e-12);
        let down = entropy_gate(1.0 - 0.4, 1.0, 0.4, 5.0, 1e-12);
        assert!(close(up, 0.9933071490757153, 1e-9));
        assert!(close(down, 0.0066928509242848554, 1e-9));
        assert!(close(up + down, 1.0, 1e-12));
    }

    #[test]
    fn gated_outcome_examples() {
        assert_eq!(gated_outcome_advantage(&[0.3, 0.9], 0.0), vec![0.0, 0.0]);
        assert!(close(
            gated_outcome_advantage(&[0.5], 1.73167)[0],
            0.865835,
            1e-12
        ));
        assert!(close(
            gated_outcome_advantage(&[0.993307], -0.57722)[0],
            -0.57335666654,
            1e-10
        ));
    }

    #[test]
    fn implicit_signal_examples() {
        assert_eq!(implicit_signal(-0.7, -0.7, 0.1), 0.0);
        assert!(close(implicit_signal(-1.0, -1.5, 0.1), 0.05, 1e-15));
        assert!(close(implicit_signal(-2.0, -1.0, 0.1), -0.1, 1e-15));
    }

    #[test]
    fn anchor_examples() {
        let r = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(
            anchor_sign(&r, &grpo_advantage(&r, 1e-4), 0.5),
            vec![1, -1, -1, -1]
        );
        assert_eq!(anchor_sign(&[0.0; 3], &[0.0; 3], 0.5), vec![-1; 3]);
        assert_eq!(anchor_sign(&[1.0; 3], &[0.0; 3], 0.5), vec![1; 3]);
        assert_eq!(
            anchor_sign_with(&[1.0; 3], &[0.0; 3], 0.5, false),
            vec![0; 3]
        );
        // r_i on the group mean with spread elsewhere
        let r = [0.0, 0.5, 1.0];
        let a = grpo_advantage(&r, 1e-4);
        assert_eq!(a[1], 0.0);
        assert_eq!(anchor_sign(&r, &a, 0.25), vec![-1, 1, 1]);
    }

    #[test]
    fn progress_examples() {
        assert_eq!(cumulative_progress(&[1.0; 4]), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cumulative_progress(&[2.0, 1.0, 1.0]), vec![0.5, 0.75, 1.0]);
        assert_eq!(cumulative_progress(&[0.0, 0.0]), vec![0.5, 1.0]);
        assert_eq!(cumulative_progress(&[0.0, 3.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_index(1.0, 10), 9);
        assert_eq!(bucket_index(0.25, 10), 2);
        assert_eq!(bucket_index(0.0, 10), 0);
        assert_eq!(bucket_index(0.999, 1), 0);
    }

    #[test]
    fn bucket_normalize_examples() {
        let out = bucket_normalize(&[1.0, 3.0], &[4, 4], 10, 1e-15);
        assert!(close(out[0], -1.0, 1e-12) && close(out[1], 1.0, 1e-12));
        assert_eq!(bucket_normalize(&[0.7], &[0], 10, 1e-8), vec![0.0]);
        assert_eq!(bucket_normalize(&[0.3; 3], &[2; 3], 10, 1e-8), vec![0.0; 3]);
        // buckets never mix
        let out = bucket_normalize(&[1.0, 5.0, 3.0, 5.0], &[0, 1, 0, 1], 2, 1e-15);
        assert!(close(out[0], -1.0, 1e-12) && close(out[2], 1.0, 1e-12));
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
    }

    /// (reward, [(logp_cur, logp_ref, entropy)]) per response.
    type Rows<'a> = [(f64, &'a [(f64, f64, f64)])];

    fn group(rows: &Rows) -> RolloutGroup {
        let responses = rows
            .iter()
            .map(|(reward, toks)| {
                let tokens = toks
                    .iter()
                    .enumerate()
                    .map(|(k, &(lc, lr, h))| TokenRecord::new(2 + k as u32, lc, lr, h).unwrap())
                    .collect();
                ResponseRecord::new(tokens, *reward).unwrap()
            })
            .collect();
        RolloutGroup::new("g", responses).unwrap()
    }

    #[test]
    fn entropy_stats_examples() {
        let g = group(&[(1.0, &[(-0.1, -0.1, 0.4)]), (0.0, &[(-0.1, -0.1, 0.4)])]);
        assert_eq!(group_entropy_stats(&g), (0.4, 0.0));
        let g = group(&[(1.0, &[(-0.1, -0.1, 0.0)]), (0.0, &[(-0.1, -0.1, 2.0)])]);
        assert_eq!(group_entropy_stats(&g), (1.0, 1.0));
        let g = group(&[(1.0, &[(-0.1, -0.1, 0.7)]), (1.0, &[(-0.2, -0.1, 0.7)])]);
        assert_eq!(group_entropy_stats(&g), (0.7, 0.0));
    }

    #[test]
    fn zero_variance_group_keeps_progress_signal() {
        let g = group(&[
            (
                0.0,
                &[(-0.2, -0.9, 1.0), (-1.0, -0.5, 1.0), (-0.3, -0.3, 0.5)],
            ),
            (
                0.0,
                &[(-0.6, -0.4, 0.8), (-2.0, -1.0, 1.1), (-0.1, -0.4, 0.2)],
            ),
        ]);
        let adv = compute_group_advantages(&g, &AdvantageConfig::default()).unwrap();
        assert!(adv.zero_variance());
        assert!(adv.tokens().all(|(_, _, t)| t.outcome_adv == 0.0));
        assert!(adv.tokens().any(|(_, _, t)| t.progress_adv != 0.0));
        assert!(adv.responses().iter().all(|r| r.anchor == -1));

        let grpo =
            compute_group_advantages_with(&g, &AdvantageConfig::default(), ShapingFlags::GRPO)
                .unwrap();
        assert!(grpo.tokens().all(|(_, _, t)| t.final_adv == 0.0));
    }

    #[test]
    fn eta_zero_reduces_to_gated_outcome() {
        let g = group(&[
            (1.0, &[(-0.2, -0.9, 1.0), (-1.0, -0.5, 0.1)]),
            (0.0, &[(-0.6, -0.4, 0.8), (-2.0, -1.0, 1.1)]),
            (0.0, &[(-0.6, -0.4, 1.8)]),
        ]);
        let cfg = AdvantageConfig::default().with_eta(0.0).unwrap();
        let adv = compute_group_advantages(&g, &cfg).unwrap();
        for resp in adv.responses() {
            for t in &resp.tokens {
                assert_eq!(t.final_adv, t.gate_weight * resp.outcome_advantage);
                assert_eq!(sign(t.final_adv), sign(resp.outcome_advantage));
            }
        }
    }

    #[test]
    fn entropy_gate_flag_alone_scales_grpo() {
        let g = group(&[
            (1.0, &[(-0.2, -0.9, 1.0), (-1.0, -0.5, 0.1)]),
            (0.0, &[(-0.6, -0.4, 0.8), (-2.0, -1.0, 1.1)]),
        ]);
        let cfg = AdvantageConfig::default();
        let flags = ShapingFlags {
            entropy_gate: true,
            ..ShapingFlags::GRPO
        };
        let eg = compute_group_advantages_with(&g, &cfg, flags).unwrap();
        let base = compute_group_advantages_with(&g, &cfg, ShapingFlags::GRPO).unwrap();
        for ((_, _, a), (_, _, b)) in eg.tokens().zip(base.tokens()) {
            assert_eq!(a.final_adv, a.gate_weight * b.final_adv);
        }
    }
}
