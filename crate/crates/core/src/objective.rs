//! Clipped surrogate loss, k3 KL estimate, and the gradient-equivalence check
//! for the implicit progress regulariser.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{bucket_statistics, compute_group_advantages};
use crate::policy::{PolicyGroup, PolicyParams};
use crate::rollout::{AdvantageConfig, GroupAdvantages, RolloutError, RolloutGroup};
use crate::stats::l2_norm;

/// Log-ratios are clamped to this magnitude before exponentiation.
pub const KL_LOG_RATIO_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gradient-equivalence check requires reward variance; group {0} is zero-variance")]
    ZeroVariance(String),
    #[error(
        "every progress bucket of group {0} is degenerate; the regulariser is identically zero"
    )]
    DegenerateGroup(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossConfigWire", into = "LossConfigWire")]
pub struct LossConfig {
    clip_eps: f64,
    kl_beta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossConfigWire {
    clip_eps: f64,
    kl_beta: f64,
}

impl Default for LossConfigWire {
    fn default() -> Self {
        let c = LossConfig::default();
        Self {
            clip_eps: c.clip_eps,
            kl_beta: c.kl_beta,
        }
    }
}

impl TryFrom<LossConfigWire> for LossConfig {
    type Error = ObjectiveError;
    fn try_from(w: LossConfigWire) -> Result<Self, ObjectiveError> {
        LossConfig::new(w.clip_eps, w.kl_beta)
    }
}

impl From<LossConfig> for LossConfigWire {
    fn from(c: LossConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            kl_beta: c.kl_beta,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.001,
        }
    }
}

impl LossConfig {
    pub fn new(clip_eps: f64, kl_beta: f64) -> Result<Self, ObjectiveError> {
        if !(clip_eps.is_finite() && clip_eps > 0.0) {
            return Err(ObjectiveError::Config(format!(
                "clip_eps must be > 0, got {clip_eps}"
            )));
        }
        if !(kl_beta.is_finite() && kl_beta >= 0.0) {
            return Err(ObjectiveError::Config(format!(
                "kl_beta must be >= 0, got {kl_beta}"
            )));
        }
        Ok(Self { clip_eps, kl_beta })
    }

    pub fn clip_eps(&self) -> f64 {
        self.clip_eps
    }

    pub fn kl_beta(&self) -> f64 {
        self.kl_beta
    }
}

fn clamped_log_ratio(logp_cur: f64, logp_ref: f64) -> f64 {
    (logp_ref - logp_cur).clamp(-KL_LOG_RATIO_CLAMP, KL_LOG_RATIO_CLAMP)
}

/// k3 estimator `rho - ln(rho) - 1` with `rho = pi_ref / pi`.
pub fn kl_estimate(logp_cur: f64, logp_ref: f64) -> f64 {
    let d = clamped_log_ratio(logp_cur, logp_ref);
    // expm1 keeps the estimate accurate (and non-negative) near d = 0
    d.exp_m1() - d
}

/// Derivative of [`kl_estimate`] with respect to `logp_cur`.
pub fn kl_estimate_grad(logp_cur: f64, logp_ref: f64) -> f64 {
    let raw = logp_ref - logp_cur;
    if raw.abs() > KL_LOG_RATIO_CLAMP {
        0.0
    } else {
        1.0 - raw.exp()
    }
}

pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    unclipped.min(clipped)
}

/// Derivative of [`clipped_term`] with respect to the log-ratio `ln(ratio)`.
/// Zero when the clipped branch is selected.
pub fn clipped_term_grad(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// `clipped_term - beta * kl` per token.
    pub terms: Vec<Vec<f64>>,
    pub token_count: usize,
}

/// Group loss, normalised by the total token count of the group.
///
/// `logp_cur` in `group` is the behaviour log-probability; the current
/// log-probability is recovered as `logp_cur + ln(ratio)` for the KL term.
pub fn assemble_loss(
    group: &RolloutGroup,
    advantages: &GroupAdvantages,
    ratios: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<LossBreakdown, ObjectiveError> {
    let finals = advantages.final_advantages();
    assemble_loss_from(group, &finals, ratios, cfg)
}

/// As [`assemble_loss`] with per-token advantages given directly.
pub fn assemble_loss_from(
    group: &RolloutGroup,
    advantages: &[Vec<f64>],
    ratios: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<LossBreakdown, ObjectiveError> {
    check_layout(group, advantages, "advantages")?;
    check_layout(group, ratios, "ratios")?;
    let mut terms = Vec::with_capacity(group.group_size());
    let mut total = 0.0;
    for ((resp, adv), rho) in group.responses().iter().zip(advantages).zip(ratios) {
        let mut row = Vec::with_capacity(resp.len());
        for ((tok, &a), &r) in resp.tokens().iter().zip(adv).zip(rho) {
            let logp_now = tok.logp_cur() + r.ln();
            let term = clipped_term(r, a, cfg.clip_eps)
                - cfg.kl_beta * kl_estimate(logp_now, tok.logp_ref());
            total += term;
            row.push(term);
        }
        terms.push(row);
    }
    let token_count = group.total_tokens();
    Ok(LossBreakdown {
        loss: -total / token_count as f64,
        terms,
        token_count,
    })
}

fn check_layout(
    group: &RolloutGroup,
    values: &[Vec<f64>],
    what: &str,
) -> Result<(), ObjectiveError> {
    let ok = values.len() == group.group_size()
        && group
            .responses()
            .iter()
            .zip(values)
            .all(|(r, v)| r.len() == v.len());
    if ok {
        Ok(())
    } else {
        Err(ObjectiveError::Shape(format!(
            "{what} do not match the group's response lengths"
        )))
    }
}

/// `(beta / 2) * mean[Lambda * log_ratio^2]` over all tokens.
pub fn regularizer_f_from(log_ratios: &[Vec<f64>], lambda_weights: &[Vec<f64>], beta: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (lr_row, lam_row) in log_ratios.iter().zip(lambda_weights) {
        for (lr, lam) in lr_row.iter().zip(lam_row) {
            acc += lam * lr * lr;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    0.5 * beta * acc / n as f64
}

/// The implicit regulariser evaluated on a group's recorded log-ratios
/// `logp_cur - logp_ref`.
pub fn regularizer_f(group: &RolloutGroup, lambda_weights: &[Vec<f64>], beta: f64) -> f64 {
    let log_ratios: Vec<Vec<f64>> = group
        .responses()
        .iter()
        .map(|r| {
            r.tokens()
                .iter()
                .map(|t| t.logp_cur() - t.logp_ref())
                .collect()
        })
        .collect();
    regularizer_f_from(&log_ratios, lambda_weights, beta)
}

/// Result of comparing the analytic progress gradient with finite
/// differences of the regulariser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub analytic_grad_norm: f64,
    pub finite_diff_grad_norm: f64,
    pub max_relative_error: f64,
    /// Components with magnitude above the comparison floor.
    pub compared_components: usize,
    pub num_parameters: usize,
    pub fd_step: f64,
    /// Per-token `Lambda = eta * d_i * lambda / (sigma_k + eps)`, zero in
    /// degenerate buckets.
    pub lambda_weights: Vec<Vec<f64>>,
    /// Norm of the full progress-advantage policy gradient, including the
    /// bucket-mean offset.
    pub progress_grad_norm: f64,
    /// Norm of the bucket-mean offset part alone. It is a per-token constant
    /// times the score, so it vanishes in expectation but not per sample.
    pub baseline_grad_norm: f64,
    /// `max |Lambda * (logp_cur - logp_ref) - offset - progress_adv|` over
    /// tokens; ties the weights back to the pipeline output.
    pub decomposition_residual: f64,
    /// The entropy gate does not enter `Lambda`: the progress term carries no
    /// `W` factor.
    pub gate_in_lambda: bool,
}

/// Magnitude below which gradient components are not compared.
pub const COMPARISON_FLOOR: f64 = 1e-8;

/// Frozen regulariser weights and the pieces needed to check them.
struct FrozenWeights {
    lambda: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    progress: Vec<Vec<f64>>,
    residual: f64,
}

fn freeze_weights(
    group: &RolloutGroup,
    adv: &GroupAdvantages,
    cfg: &AdvantageConfig,
) -> FrozenWeights {
    let anchored: Vec<f64> = adv.tokens().map(|(_, _, t)| t.anchored_signal).collect();
    let buckets: Vec<usize> = adv.tokens().map(|(_, _, t)| t.bucket).collect();
    let stats = bucket_statistics(&anchored, &buckets, cfg.num_buckets());

    let mut lambda = Vec::new();
    let mut offsets = Vec::new();
    let mut progress = Vec::new();
    let mut residual: f64 = 0.0;
    for (resp_adv, resp) in adv.responses().iter().zip(group.responses()) {
        let mut lam_row = Vec::new();
        let mut off_row = Vec::new();
        let mut prog_row = Vec::new();
        for (t, tok) in resp_adv.tokens.iter().zip(resp.tokens()) {
            let (mean, std, count) = stats[t.bucket];
            let live = count >= 2 && std > 0.0;
            let (lam, off) = if live {
                let scale = cfg.eta() / (std + cfg.eps_stab());
                (
                    scale * f64::from(resp_adv.anchor) * cfg.lambda(),
                    scale * mean,
                )
            } else {
                (0.0, 0.0)
            };
            let rebuilt = lam * (tok.logp_cur() - tok.logp_ref()) - off;
            residual = residual.max((rebuilt - t.progress_adv).abs());
            lam_row.push(lam);
            off_row.push(off);
            prog_row.push(t.progress_adv);
        }
        lambda.push(lam_row);
        offsets.push(off_row);
        progress.push(prog_row);
    }
    FrozenWeights {
        lambda,
        offsets,
        progress,
        residual,
    }
}

/// Checks that the progress-advantage policy gradient equals the gradient of
/// the entropy-weighted squared log-ratio regulariser.
///
/// `group` is a group sampled from some behaviour policy with its rollout
/// record (rewards, recorded log-probs). The regulariser weights and bucket
/// statistics are frozen from that record; gradients are evaluated at
/// `params`, with the log-ratio measured against `group.logp_ref`.
pub fn verify_theorem1(
    params: &PolicyParams,
    group: &PolicyGroup,
    cfg: &AdvantageConfig,
    fd_step: f64,
) -> Result<TheoremCheckReport, ObjectiveError> {
    let record = group.rollout();
    let adv = compute_group_advantages(record, cfg)?;
    if adv.zero_variance() {
        return Err(ObjectiveError::ZeroVariance(record.prompt_id().to_string()));
    }
    let frozen = freeze_weights(record, &adv, cfg);
    if frozen.lambda.iter().flatten().all(|&l| l == 0.0) {
        return Err(ObjectiveError::DegenerateGroup(
            record.prompt_id().to_string(),
        ));
    }

    let logp_ref: Vec<Vec<f64>> = record
        .responses()
        .iter()
        .map(|r| r.tokens().iter().map(|t| t.logp_ref()).collect())
        .collect();
    let n_tokens = record.total_tokens() as f64;

    // d/dtheta of (1/2) mean[Lambda (x - r)^2] is mean[Lambda (x - r) dx].
    let logp_now = group.log_probs(params);
    let mut analytic = vec![0.0; params.num_parameters()];
    let mut progress_grad = vec![0.0; params.num_parameters()];
    let mut baseline_grad = vec![0.0; params.num_parameters()];
    for (i, resp) in group.responses().iter().enumerate() {
        for t in 0..resp.len() {
            let lam = frozen.lambda[i][t];
            let coef = lam * (logp_now[i][t] - logp_ref[i][t]) / n_tokens;
            group.add_score(params, i, t, coef, &mut analytic);
            group.add_score(
                params,
                i,
                t,
                frozen.progress[i][t] / n_tokens,
                &mut progress_grad,
            );
            group.add_score(
                params,
                i,
                t,
                -frozen.offsets[i][t] / n_tokens,
                &mut baseline_grad,
            );
        }
    }

    let f_at = |p: &PolicyParams| {
        let lp = group.log_probs(p);
        let ratios: Vec<Vec<f64>> = lp
            .iter()
            .zip(&logp_ref)
            .map(|(a, b)| a.iter().zip(b).map(|(x, r)| x - r).collect())
            .collect();
        regularizer_f_from(&ratios, &frozen.lambda, 1.0)
    };
    let mut fd = vec![0.0; params.num_parameters()];
    let mut probe = params.clone();
    for (k, slot) in fd.iter_mut().enumerate() {
        let orig = probe.weights()[k];
        probe.weights_mut()[k] = orig + fd_step;
        let plus = f_at(&probe);
        probe.weights_mut()[k] = orig - fd_step;
        let minus = f_at(&probe);
        probe.weights_mut()[k] = orig;
        *slot = (plus - minus) / (2.0 * fd_step);
    }

    let (max_relative_error, compared_components) =
        max_relative_error(&analytic, &fd, COMPARISON_FLOOR);
    Ok(TheoremCheckReport {
        analytic_grad_norm: l2_norm(&analytic),
        finite_diff_grad_norm: l2_norm(&fd),
        max_relative_error,
        compared_components,
        num_parameters: params.num_parameters(),
        fd_step,
        lambda_weights: frozen.lambda,
        progress_grad_norm: l2_norm(&progress_grad),
        baseline_grad_norm: l2_norm(&baseline_grad),
        decomposition_residual: frozen.residual,
        gate_in_lambda: false,
    })
}

/// Largest `|a - b| / max(|a|, |b|)` over components where either side
/// exceeds `floor`, and how many components were compared.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (a, b) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(b.abs());
        if scale > floor {
            worst = worst.max((a - b).abs() / scale);
            count += 1;
        }
    }
    (worst, count)
}
