//! A linear-softmax sequence policy with exact score-function gradients.
//!
//! Logits for the next token are a sum of weight rows selected by one-hot
//! features: a bias row, one row per context slot holding the token seen
//! `j + 1` steps back (padded with the begin token), and one row for the
//! response position (clamped to `max_positions - 1`). The score of a token
//! is therefore `one_hot(token) - softmax(logits)` added into each selected
//! row.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{assemble_loss_from, clipped_term_grad, kl_estimate_grad, LossConfig};
use crate::rollout::{
    ResponseRecord, RolloutError, RolloutGroup, TokenRecord, BEGIN_TOKEN, TERMINATOR_TOKEN,
};

pub const POLICY_SCHEMA: &str = "epgrpo.policy/1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("gradient has {got} entries, policy has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid policy shape: {0}")]
    InvalidShape(String),
    #[error("unsupported checkpoint schema {0:?}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyShape {
    pub vocab_size: usize,
    pub context_order: usize,
    pub max_positions: usize,
}

impl PolicyShape {
    pub fn new(
        vocab_size: usize,
        context_order: usize,
        max_positions: usize,
    ) -> Result<Self, PolicyError> {
        if vocab_size < 3 {
            return Err(PolicyError::InvalidShape(format!(
                "vocab_size {vocab_size} leaves no symbol tokens"
            )));
        }
        if max_positions == 0 {
            return Err(PolicyError::InvalidShape(
                "max_positions must be >= 1".into(),
            ));
        }
        Ok(Self {
            vocab_size,
            context_order,
            max_positions,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let v = self.vocab_size;
        v + self.context_order * v * v + self.max_positions * v
    }

    /// Start offsets of the weight rows active for the next token.
    fn feature_rows(&self, history: &[u32], position: usize) -> Vec<usize> {
        let v = self.vocab_size;
        let mut rows = Vec::with_capacity(self.context_order + 2);
        rows.push(0);
        for j in 0..self.context_order {
            let tok = if j < history.len() {
                history[history.len() - 1 - j]
            } else {
                BEGIN_TOKEN
            } as usize;
            rows.push(v + j * v * v + tok * v);
        }
        let pos = position.min(self.max_positions - 1);
        rows.push(v + self.context_order * v * v + pos * v);
        rows
    }

    fn logits(&self, weights: &[f64], history: &[u32], position: usize) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = vec![0.0; v];
        for row in self.feature_rows(history, position) {
            for (o, w) in out.iter_mut().zip(&weights[row..row + v]) {
                *o += w;
            }
        }
        out
    }
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            context_order: 2,
            max_positions: 8,
        }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Policy weights plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    schema: String,
    shape: PolicyShape,
    weights: Vec<f64>,
    optimizer: OptimizerState,
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(shape: PolicyShape) -> Self {
        let n = shape.num_parameters();
        Self {
            schema: POLICY_SCHEMA.to_string(),
            shape,
            weights: vec![0.0; n],
            optimizer: OptimizerState {
                step: 0,
                first_moment: vec![0.0; n],
                second_moment: vec![0.0; n],
            },
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(shape: PolicyShape, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            *w = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn from_weights(shape: PolicyShape, weights: Vec<f64>) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(shape);
        if weights.len() != p.weights.len() {
            return Err(PolicyError::ShapeMismatch {
                expected: p.weights.len(),
                got: weights.len(),
            });
        }
        p.weights = weights;
        Ok(p)
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Raw next-token logits given the token history (prompt then response
    /// so far) and the response position.
    pub fn logits(&self, history: &[u32], position: usize) -> Vec<f64> {
        self.shape.logits(&self.weights, history, position)
    }

    pub fn log_prob(&self, history: &[u32], position: usize, token: u32) -> f64 {
        log_softmax(&self.logits(history, position))[token as usize]
    }

    /// Adds `coef * d log pi(token) / d weights` into `grad`.
    pub fn add_score(
        &self,
        history: &[u32],
        position: usize,
        token: u32,
        coef: f64,
        grad: &mut [f64],
    ) {
        if coef == 0.0 {
            return;
        }
        let v = self.shape.vocab_size;
        let probs = softmax(&self.logits(history, position));
        for row in self.shape.feature_rows(history, position) {
            let slot = &mut grad[row..row + v];
            for (k, (g, p)) in slot.iter_mut().zip(&probs).enumerate() {
                let indicator = if k == token as usize { 1.0 } else { 0.0 };
                *g += coef * (indicator - p);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy weights are finite")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: PolicyParams = serde_json::from_str(text)?;
        if p.schema != POLICY_SCHEMA {
            return Err(PolicyError::Schema(p.schema));
        }
        let n = p.shape.num_parameters();
        for len in [
            p.weights.len(),
            p.optimizer.first_moment.len(),
            p.optimizer.second_moment.len(),
        ] {
            if len != n {
                return Err(PolicyError::ShapeMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        Ok(p)
    }
}

/// Frozen copy of a policy's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSnapshot {
    shape: PolicyShape,
    weights: Arc<[f64]>,
}

impl ReferenceSnapshot {
    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn log_prob(&self, history: &[u32], position: usize, token: u32) -> f64 {
        log_softmax(&self.shape.logits(&self.weights, history, position))[token as usize]
    }

    pub fn as_params(&self) -> PolicyParams {
        PolicyParams::from_weights(self.shape, self.weights.to_vec())
            .expect("snapshot matches its own shape")
    }
}

pub fn freeze_reference(params: &PolicyParams) -> ReferenceSnapshot {
    ReferenceSnapshot {
        shape: params.shape,
        weights: Arc::from(params.weights.as_slice()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub max_len: usize,
    /// `<= 0` means greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_len: 8,
            temperature: 1.0,
            top_p: 0.95,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            temperature: 0.0,
            top_p: 1.0,
        }
    }
}

/// Log-probabilities of the temperature/top-p adjusted distribution actually
/// sampled from. Excluded tokens get `-inf`. Greedy picks the lowest-index
/// maximum with probability one.
pub fn sampling_log_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let v = logits.len();
    if temperature <= 0.0 {
        let mut best = 0;
        for k in 1..v {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        let mut out = vec![f64::NEG_INFINITY; v];
        out[best] = 0.0;
        return out;
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let logp = log_softmax(&scaled);
    if top_p >= 1.0 {
        return logp;
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    let mut keep = vec![false; v];
    let mut mass = 0.0;
    for &k in &order {
        keep[k] = true;
        mass += logp[k].exp();
        if mass >= top_p {
            break;
        }
    }
    let kept: Vec<f64> = (0..v)
        .map(|k| {
            if keep[k] {
                scaled[k]
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + kept
            .iter()
            .filter(|x| x.is_finite())
            .map(|x| (x - max).exp())
            .sum::<f64>()
            .ln();
    kept.iter()
        .map(|&x| {
            if x.is_finite() {
                x - lse
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn entropy_of_log_distribution(logq: &[f64]) -> f64 {
    logq.iter()
        .filter(|x| x.is_finite())
        .map(|&lq| -lq.exp() * lq)
        .sum::<f64>()
        .max(0.0)
}

/// One sampled response with per-token log-probability and entropy under the
/// distribution it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: Vec<u32>,
    pub logp: Vec<f64>,
    pub entropy: Vec<f64>,
}

fn history_for(prompt: &[u32], response: &[u32], t: usize) -> Vec<u32> {
    let mut h = Vec::with_capacity(prompt.len() + t);
    h.extend_from_slice(prompt);
    h.extend_from_slice(&response[..t]);
    h
}

/// Samples autoregressively until the terminator or `max_len` tokens.
pub fn sample_response(
    params: &PolicyParams,
    prompt: &[u32],
    sampling: &SamplingConfig,
    seed: u64,
) -> SampledResponse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = prompt.to_vec();
    let mut out = SampledResponse {
        tokens: Vec::new(),
        logp: Vec::new(),
        entropy: Vec::new(),
    };
    for position in 0..sampling.max_len.max(1) {
        let logq = sampling_log_distribution(
            &params.logits(&history, position),
            sampling.temperature,
            sampling.top_p,
        );
        let token = if sampling.temperature <= 0.0 {
            logq.iter().position(|&x| x == 0.0).unwrap_or(0)
        } else {
            draw(&logq, rng.gen::<f64>())
        };
        out.tokens.push(token as u32);
        out.logp.push(logq[token]);
        out.entropy.push(entropy_of_log_distribution(&logq));
        history.push(token as u32);
        if token as u32 == TERMINATOR_TOKEN {
            break;
        }
    }
    out
}

fn draw(logq: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &lq) in logq.iter().enumerate() {
        if lq.is_finite() {
            acc += lq.exp();
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Reference log-probabilities of each realised token (raw log-softmax, no
/// temperature or top-p).
pub fn annotate_reference(
    prompt: &[u32],
    response: &[u32],
    reference: &ReferenceSnapshot,
) -> Vec<f64> {
    (0..response.len())
        .map(|t| reference.log_prob(&history_for(prompt, response, t), t, response[t]))
        .collect()
}

/// One prompt's responses, with everything needed to evaluate the policy
/// loss at arbitrary parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    prompt: Vec<u32>,
    responses: Vec<Vec<u32>>,
    /// Recorded sampling log-probs and entropies; input to the advantage
    /// pipeline.
    rollout: RolloutGroup,
    /// Raw log-probs under the behaviour parameters; the old-policy term of
    /// the importance ratio.
    behavior: RolloutGroup,
}

impl PolicyGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        prompt: Vec<u32>,
        samples: Vec<SampledResponse>,
        rewards: &[f64],
        behavior_params: &PolicyParams,
        reference: &ReferenceSnapshot,
    ) -> Result<Self, PolicyError> {
        let prompt_id = prompt_id.into();
        let mut rollout = Vec::with_capacity(samples.len());
        let mut behavior = Vec::with_capacity(samples.len());
        let mut responses = Vec::with_capacity(samples.len());
        for (sample, &reward) in samples.into_iter().zip(rewards) {
            let logp_ref = annotate_reference(&prompt, &sample.tokens, reference);
            let mut rec = Vec::with_capacity(sample.tokens.len());
            let mut beh = Vec::with_capacity(sample.tokens.len());
            for (t, &tok) in sample.tokens.iter().enumerate() {
                let old =
                    behavior_params.log_prob(&history_for(&prompt, &sample.tokens, t), t, tok);
                rec.push(TokenRecord::new(
                    tok,
                    sample.logp[t],
                    logp_ref[t],
                    sample.entropy[t],
                )?);
                beh.push(TokenRecord::new(tok, old, logp_ref[t], sample.entropy[t])?);
            }
            rollout.push(ResponseRecord::new(rec, reward)?);
            behavior.push(ResponseRecord::new(beh, reward)?);
            responses.push(sample.tokens);
        }
        Ok(Self {
            rollout: RolloutGroup::new(prompt_id.clone(), rollout)?,
            behavior: RolloutGroup::new(prompt_id, behavior)?,
            prompt,
            responses,
        })
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn responses(&self) -> &[Vec<u32>] {
        &self.responses
    }

    pub fn rollout(&self) -> &RolloutGroup {
        &self.rollout
    }

    pub fn behavior(&self) -> &RolloutGroup {
        &self.behavior
    }

    /// Raw log-probability of every realised token under `params`.
    pub fn log_probs(&self, params: &PolicyParams) -> Vec<Vec<f64>> {
        self.responses
            .iter()
            .map(|resp| {
                (0..resp.len())
                    .map(|t| params.log_prob(&history_for(&self.prompt, resp, t), t, resp[t]))
                    .collect()
            })
            .collect()
    }

    /// Adds `coef * d log pi(token_{i,t}) / d weights` into `grad`.
    pub fn add_score(
        &self,
        params: &PolicyParams,
        i: usize,
        t: usize,
        coef: f64,
        grad: &mut [f64],
    ) {
        let resp = &self.responses[i];
        params.add_score(&history_for(&self.prompt, resp, t), t, resp[t], coef, grad);
    }

    /// Importance ratios `pi_params / pi_behavior` per token.
    pub fn ratios(&self, params: &PolicyParams) -> Vec<Vec<f64>> {
        self.log_probs(params)
            .iter()
            .zip(self.behavior.responses())
            .map(|(lp, beh)| {
                lp.iter()
                    .zip(beh.tokens())
                    .map(|(x, b)| (x - b.logp_cur()).exp())
                    .collect()
            })
            .collect()
    }
}

/// Surrogate loss of one group at `params`.
pub fn surrogate_loss(
    params: &PolicyParams,
    group: &PolicyGroup,
    advantages: &[Vec<f64>],
    cfg: &LossConfig,
) -> f64 {
    let ratios = group.ratios(params);
    assemble_loss_from(&group.behavior, advantages, &ratios, cfg)
        .expect("advantages laid out per response")
        .loss
}

/// Analytic gradient of [`surrogate_loss`], split into the advantage-driven
/// part and the KL part.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradient {
    pub reward: Vec<f64>,
    pub kl: Vec<f64>,
}

impl GroupGradient {
    pub fn total(&self) -> Vec<f64> {
        self.reward
            .iter()
            .zip(&self.kl)
            .map(|(a, b)| a + b)
            .collect()
    }
}

pub fn accumulate_gradient(
    params: &PolicyParams,
    group: &PolicyGroup,
    advantages: &[Vec<f64>],
    cfg: &LossConfig,
) -> GroupGradient {
    let n = params.num_parameters();
    let mut reward = vec![0.0; n];
    let mut kl = vec![0.0; n];
    let inv_tokens = 1.0 / group.rollout.total_tokens() as f64;
    let logp_now = group.log_probs(params);
    for (i, beh) in group.behavior.responses().iter().enumerate() {
        for (t, tok) in beh.tokens().iter().enumerate() {
            let x = logp_now[i][t];
            let ratio = (x - tok.logp_cur()).exp();
            let a = advantages[i][t];
            // loss = -(1/N) sum [clip(ratio, a) - beta * k3(x, ref)]
            let d_reward = -inv_tokens * clipped_term_grad(ratio, a, cfg.clip_eps());
            let d_kl = inv_tokens * cfg.kl_beta() * kl_estimate_grad(x, tok.logp_ref());
            group.add_score(params, i, t, d_reward, &mut reward);
            group.add_score(params, i, t, d_kl, &mut kl);
        }
    }
    GroupGradient { reward, kl }
}

/// Applies one optimizer step in place.
pub fn apply_update(
    params: &mut PolicyParams,
    gradient: &[f64],
    learning_rate: f64,
    optimizer: &OptimizerConfig,
) -> Result<(), PolicyError> {
    let n = params.weights.len();
    if gradient.len() != n {
        return Err(PolicyError::ShapeMismatch {
            expected: n,
            got: gradient.len(),
        });
    }
    match *optimizer {
        OptimizerConfig::Sgd => {
            for (w, g) in params.weights.iter_mut().zip(gradient) {
                *w -= learning_rate * g;
            }
            params.optimizer.step += 1;
        }
        OptimizerConfig::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            let state = &mut params.optimizer;
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for (k, &g) in gradient.iter().enumerate().take(n) {
                state.first_moment[k] = beta1 * state.first_moment[k] + (1.0 - beta1) * g;
                state.second_moment[k] = beta2 * state.second_moment[k] + (1.0 - beta2) * g * g;
                let m_hat = state.first_moment[k] / bc1;
                let v_hat = state.second_moment[k] / bc2;
                let w = &mut params.weights[k];
                *w -= learning_rate * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
    }
    Ok(())
}
