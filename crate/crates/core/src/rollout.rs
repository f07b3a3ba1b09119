//! Rollout groups, shaping configuration and advantage records.
//!
//! Everything here is immutable once constructed: constructors validate the
//! type invariants and the JSONL readers go through the same constructors, so
//! a value that exists is a valid value.
//!
//! Log-probabilities and entropies are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved begin/pad token.
pub const BEGIN_TOKEN: u32 = 0;
/// Reserved terminator token.
pub const TERMINATOR_TOKEN: u32 = 1;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("group has {0} responses, need at least 2")]
    GroupTooSmall(usize),
    #[error("response {response} has no tokens")]
    EmptyResponse { response: usize },
    #[error("{field} = {value} violates {constraint}")]
    Invariant {
        field: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid advantage record: {0}")]
    Advantage(String),
}

impl RolloutError {
    fn invariant(field: &'static str, value: f64, constraint: &'static str) -> Self {
        RolloutError::Invariant {
            field,
            value,
            constraint,
        }
    }
}

pub type Result<T> = std::result::Result<T, RolloutError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TokenWire {
    id: u32,
    logp_cur: f64,
    logp_ref: f64,
    entropy: f64,
}

/// One sampled token with its behaviour/reference log-probabilities and the
/// entropy of the distribution it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    token_id: u32,
    logp_cur: f64,
    logp_ref: f64,
    entropy: f64,
}

impl TokenRecord {
    pub fn new(token_id: u32, logp_cur: f64, logp_ref: f64, entropy: f64) -> Result<Self> {
        check_logp("logp_cur", logp_cur)?;
        check_logp("logp_ref", logp_ref)?;
        if !entropy.is_finite() || entropy < 0.0 {
            return Err(RolloutError::invariant(
                "entropy",
                entropy,
                "finite and >= 0",
            ));
        }
        Ok(Self {
            token_id,
            logp_cur,
            logp_ref,
            entropy,
        })
    }

    pub fn token_id(&self) -> u32 {
        self.token_id
    }

    pub fn logp_cur(&self) -> f64 {
        self.logp_cur
    }

    pub fn logp_ref(&self) -> f64 {
        self.logp_ref
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    fn to_wire(self) -> TokenWire {
        TokenWire {
            id: self.token_id,
            logp_cur: self.logp_cur,
            logp_ref: self.logp_ref,
            entropy: self.entropy,
        }
    }
}

fn check_logp(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value <= 0.0 {
        Ok(())
    } else {
        Err(RolloutError::invariant(field, value, "finite and <= 0"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResponseWire {
    reward: f64,
    tokens: Vec<TokenWire>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    tokens: Vec<TokenRecord>,
    reward: f64,
}

impl ResponseRecord {
    pub fn new(tokens: Vec<TokenRecord>, reward: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(RolloutError::EmptyResponse { response: 0 });
        }
        if !reward.is_finite() {
            return Err(RolloutError::invariant("reward", reward, "finite"));
        }
        Ok(Self { tokens, reward })
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupWire {
    prompt_id: String,
    responses: Vec<ResponseWire>,
}

/// The G responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    prompt_id: String,
    responses: Vec<ResponseRecord>,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, responses: Vec<ResponseRecord>) -> Result<Self> {
        if responses.len() < 2 {
            return Err(RolloutError::GroupTooSmall(responses.len()));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            responses,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.responses.iter().map(|r| r.len()).sum()
    }

    /// Checks the vocabulary-dependent invariants: token ids in range and
    /// entropy at most `ln(vocab_size)`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        let max_entropy = (vocab_size as f64).ln();
        for tok in self.responses.iter().flat_map(|r| r.tokens.iter()) {
            if tok.token_id as usize >= vocab_size {
                return Err(RolloutError::invariant(
                    "id",
                    tok.token_id as f64,
                    "id < vocab size",
                ));
            }
            if tok.entropy > max_entropy + 1e-12 {
                return Err(RolloutError::invariant(
                    "entropy",
                    tok.entropy,
                    "entropy <= ln(vocab size)",
                ));
            }
        }
        Ok(())
    }

    fn from_wire(wire: GroupWire) -> Result<Self> {
        let mut responses = Vec::with_capacity(wire.responses.len());
        for (i, resp) in wire.responses.into_iter().enumerate() {
            let tokens = resp
                .tokens
                .into_iter()
                .map(|t| TokenRecord::new(t.id, t.logp_cur, t.logp_ref, t.entropy))
                .collect::<Result<Vec<_>>>()?;
            let record = ResponseRecord::new(tokens, resp.reward).map_err(|e| match e {
                RolloutError::EmptyResponse { .. } => RolloutError::EmptyResponse { response: i },
                other => other,
            })?;
            responses.push(record);
        }
        RolloutGroup::new(wire.prompt_id, responses)
    }

    fn to_wire(&self) -> GroupWire {
        GroupWire {
            prompt_id: self.prompt_id.clone(),
            responses: self
                .responses
                .iter()
                .map(|r| ResponseWire {
                    reward: r.reward,
                    tokens: r.tokens.iter().map(|t| t.to_wire()).collect(),
                })
                .collect(),
        }
    }
}

/// Parses one JSONL rollout record and validates every invariant.
pub fn parse_rollout_group(line: &str) -> Result<RolloutGroup> {
    let wire: GroupWire = serde_json::from_str(line)?;
    RolloutGroup::from_wire(wire)
}

/// Serialises a rollout group as a single JSONL line (no trailing newline).
pub fn serialize_rollout_group(group: &RolloutGroup) -> String {
    serde_json::to_string(&group.to_wire()).expect("rollout groups contain only finite floats")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AdvantageConfigWire {
    gamma: f64,
    lambda: f64,
    eta: f64,
    num_buckets: usize,
    reward_threshold: f64,
    delta: f64,
    eps_stab: f64,
}

impl Default for AdvantageConfigWire {
    fn default() -> Self {
        AdvantageConfig::default().to_wire()
    }
}

/// Hyperparameters of the advantage pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdvantageConfigWire", into = "AdvantageConfigWire")]
pub struct AdvantageConfig {
    gamma: f64,
    lambda: f64,
    eta: f64,
    num_buckets: usize,
    reward_threshold: f64,
    delta: f64,
    eps_stab: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            lambda: 0.1,
            eta: 0.2,
            num_buckets: 10,
            reward_threshold: 0.5,
            delta: 1e-4,
            eps_stab: 1e-8,
        }
    }
}

impl AdvantageConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gamma: f64,
        lambda: f64,
        eta: f64,
        num_buckets: usize,
        reward_threshold: f64,
        delta: f64,
        eps_stab: f64,
    ) -> Result<Self> {
        let cfg = Self {
            gamma,
            lambda,
            eta,
            num_buckets,
            reward_threshold,
            delta,
            eps_stab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(RolloutError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("gamma", self.gamma)?;
        positive("lambda", self.lambda)?;
        positive("delta", self.delta)?;
        positive("eps_stab", self.eps_stab)?;
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(RolloutError::Config(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if self.num_buckets < 1 {
            return Err(RolloutError::Config("num_buckets must be >= 1".into()));
        }
        if !self.reward_threshold.is_finite() {
            return Err(RolloutError::Config(
                "reward_threshold must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn with_eta(self, eta: f64) -> Result<Self> {
        Self { eta, ..self }.checked()
    }

    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        Self { gamma, ..self }.checked()
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        Self { lambda, ..self }.checked()
    }

    pub fn with_num_buckets(self, num_buckets: usize) -> Result<Self> {
        Self {
            num_buckets,
            ..self
        }
        .checked()
    }

    pub fn with_delta(self, delta: f64) -> Result<Self> {
        Self { delta, ..self }.checked()
    }

    pub fn with_eps_stab(self, eps_stab: f64) -> Result<Self> {
        Self { eps_stab, ..self }.checked()
    }

    fn checked(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }
    pub fn reward_threshold(&self) -> f64 {
        self.reward_threshold
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn eps_stab(&self) -> f64 {
        self.eps_stab
    }

    fn to_wire(self) -> AdvantageConfigWire {
        AdvantageConfigWire {
            gamma: self.gamma,
            lambda: self.lambda,
            eta: self.eta,
            num_buckets: self.num_buckets,
            reward_threshold: self.reward_threshold,
            delta: self.delta,
            eps_stab: self.eps_stab,
        }
    }
}

impl TryFrom<AdvantageConfigWire> for AdvantageConfig {
    type Error = RolloutError;

    fn try_from(w: AdvantageConfigWire) -> Result<Self> {
        AdvantageConfig::new(
            w.gamma,
            w.lambda,
            w.eta,
            w.num_buckets,
            w.reward_threshold,
            w.delta,
            w.eps_stab,
        )
    }
}

impl From<AdvantageConfig> for AdvantageConfigWire {
    fn from(c: AdvantageConfig) -> Self {
        c.to_wire()
    }
}

/// Per-token advantage decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenAdvantage {
    pub id: u32,
    /// Entropy gate weight `W`.
    pub gate_weight: f64,
    /// Implicit signal `s = lambda * (logp_cur - logp_ref)`.
    pub implicit_signal: f64,
    /// Anchored signal `d_i * s`.
    pub anchored_signal: f64,
    /// Cumulative-entropy progress coordinate in `[0, 1]`.
    pub progress: f64,
    pub bucket: usize,
    /// Anchored signal z-scored within its progress bucket.
    pub normalized_signal: f64,
    pub outcome_adv: f64,
    pub progress_adv: f64,
    pub final_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseAdvantages {
    pub reward: f64,
    /// Group-normalised sequence advantage.
    pub outcome_advantage: f64,
    /// Polarity anchor in `{-1, 0, +1}`.
    pub anchor: i8,
    pub tokens: Vec<TokenAdvantage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupAdvantagesWire {
    prompt_id: String,
    zero_variance: bool,
    reward_mean: f64,
    reward_std: f64,
    entropy_mean: f64,
    entropy_std: f64,
    responses: Vec<ResponseAdvantages>,
}

/// Output of the advantage pipeline for one rollout group.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "GroupAdvantagesWire")]
pub struct GroupAdvantages {
    prompt_id: String,
    zero_variance: bool,
    reward_mean: f64,
    reward_std: f64,
    entropy_mean: f64,
    entropy_std: f64,
    responses: Vec<ResponseAdvantages>,
}

impl GroupAdvantages {
    /// Validates and assembles a group record. `zero_variance` is derived
    /// from `reward_std`.
    pub fn new(
        prompt_id: impl Into<String>,
        reward_mean: f64,
        reward_std: f64,
        entropy_mean: f64,
        entropy_std: f64,
        responses: Vec<ResponseAdvantages>,
    ) -> Result<Self> {
        let out = Self {
            prompt_id: prompt_id.into(),
            zero_variance: reward_std == 0.0,
            reward_mean,
            reward_std,
            entropy_mean,
            entropy_std,
            responses,
        };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RolloutError::Advantage(msg));
        if self.responses.len() < 2 {
            return Err(RolloutError::GroupTooSmall(self.responses.len()));
        }
        if self.zero_variance != (self.reward_std == 0.0) {
            return bad("zero_variance must equal (reward_std == 0)".into());
        }
        for (i, resp) in self.responses.iter().enumerate() {
            if resp.tokens.is_empty() {
                return Err(RolloutError::EmptyResponse { response: i });
            }
            if !(-1..=1).contains(&resp.anchor) {
                return bad(format!(
                    "response {i}: anchor {} not in {{-1,0,1}}",
                    resp.anchor
                ));
            }
            if self.zero_variance && resp.outcome_advantage != 0.0 {
                return bad(format!(
                    "response {i}: nonzero outcome advantage in zero-variance group"
                ));
            }
            for (t, tok) in resp.tokens.iter().enumerate() {
                if tok.final_adv != tok.outcome_adv + tok.progress_adv {
                    return bad(format!(
                        "response {i} token {t}: final != outcome + progress"
                    ));
                }
                // 0 < W < 1 in exact arithmetic; the logistic saturates to 1.0
                // in f64 once the standardized entropy exceeds ~37/gamma.
                if !(tok.gate_weight > 0.0 && tok.gate_weight <= 1.0) {
                    return bad(format!(
                        "response {i} token {t}: gate weight {}",
                        tok.gate_weight
                    ));
                }
                if !(0.0..=1.0).contains(&tok.progress) {
                    return bad(format!("response {i} token {t}: progress {}", tok.progress));
                }
                if self.zero_variance && tok.outcome_adv != 0.0 {
                    return bad(format!(
                        "response {i} token {t}: nonzero outcome_adv in zero-variance group"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }
    pub fn zero_variance(&self) -> bool {
        self.zero_variance
    }
    pub fn reward_mean(&self) -> f64 {
        self.reward_mean
    }
    pub fn reward_std(&self) -> f64 {
        self.reward_std
    }
    pub fn entropy_mean(&self) -> f64 {
        self.entropy_mean
    }
    pub fn entropy_std(&self) -> f64 {
        self.entropy_std
    }
    pub fn responses(&self) -> &[ResponseAdvantages] {
        &self.responses
    }

    /// Iterates `(response index, token index, advantage)` over the group.
    pub fn tokens(&self) -> impl Iterator<Item = (usize, usize, &TokenAdvantage)> {
        self.responses
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.tokens.iter().enumerate().map(move |(t, a)| (i, t, a)))
    }

    /// Final advantages laid out per response.
    pub fn final_advantages(&self) -> Vec<Vec<f64>> {
        self.responses
            .iter()
            .map(|r| r.tokens.iter().map(|t| t.final_adv).collect())
            .collect()
    }
}

impl From<GroupAdvantages> for GroupAdvantagesWire {
    fn from(g: GroupAdvantages) -> Self {
        GroupAdvantagesWire {
            prompt_id: g.prompt_id,
            zero_variance: g.zero_variance,
            reward_mean: g.reward_mean,
            reward_std: g.reward_std,
            entropy_mean: g.entropy_mean,
            entropy_std: g.entropy_std,
            responses: g.responses,
        }
    }
}

/// Serialises an advantage record as one JSONL line (no trailing newline).
///
/// Floats are written in shortest round-trip form, so the output is
/// byte-stable and parses back to identical values.
pub fn serialize_group_advantages(adv: &GroupAdvantages) -> String {
    serde_json::to_string(adv).expect("advantage records contain only finite floats")
}

pub fn parse_group_advantages(line: &str) -> Result<GroupAdvantages> {
    let w: GroupAdvantagesWire = serde_json::from_str(line)?;
    let out = GroupAdvantages {
        prompt_id: w.prompt_id,
        zero_variance: w.zero_variance,
        reward_mean: w.reward_mean,
        reward_std: w.reward_std,
        entropy_mean: w.entropy_mean,
        entropy_std: w.entropy_std,
        responses: w.responses,
    };
    out.validate()?;
    Ok(out)
}
