//! Desk-scale training loop: sample groups, shape advantages, update the
//! policy, record step metrics.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{compute_group_advantages_with, ShapingFlags};
use crate::objective::{kl_estimate, LossConfig};
use crate::policy::{
    accumulate_gradient, apply_update, freeze_reference, sample_response, OptimizerConfig,
    PolicyError, PolicyGroup, PolicyParams, PolicyShape, ReferenceSnapshot, SamplingConfig,
};
use crate::rollout::{AdvantageConfig, GroupAdvantages, RolloutError};
use crate::stats::{all_equal, ema, l2_norm, population_stats};
use crate::tasks::{verify, TaskConfig, TaskError, TaskKind};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;
/// Smoothing constant for reported reward curves.
pub const EMA_ALPHA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Advantage algorithm: GRPO, full EP-GRPO, or an ablation written as a
/// `+`-joined subset of `eg`, `ips`, `zvd` (e.g. `+eg+ips`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Algorithm(pub ShapingFlags);

impl Algorithm {
    pub const GRPO: Self = Algorithm(ShapingFlags::GRPO);
    pub const EPGRPO: Self = Algorithm(ShapingFlags::EPGRPO);

    pub fn flags(&self) -> ShapingFlags {
        self.0
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => return Ok(Self::GRPO),
            "epgrpo" | "ep-grpo" => return Ok(Self::EPGRPO),
            _ => {}
        }
        let body = s.strip_prefix('+').ok_or_else(|| {
            format!("unknown algorithm {s:?} (grpo, epgrpo, or +eg/+ips/+zvd combinations)")
        })?;
        let mut flags = ShapingFlags::GRPO;
        for part in body.split('+') {
            match part.to_ascii_lowercase().as_str() {
                "eg" => flags.entropy_gate = true,
                "ips" => flags.progress_signal = true,
                "zvd" => flags.zero_variance_degradation = true,
                other => return Err(format!("unknown ablation component {other:?} in {s:?}")),
            }
        }
        Ok(Algorithm(flags))
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = self.0;
        if flags == ShapingFlags::GRPO {
            return f.write_str("grpo");
        }
        if flags == ShapingFlags::EPGRPO {
            return f.write_str("epgrpo");
        }
        if flags.entropy_gate {
            f.write_str("+eg")?;
        }
        if flags.progress_signal {
            f.write_str("+ips")?;
        }
        if flags.zero_variance_degradation {
            f.write_str("+zvd")?;
        }
        Ok(())
    }
}

impl TryFrom<String> for Algorithm {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub context_order: usize,
    pub max_positions: usize,
    /// Initial weights uniform in `[-init_scale, init_scale]`; 0 gives the
    /// uniform policy (which never moves before its first success).
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            context_order: 2,
            max_positions: 8,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every `interval` steps (0: only after the final step).
    pub interval: usize,
    pub instances: usize,
    /// When set, accuracy is averaged over this many sampled responses per
    /// instance instead of one greedy decode.
    pub sampled_draws: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 50,
            instances: 64,
            sampled_draws: None,
        }
    }
}

/// A complete training run description. Serialised as the run-config JSON
/// document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub linear_decay: bool,
    pub optimizer: OptimizerConfig,
    /// Parameter updates per sampled batch; ratios are 1 on the first.
    pub inner_updates: usize,
    pub sampling: SamplingConfig,
    pub advantage: AdvantageConfig,
    pub loss: LossConfig,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    /// Re-freeze the reference every N steps; `None` keeps the step-0 policy.
    pub ref_refreeze_interval: Option<usize>,
    pub eval: EvalConfig,
    /// Write a checkpoint every N steps (and after the last step).
    pub checkpoint_interval: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            algorithm: Algorithm::EPGRPO,
            group_size: 8,
            batch_prompts: 8,
            steps: 500,
            learning_rate: 0.2,
            warmup_ratio: 0.1,
            linear_decay: true,
            optimizer: OptimizerConfig::default(),
            inner_updates: 1,
            sampling: SamplingConfig {
                max_len: 4,
                temperature: 1.0,
                top_p: 0.95,
            },
            advantage: AdvantageConfig::default(),
            loss: LossConfig::default(),
            task: TaskConfig {
                task: TaskKind::Modsum,
                len: [1, 2],
                vocab: 16,
                modulus: Some(10),
            },
            policy: PolicyConfig::default(),
            ref_refreeze_interval: Some(25),
            eval: EvalConfig::default(),
            checkpoint_interval: None,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {RUN_CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_prompts < 1 {
            return bad("batch_prompts must be >= 1".into());
        }
        if self.inner_updates < 1 {
            return bad("inner_updates must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} invalid", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} not in [0, 1]", self.warmup_ratio));
        }
        if self.sampling.max_len < 1 {
            return bad("sampling.max_len must be >= 1".into());
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return bad(format!(
                "sampling.top_p {} not in (0, 1]",
                self.sampling.top_p
            ));
        }
        if self.ref_refreeze_interval == Some(0) || self.checkpoint_interval == Some(0) {
            return bad("intervals must be >= 1 when set".into());
        }
        self.task.validate()?;
        self.policy_shape()?;
        Ok(())
    }

    pub fn policy_shape(&self) -> Result<PolicyShape, TrainError> {
        Ok(PolicyShape::new(
            self.task.vocab,
            self.policy.context_order,
            self.policy.max_positions,
        )?)
    }

    pub fn initial_policy(&self) -> Result<PolicyParams, TrainError> {
        let shape = self.policy_shape()?;
        Ok(if self.policy.init_scale > 0.0 {
            PolicyParams::random(
                shape,
                self.policy.init_scale,
                derive_seed(self.seed, Stream::Init, 0),
            )
        } else {
            PolicyParams::zeros(shape)
        })
    }

    /// Linear warmup then (optionally) linear decay to zero.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        if !self.linear_decay || self.steps <= warmup {
            return self.learning_rate;
        }
        self.learning_rate * (self.steps - step) as f64 / (self.steps - warmup) as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Prompt = 2,
    Sample = 3,
    Eval = 4,
    EvalSample = 5,
}

/// SplitMix64-style seed derivation, so every prompt and response stream is
/// independent of how many draws other streams made.
fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Diagnostics for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Population std of rewards, one entry per group.
    pub group_reward_std: Vec<f64>,
    pub zero_variance_ratio: f64,
    /// Total gradient norm (advantage + KL) at the first inner update.
    pub grad_norm: f64,
    /// Norm of the advantage-driven part of the gradient.
    pub reward_grad_norm: f64,
    /// Norm of the advantage-driven gradient contributed by zero-variance
    /// groups alone.
    pub zero_variance_reward_grad_norm: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_response_length: f64,
    pub format_rate: f64,
    pub learning_rate: f64,
    pub loss: f64,
    pub mean_abs_outcome_adv: f64,
    pub mean_abs_progress_adv: f64,
    pub nonzero_final_adv_fraction: f64,
}

impl StepMetrics {
    pub fn zero_variance_groups(&self) -> usize {
        self.group_reward_std.iter().filter(|&&s| s == 0.0).count()
    }

    pub fn has_zero_variance_group(&self) -> bool {
        self.zero_variance_groups() > 0
    }
}

/// Fraction of groups, pooled over the window, whose rewards were all equal.
pub fn zero_variance_ratio(window: &[StepMetrics]) -> f64 {
    let total: usize = window.iter().map(|m| m.group_reward_std.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let zv: usize = window.iter().map(|m| m.zero_variance_groups()).sum();
    zv as f64 / total as f64
}

/// A sampled batch with its advantages, before any update.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub groups: Vec<PolicyGroup>,
    pub advantages: Vec<GroupAdvantages>,
    pub format_ok: Vec<Vec<bool>>,
}

/// Samples `batch_prompts` groups at `step` and computes their advantages.
pub fn sample_batch(
    policy: &PolicyParams,
    reference: &ReferenceSnapshot,
    cfg: &RunConfig,
    step: usize,
) -> Result<SampledBatch, TrainError> {
    let mut groups = Vec::with_capacity(cfg.batch_prompts);
    let mut advantages = Vec::with_capacity(cfg.batch_prompts);
    let mut format_ok = Vec::with_capacity(cfg.batch_prompts);
    for b in 0..cfg.batch_prompts {
        let prompt_index = (step * cfg.batch_prompts + b) as u64;
        let instance = cfg
            .task
            .generate(derive_seed(cfg.seed, Stream::Prompt, prompt_index))?;
        let mut samples = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        let mut formats = Vec::with_capacity(cfg.group_size);
        for g in 0..cfg.group_size {
            let seed = derive_seed(
                cfg.seed,
                Stream::Sample,
                prompt_index * cfg.group_size as u64 + g as u64,
            );
            let sample = sample_response(policy, &instance.prompt, &cfg.sampling, seed);
            let verdict = verify(&instance, &sample.tokens);
            rewards.push(verdict.reward);
            formats.push(verdict.format_ok);
            samples.push(sample);
        }
        let group = PolicyGroup::new(
            format!("step{step}-p{b}"),
            instance.prompt.clone(),
            samples,
            &rewards,
            policy,
            reference,
        )?;
        let adv =
            compute_group_advantages_with(group.rollout(), &cfg.advantage, cfg.algorithm.flags())?;
        groups.push(group);
        advantages.push(adv);
        format_ok.push(formats);
    }
    Ok(SampledBatch {
        groups,
        advantages,
        format_ok,
    })
}

/// Batch gradient: mean over groups of each group's loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub total: Vec<f64>,
    pub reward: Vec<f64>,
    pub zero_variance_reward: Vec<f64>,
}

pub fn batch_gradient(
    policy: &PolicyParams,
    batch: &SampledBatch,
    loss: &LossConfig,
) -> BatchGradient {
    let n = policy.num_parameters();
    let scale = 1.0 / batch.groups.len() as f64;
    let mut total = vec![0.0; n];
    let mut reward = vec![0.0; n];
    let mut zv = vec![0.0; n];
    for (group, adv) in batch.groups.iter().zip(&batch.advantages) {
        let g = accumulate_gradient(policy, group, &adv.final_advantages(), loss);
        for k in 0..n {
            total[k] += scale * (g.reward[k] + g.kl[k]);
            reward[k] += scale * g.reward[k];
            if adv.zero_variance() {
                zv[k] += scale * g.reward[k];
            }
        }
    }
    BatchGradient {
        total,
        reward,
        zero_variance_reward: zv,
    }
}

/// One training step: sample, shape, update. Returns the step's metrics.
pub fn train_step(
    policy: &mut PolicyParams,
    reference: &ReferenceSnapshot,
    cfg: &RunConfig,
    step: usize,
) -> Result<StepMetrics, TrainError> {
    let batch = sample_batch(policy, reference, cfg, step)?;
    let lr = cfg.learning_rate_at(step);

    let first = batch_gradient(policy, &batch, &cfg.loss);
    let loss = batch
        .groups
        .iter()
        .zip(&batch.advantages)
        .map(|(g, a)| crate::policy::surrogate_loss(policy, g, &a.final_advantages(), &cfg.loss))
        .sum::<f64>()
        / batch.groups.len() as f64;
    apply_update(policy, &first.total, lr, &cfg.optimizer)?;
    for _ in 1..cfg.inner_updates {
        let g = batch_gradient(policy, &batch, &cfg.loss);
        apply_update(policy, &g.total, lr, &cfg.optimizer)?;
    }

    Ok(step_metrics(step, &batch, &first, loss, lr))
}

fn step_metrics(
    step: usize,
    batch: &SampledBatch,
    grad: &BatchGradient,
    loss: f64,
    learning_rate: f64,
) -> StepMetrics {
    let mut rewards = Vec::new();
    let mut group_reward_std = Vec::new();
    let mut kl = Vec::new();
    let mut entropy = Vec::new();
    let mut lengths = Vec::new();
    for group in &batch.groups {
        let r = group.rollout().rewards();
        group_reward_std.push(if all_equal(&r) {
            0.0
        } else {
            population_stats(&r).1
        });
        rewards.extend(r);
        for (resp, beh) in group
            .rollout()
            .responses()
            .iter()
            .zip(group.behavior().responses())
        {
            lengths.push(resp.len() as f64);
            for (tok, b) in resp.tokens().iter().zip(beh.tokens()) {
                kl.push(kl_estimate(b.logp_cur(), b.logp_ref()));
                entropy.push(tok.entropy());
            }
        }
    }
    let formats: Vec<f64> = batch
        .format_ok
        .iter()
        .flatten()
        .map(|&ok| if ok { 1.0 } else { 0.0 })
        .collect();
    let toks: Vec<_> = batch
        .advantages
        .iter()
        .flat_map(|a| a.tokens().map(|(_, _, t)| *t))
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let zv = group_reward_std.iter().filter(|&&s| s == 0.0).count() as f64;
    StepMetrics {
        step,
        mean_reward: mean(&rewards),
        zero_variance_ratio: zv / group_reward_std.len() as f64,
        group_reward_std,
        grad_norm: l2_norm(&grad.total),
        reward_grad_norm: l2_norm(&grad.reward),
        zero_variance_reward_grad_norm: l2_norm(&grad.zero_variance_reward),
        mean_kl: mean(&kl),
        mean_entropy: mean(&entropy),
        mean_response_length: mean(&lengths),
        format_rate: mean(&formats),
        learning_rate,
        loss,
        mean_abs_outcome_adv: mean(&toks.iter().map(|t| t.outcome_adv.abs()).collect::<Vec<_>>()),
        mean_abs_progress_adv: mean(
            &toks
                .iter()
                .map(|t| t.progress_adv.abs())
                .collect::<Vec<_>>(),
        ),
        nonzero_final_adv_fraction: mean(
            &toks
                .iter()
                .map(|t| if t.final_adv != 0.0 { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub accuracy: f64,
    pub format_rate: f64,
}

/// Accuracy and format rate on held-out instances (disjoint seed stream from
/// training prompts). `None` when the config asks for zero instances.
pub fn evaluate(policy: &PolicyParams, cfg: &RunConfig, step: usize) -> Option<EvalRecord> {
    let n = cfg.eval.instances;
    if n == 0 {
        return None;
    }
    let mut correct = 0.0;
    let mut formatted = 0.0;
    let mut draws_total = 0.0;
    for k in 0..n {
        let instance = cfg
            .task
            .generate(derive_seed(cfg.seed, Stream::Eval, k as u64))
            .expect("task config validated");
        let draws = cfg.eval.sampled_draws.unwrap_or(1);
        for d in 0..draws {
            let sample = match cfg.eval.sampled_draws {
                None => sample_response(
                    policy,
                    &instance.prompt,
                    &SamplingConfig::greedy(cfg.sampling.max_len),
                    0,
                ),
                Some(_) => sample_response(
                    policy,
                    &instance.prompt,
                    &cfg.sampling,
                    derive_seed(cfg.seed, Stream::EvalSample, (k * draws + d) as u64),
                ),
            };
            let v = verify(&instance, &sample.tokens);
            correct += v.reward;
            formatted += if v.format_ok { 1.0 } else { 0.0 };
            draws_total += 1.0;
        }
    }
    Some(EvalRecord {
        step,
        accuracy: correct / draws_total,
        format_rate: formatted / draws_total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub steps: usize,
    pub seed: u64,
    pub initial_zero_variance_ratio: f64,
    pub overall_zero_variance_ratio: f64,
    pub final_smoothed_reward: f64,
    /// Steps with at least one zero-variance group.
    pub zero_variance_steps: usize,
    /// Of those, steps where zero-variance groups still produced a nonzero
    /// advantage-driven gradient.
    pub zero_variance_steps_with_gradient: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_format_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub policy: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    step: usize,
    run_config: &'a RunConfig,
    policy: &'a PolicyParams,
}

/// Runs the configured number of steps. When `out_dir` is given, streams
/// `metrics.jsonl` and `evals.jsonl`, writes checkpoints and `summary.json`.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    let mut policy = cfg.initial_policy()?;
    let mut reference = freeze_reference(&policy);

    let mut metrics_out = None;
    let mut evals_out = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mp = dir.join("metrics.jsonl");
        metrics_out = Some((BufWriter::new(File::create(&mp).map_err(io_err(&mp))?), mp));
        let ep = dir.join("evals.jsonl");
        evals_out = Some((BufWriter::new(File::create(&ep).map_err(io_err(&ep))?), ep));
    }

    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        if let Some(every) = cfg.ref_refreeze_interval {
            if step > 0 && step % every == 0 {
                reference = freeze_reference(&policy);
            }
        }
        let m = train_step(&mut policy, &reference, cfg, step)?;
        if let Some((w, path)) = metrics_out.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m).expect("finite metrics"))
                .map_err(io_err(path))?;
        }
        metrics.push(m);

        let done = step + 1;
        let eval_due =
            done == cfg.steps || (cfg.eval.interval > 0 && done % cfg.eval.interval == 0);
        if eval_due {
            if let Some(e) = evaluate(&policy, cfg, done) {
                if let Some((w, path)) = evals_out.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&e).expect("finite eval"))
                        .map_err(io_err(path))?;
                }
                evals.push(e);
            }
        }
        if let Some(dir) = out_dir {
            let ckpt_due = done == cfg.steps
                || cfg
                    .checkpoint_interval
                    .is_some_and(|every| done % every == 0);
            if ckpt_due {
                write_checkpoint(dir, done, cfg, &policy)?;
            }
        }
    }
    for (w, path) in [metrics_out, evals_out].into_iter().flatten() {
        let mut w = w;
        w.flush().map_err(io_err(&path))?;
    }

    let summary = summarize(cfg, &metrics, evals.last());
    if let Some(dir) = out_dir {
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("finite summary");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(RunReport {
        policy,
        metrics,
        evals,
        summary,
    })
}

fn write_checkpoint(
    dir: &Path,
    step: usize,
    cfg: &RunConfig,
    policy: &PolicyParams,
) -> Result<(), TrainError> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let path = ckpt_dir.join(format!("step_{step:06}.json"));
    let body = serde_json::to_string(&Checkpoint {
        step,
        run_config: cfg,
        policy,
    })
    .expect("finite checkpoint");
    fs::write(&path, body).map_err(io_err(&path))
}

pub fn summarize(
    cfg: &RunConfig,
    metrics: &[StepMetrics],
    last_eval: Option<&EvalRecord>,
) -> RunSummary {
    let rewards: Vec<f64> = metrics.iter().map(|m| m.mean_reward).collect();
    let zv_steps: Vec<&StepMetrics> = metrics
        .iter()
        .filter(|m| m.has_zero_variance_group())
        .collect();
    RunSummary {
        algorithm: cfg.algorithm.to_string(),
        steps: metrics.len(),
        seed: cfg.seed,
        initial_zero_variance_ratio: metrics.first().map_or(0.0, |m| m.zero_variance_ratio),
        overall_zero_variance_ratio: zero_variance_ratio(metrics),
        final_smoothed_reward: ema(&rewards, EMA_ALPHA).last().copied().unwrap_or(0.0),
        zero_variance_steps: zv_steps.len(),
        zero_variance_steps_with_gradient: zv_steps
            .iter()
            .filter(|m| m.zero_variance_reward_grad_norm > 0.0)
            .count(),
        final_accuracy: last_eval.map(|e| e.accuracy),
        final_format_rate: last_eval.map(|e| e.format_rate),
    }
}

/// Builds a random policy and a sampled group for the regularizer gradient
/// check: the reference is a random policy, the current policy a perturbation
/// of it, and rewards are random 0/1 values forced to vary.
pub fn theorem_case(
    seed: u64,
    shape: PolicyShape,
    group_size: usize,
    max_len: usize,
) -> Result<(PolicyParams, PolicyGroup), TrainError> {
    if group_size < 2 {
        return Err(TrainError::Config(format!(
            "group_size must be >= 2, got {group_size}"
        )));
    }
    let reference = PolicyParams::random(shape, 0.5, derive_seed(seed, Stream::Init, 1));
    let noise = PolicyParams::random(shape, 0.3, derive_seed(seed, Stream::Init, 2));
    let mut params = reference.clone();
    for (w, n) in params.weights_mut().iter_mut().zip(noise.weights()) {
        *w += n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Prompt, 0));
    let symbols = shape.vocab_size as u32 - crate::tasks::FIRST_SYMBOL;
    let prompt: Vec<u32> = (0..2)
        .map(|_| crate::tasks::FIRST_SYMBOL + rng.gen_range(0..symbols))
        .collect();
    let sampling = SamplingConfig {
        max_len,
        temperature: 1.0,
        top_p: 1.0,
    };
    let samples: Vec<_> = (0..group_size)
        .map(|g| {
            sample_response(
                &params,
                &prompt,
                &sampling,
                derive_seed(seed, Stream::Sample, g as u64),
            )
        })
        .collect();
    let mut rewards: Vec<f64> = (0..group_size)
        .map(|_| f64::from(rng.gen_bool(0.5) as u8))
        .collect();
    if all_equal(&rewards) {
        rewards[0] = 1.0 - rewards[0];
    }
    let group = PolicyGroup::new(
        format!("theorem-{seed}"),
        prompt,
        samples,
        &rewards,
        &params,
        &freeze_reference(&reference),
    )?;
    Ok((params, group))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics_with(groups: &[&[f64]]) -> StepMetrics {
        StepMetrics {
            step: 0,
            mean_reward: 0.0,
            group_reward_std: groups
                .iter()
                .map(|r| {
                    if all_equal(r) {
                        0.0
                    } else {
                        population_stats(r).1
                    }
                })
                .collect(),
            zero_variance_ratio: 0.0,
            grad_norm: 0.0,
            reward_grad_norm: 0.0,
            zero_variance_reward_grad_norm: 0.0,
            mean_kl: 0.0,
            mean_entropy: 0.0,
            mean_response_length: 0.0,
            format_rate: 0.0,
            learning_rate: 0.0,
            loss: 0.0,
            mean_abs_outcome_adv: 0.0,
            mean_abs_progress_adv: 0.0,
            nonzero_final_adv_fraction: 0.0,
        }
    }

    #[test]
    fn zero_variance_ratio_examples() {
        let w = [metrics_with(&[&[1.0, 1.0], &[1.0, 0.0], &[0.0, 0.0]])];
        assert!((zero_variance_ratio(&w) - 2.0 / 3.0).abs() < 1e-15);
        let split = [
            metrics_with(&[&[1.0, 1.0]]),
            metrics_with(&[&[1.0, 0.0], &[0.0, 0.0]]),
        ];
        assert!((zero_variance_ratio(&split) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            zero_variance_ratio(&[metrics_with(&[&[1.0, 0.0], &[0.0, 1.0]])]),
            0.0
        );
        assert_eq!(
            zero_variance_ratio(&[metrics_with(&[&[1.0, 1.0], &[0.0, 0.0]])]),
            1.0
        );
    }

    #[test]
    fn algorithm_names() {
        for (s, flags) in [
            ("grpo", ShapingFlags::GRPO),
            ("epgrpo", ShapingFlags::EPGRPO),
            (
                "+eg",
                ShapingFlags {
                    entropy_gate: true,
                    ..ShapingFlags::GRPO
                },
            ),
            (
                "+eg+ips",
                ShapingFlags {
                    zero_variance_degradation: false,
                    ..ShapingFlags::EPGRPO
                },
            ),
            (
                "+ips+zvd",
                ShapingFlags {
                    entropy_gate: false,
                    ..ShapingFlags::EPGRPO
                },
            ),
        ] {
            let a: Algorithm = s.parse().unwrap();
            assert_eq!(a.flags(), flags);
            assert_eq!(a.to_string(), s);
        }
        assert_eq!(
            "+eg+ips+zvd".parse::<Algorithm>().unwrap(),
            Algorithm::EPGRPO
        );
        assert!("ppo".parse::<Algorithm>().is_err());
        assert!("+eg+foo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = RunConfig {
            steps: 10,
            warmup_ratio: 0.2,
            learning_rate: 1.0,
            ..RunConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.5);
        assert_eq!(cfg.learning_rate_at(1), 1.0);
        assert_eq!(cfg.learning_rate_at(2), 1.0);
        assert_eq!(cfg.learning_rate_at(6), 0.5);
        assert_eq!(cfg.learning_rate_at(9), 0.125);
        let flat = RunConfig {
            linear_decay: false,
            ..cfg
        };
        assert_eq!(flat.learning_rate_at(9), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig {
            group_size: 1,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            steps: 0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            schema_version: 7,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"stepz": 3}"#).is_err());
        let partial: RunConfig =
            serde_json::from_str(r#"{"schema_version":1,"steps":3,"algorithm":"grpo"}"#).unwrap();
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.algorithm, Algorithm::GRPO);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(
            derive_seed(1, Stream::Prompt, 0),
            derive_seed(1, Stream::Sample, 0)
        );
        assert_ne!(
            derive_seed(1, Stream::Prompt, 0),
            derive_seed(1, Stream::Prompt, 1)
        );
        assert_eq!(
            derive_seed(1, Stream::Eval, 5),
            derive_seed(1, Stream::Eval, 5)
        );
    }
}
