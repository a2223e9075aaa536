//! Group-relative policy optimization with EMA-stabilized advantage
//! normalization: sample a group of responses per query, score them with the
//! composite format/accuracy reward, normalize each reward against its own
//! group mean and a slow-moving standard deviation, prune reward-outlier
//! groups, and step the clipped surrogate objective with an exact
//! full-vocabulary KL penalty against a frozen reference policy.

use crate::episodes::RlQuery;
use crate::ota::{self, RewardBreakdown, RewardError, SynonymTable};
use crate::sft::{AdamState, OptimizerKind};
use crate::policy::{
    self, CheckpointError, PolicyError, PolicyParams, Rollout,
};
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("rl corpus is empty")]
    EmptyCorpus,
    #[error("advantages need an initialized normalizer (no EMA update has run)")]
    UninitializedNormalizer,
    #[error("filter would remove {removed} of {n} groups")]
    FilterTooAggressive { removed: usize, n: usize },
    #[error("non-finite importance ratio at step {step}")]
    NonFiniteRatio { step: usize },
    #[error("mean reward stayed below 10% of its running max for 50 steps, last step {step}")]
    Diverged { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Rollouts per query (G).
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Format weight λ in the composite reward.
    pub lambda: f64,
    /// Accuracy reward for a well-formed wrong answer; zero or negative.
    pub wrong_answer_penalty: f64,
    /// Queries sampled per generation phase.
    pub rollout_batch: usize,
    /// Groups per gradient step within a phase.
    pub global_batch: usize,
    /// Optimization passes over each rollout batch; the ratio clip keeps
    /// reused rollouts from dragging the policy too far.
    pub updates_per_batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Applied update norm is bounded by this, as in the supervised stage.
    pub grad_clip_norm: f64,
    /// Fraction of groups pruned at each reward extreme.
    pub filter_fraction: f64,
    pub ema_decay: f64,
    pub ema_floor: f64,
    pub max_len: usize,
    /// Generation phases (one metrics row each).
    pub iters: usize,
    /// Clip per-token ratios instead of one sequence-level ratio.
    pub token_level_ratio: bool,
    /// Save params every this many iterations when set.
    pub checkpoint_interval: Option<usize>,
    /// Stage seed; when absent the caller derives one from the master seed.
    pub seed: Option<u64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.001,
            lambda: 0.1,
            wrong_answer_penalty: 0.0,
            rollout_batch: 32,
            global_batch: 8,
            updates_per_batch: 2,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            grad_clip_norm: 1.0,
            filter_fraction: 0.01,
            ema_decay: 0.99,
            ema_floor: 1e-4,
            max_len: 24,
            iters: 300,
            token_level_ratio: false,
            checkpoint_interval: None,
            seed: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::BadConfig(m.to_owned()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.rollout_batch == 0 || self.global_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.global_batch > self.rollout_batch {
            return bad("global_batch must not exceed rollout_batch");
        }
        if self.updates_per_batch == 0 {
            return bad("updates_per_batch must be positive");
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return bad("kl_beta must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.wrong_answer_penalty.is_finite() && self.wrong_answer_penalty <= 0.0) {
            return bad("wrong_answer_penalty must be zero or negative");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..0.5).contains(&self.filter_fraction) {
            return bad("filter_fraction must lie in [0, 0.5)");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.ema_floor.is_finite() && self.ema_floor > 0.0) {
            return bad("ema_floor must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.iters == 0 {
            return bad("iters must be positive");
        }
        if self.rollout_batch >= 3 {
            let k = prune_count(self.filter_fraction, self.rollout_batch);
            if 2 * k >= self.rollout_batch {
                return bad("filter_fraction would prune every group in a batch");
            }
        }
        Ok(())
    }
}

/// Slow-moving standard deviation shared across updates; advantages divide
/// by this instead of the noisy per-batch spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaNormalizer {
    sigma: f64,
    decay: f64,
    floor: f64,
    initialized: bool,
}

impl EmaNormalizer {
    pub fn new(decay: f64, floor: f64) -> EmaNormalizer {
        EmaNormalizer { sigma: floor, decay, floor, initialized: false }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Folds one batch's group standard deviations in: the first update
    /// assigns their mean directly, later ones decay toward it; the floor
    /// caps from below either way.
    pub fn update(&mut self, group_stds: &[f64]) {
        if group_stds.is_empty() {
            return;
        }
        let mean = group_stds.iter().sum::<f64>() / group_stds.len() as f64;
        self.sigma = if self.initialized {
            (self.decay * self.sigma + (1.0 - self.decay) * mean).max(self.floor)
        } else {
            self.initialized = true;
            mean.max(self.floor)
        };
    }
}

/// One query's sampled group with its scores.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub query: RlQuery,
    /// Position of the query in the corpus; the filter tie-break key.
    pub query_index: usize,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    /// Empty until [`compute_advantages`] runs.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    /// Population standard deviation of the group's rewards.
    pub fn reward_std(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        let mean = self.mean_reward();
        let var = self.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / self.rewards.len() as f64;
        var.sqrt()
    }
}

/// Scores every rollout in the group with the composite reward against the
/// query's gold label.
pub fn score_group(
    group: &mut RolloutGroup,
    lambda: f64,
    wrong_answer_penalty: f64,
    table: &SynonymTable,
) -> Result<(), RewardError> {
    let vocab = Vocabulary::standard();
    group.rewards.clear();
    group.breakdowns.clear();
    for rollout in &group.rollouts {
        let b = ota::score_ids(
            vocab,
            &rollout.tokens,
            group.query.label,
            lambda,
            wrong_answer_penalty,
            table,
        )?;
        group.rewards.push(b.total);
        group.breakdowns.push(b);
    }
    Ok(())
}

/// Centers each reward on its group mean and divides by the shared sigma.
pub fn compute_advantages(
    group: &mut RolloutGroup,
    norm: &EmaNormalizer,
) -> Result<(), GrpoError> {
    if !norm.is_initialized() {
        return Err(GrpoError::UninitializedNormalizer);
    }
    // A group whose rollouts all earned the same reward carries no
    // preference signal; short it to exact zeros rather than the rounding
    // residue of `r - mean` blown up by a small sigma.
    if group.rewards.windows(2).all(|w| w[0] == w[1]) {
        group.advantages = vec![0.0; group.rewards.len()];
        return Ok(());
    }
    let mean = group.mean_reward();
    group.advantages = group.rewards.iter().map(|r| (r - mean) / norm.sigma()).collect();
    Ok(())
}

/// Groups pruned at EACH extreme for a batch of n.
fn prune_count(fraction: f64, n: usize) -> usize {
    if fraction == 0.0 {
        return 0;
    }
    // f·n lands a hair above an integer for cases like 0.01·200; nudge
    // below the epsilon before taking the ceiling.
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Removes the ⌈f·n⌉ highest and ⌈f·n⌉ lowest mean-reward groups, ties
/// broken by batch position, keeping the rest in their original order.
/// Returns the retained groups and how many were pruned.
pub fn online_filter(
    groups: Vec<RolloutGroup>,
    fraction: f64,
) -> Result<(Vec<RolloutGroup>, usize), GrpoError> {
    let n = groups.len();
    if n < 3 || fraction == 0.0 {
        return Ok((groups, 0));
    }
    let k = prune_count(fraction, n);
    if k == 0 {
        return Ok((groups, 0));
    }
    if 2 * k >= n {
        return Err(GrpoError::FilterTooAggressive { removed: 2 * k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        groups[a]
            .mean_reward()
            .partial_cmp(&groups[b].mean_reward())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut drop = vec![false; n];
    for &i in order.iter().take(k).chain(order.iter().rev().take(k)) {
        drop[i] = true;
    }
    let retained: Vec<RolloutGroup> = groups
        .into_iter()
        .zip(&drop)
        .filter_map(|(g, &d)| (!d).then_some(g))
        .collect();
    Ok((retained, 2 * k))
}

/// Pessimistic clipped surrogate for one ratio/advantage pair. Returns the
/// term value and whether the unclipped branch is the active minimum (the
/// branch whose gradient flows; ties count as unclipped).
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Aggregates from one loss evaluation; means are over clip units
/// (rollouts, or tokens under per-token clipping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoLossStats {
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

struct PositionEval {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
    token_logprob: f64,
}

fn eval_positions(
    params: &PolicyParams,
    features: &[f64],
    consumed: &[crate::vocab::TokenId],
    question_len: usize,
    tokens: &[crate::vocab::TokenId],
) -> (Vec<Vec<f64>>, Vec<PositionEval>) {
    let states = policy::hidden_states(params, features, consumed);
    let evals = tokens
        .iter()
        .enumerate()
        .map(|(j, &tok)| {
            let logits = policy::position_logits(params, &states[question_len + j]);
            let (probs, lse) = policy::softmax_parts(&logits);
            let logprobs: Vec<f64> = logits.iter().map(|&z| z - lse).collect();
            PositionEval { probs, token_logprob: logprobs[tok as usize], logprobs }
        })
        .collect();
    (states, evals)
}

/// Clipped-surrogate loss with KL penalty over scored, advantage-bearing
/// groups, along with its exact parameter gradient. Sequence log-probs under
/// the generation-time snapshot are recomputed from `old_params`, so the
/// value is a pure function of the inputs.
pub fn grpo_loss(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams, GrpoLossStats), GrpoError> {
    let n_roll: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    if n_roll == 0 {
        return Err(GrpoError::EmptyCorpus);
    }
    let mut grad = params.zeros_like();
    let mut policy_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clip_units = 0usize;
    let mut clipped_units = 0usize;
    let mut ratio_sum = 0.0;
    for group in groups {
        assert_eq!(
            group.advantages.len(),
            group.rollouts.len(),
            "advantages must be computed before the loss"
        );
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let q = &group.query;
            let tokens = &rollout.tokens;
            let len = tokens.len();
            let mut all = Vec::with_capacity(q.question.len() + len);
            all.extend_from_slice(&q.question);
            all.extend_from_slice(tokens);
            let consumed = &all[..all.len().saturating_sub(1)];
            let (states, new_evals) =
                eval_positions(params, &q.features.values, consumed, q.question.len(), tokens);
            let (_, old_evals) =
                eval_positions(old_params, &q.features.values, consumed, q.question.len(), tokens);
            let ref_evals = if cfg.kl_beta != 0.0 {
                let (_, evals) =
                    eval_positions(ref_params, &q.features.values, consumed, q.question.len(), tokens);
                Some(evals)
            } else {
                None
            };

            // Per-position KL(new ‖ ref) and its logit gradient coefficient.
            let mut kls = vec![0.0; len];
            if let Some(refs) = &ref_evals {
                for j in 0..len {
                    let mut kl = 0.0;
                    for v in 0..new_evals[j].probs.len() {
                        kl += new_evals[j].probs[v]
                            * (new_evals[j].logprobs[v] - refs[j].logprobs[v]);
                    }
                    kls[j] = kl;
                }
                let mean_kl = if len == 0 { 0.0 } else { kls.iter().sum::<f64>() / len as f64 };
                kl_sum += mean_kl;
            }

            let mut dz_at: Vec<(usize, Vec<f64>)> = Vec::with_capacity(len);
            let kl_coeff = cfg.kl_beta / (n_roll as f64 * len.max(1) as f64);
            if cfg.token_level_ratio {
                for j in 0..len {
                    let ratio = (new_evals[j].token_logprob - old_evals[j].token_logprob).exp();
                    if !ratio.is_finite() {
                        return Err(GrpoError::NonFiniteRatio { step: 0 });
                    }
                    let (term, unclipped) = clipped_term(ratio, adv, cfg.clip_eps);
                    policy_sum += term / len as f64;
                    clip_units += 1;
                    ratio_sum += ratio;
                    if !unclipped {
                        clipped_units += 1;
                    }
                    let mut dz = vec![0.0; new_evals[j].probs.len()];
                    if unclipped {
                        let c = -adv * ratio / (n_roll as f64 * len as f64);
                        for (v, d) in dz.iter_mut().enumerate() {
                            *d += c * (f64::from(tokens[j] as u32 == v as u32) - new_evals[j].probs[v]);
                        }
                    }
                    if ref_evals.is_some() {
                        for (v, d) in dz.iter_mut().enumerate() {
                            let refs = ref_evals.as_ref().unwrap();
                            *d += kl_coeff
                                * new_evals[j].probs[v]
                                * ((new_evals[j].logprobs[v] - refs[j].logprobs[v]) - kls[j]);
                        }
                    }
                    dz_at.push((q.question.len() + j, dz));
                }
            } else {
                let lp_new: f64 = new_evals.iter().map(|e| e.token_logprob).sum();
                let lp_old: f64 = old_evals.iter().map(|e| e.token_logprob).sum();
                let ratio = (lp_new - lp_old).exp();
                if !ratio.is_finite() {
                    return Err(GrpoError::NonFiniteRatio { step: 0 });
                }
                let (term, unclipped) = clipped_term(ratio, adv, cfg.clip_eps);
                policy_sum += term;
                clip_units += 1;
                ratio_sum += ratio;
                if !unclipped {
                    clipped_units += 1;
                }
                for j in 0..len {
                    let mut dz = vec![0.0; new_evals[j].probs.len()];
                    if unclipped {
                        let c = -adv * ratio / n_roll as f64;
                        for (v, d) in dz.iter_mut().enumerate() {
                            *d += c * (f64::from(tokens[j] as u32 == v as u32) - new_evals[j].probs[v]);
                        }
                    }
                    if ref_evals.is_some() {
                        let refs = ref_evals.as_ref().unwrap();
                        for (v, d) in dz.iter_mut().enumerate() {
                            *d += kl_coeff
                                * new_evals[j].probs[v]
                                * ((new_evals[j].logprobs[v] - refs[j].logprobs[v]) - kls[j]);
                        }
                    }
                    dz_at.push((q.question.len() + j, dz));
                }
            }
            if !dz_at.is_empty() {
                let g = policy::backward(params, &q.features.values, consumed, &states, &dz_at);
                grad.scaled_add(1.0, &g);
            }
        }
    }
    let loss = -policy_sum / n_roll as f64 + cfg.kl_beta * kl_sum / n_roll as f64;
    let stats = GrpoLossStats {
        mean_kl: kl_sum / n_roll as f64,
        clip_fraction: clipped_units as f64 / clip_units.max(1) as f64,
        mean_ratio: ratio_sum / clip_units.max(1) as f64,
    };
    Ok((loss, grad, stats))
}

/// One generation phase's metrics row. Reward means are over every sampled
/// rollout, before filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlStepMetrics {
    pub step: usize,
    pub reward_overall: f64,
    pub reward_accuracy: f64,
    pub reward_format: f64,
    pub kl: f64,
    pub entropy: f64,
    pub sigma_ema: f64,
    pub groups_pruned: usize,
}

#[derive(Debug)]
pub struct RlOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<RlStepMetrics>,
    /// Interval checkpoints, in step order; empty without a directory or
    /// interval.
    pub checkpoints: Vec<PathBuf>,
}

/// RL stage: repeated generation phases of `rollout_batch` query groups,
/// filtered and EMA-normalized, with one clipped-surrogate gradient step per
/// `global_batch` chunk. The frozen KL reference is the initial parameters
/// (the supervised cold-start handoff).
pub fn rl_train(
    init: &PolicyParams,
    corpus: &[RlQuery],
    cfg: &GrpoConfig,
    seed: u64,
    ckpt_dir: Option<&Path>,
    table: &SynonymTable,
) -> Result<RlOutcome, GrpoError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(GrpoError::EmptyCorpus);
    }
    if cfg.rollout_batch > corpus.len() {
        return Err(GrpoError::BadConfig(format!(
            "rollout_batch {} exceeds corpus size {}",
            cfg.rollout_batch,
            corpus.len()
        )));
    }
    let vocab = Vocabulary::standard();
    let ref_params = init.clone();
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ema = EmaNormalizer::new(cfg.ema_decay, cfg.ema_floor);
    let mut adam = match cfg.optimizer {
        OptimizerKind::Adam => Some(AdamState::new(params.num_params())),
        OptimizerKind::Sgd => None,
    };
    let mut metrics = Vec::with_capacity(cfg.iters);
    let mut checkpoints = Vec::new();
    let mut running_max = f64::NEG_INFINITY;
    let mut low_steps = 0usize;
    for step in 0..cfg.iters {
        let old = params.clone();
        let picked = rand::seq::index::sample(&mut rng, corpus.len(), cfg.rollout_batch);
        let mut groups = Vec::with_capacity(cfg.rollout_batch);
        let mut entropy_sum = 0.0;
        let mut entropy_positions = 0usize;
        for query_index in picked.iter() {
            let query = corpus[query_index].clone();
            let mut rollouts = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                let info = policy::sample_rollout_info(
                    &old,
                    &query.features.values,
                    &query.question,
                    vocab.eos(),
                    cfg.max_len,
                    &mut rng,
                )?;
                entropy_sum += info.entropy_sum;
                entropy_positions += info.positions;
                rollouts.push(info.rollout);
            }
            let mut group = RolloutGroup {
                query,
                query_index,
                rollouts,
                rewards: Vec::new(),
                breakdowns: Vec::new(),
                advantages: Vec::new(),
            };
            score_group(&mut group, cfg.lambda, cfg.wrong_answer_penalty, table)?;
            groups.push(group);
        }

        let n_roll: usize = groups.iter().map(|g| g.rollouts.len()).sum();
        let mut sum_total = 0.0;
        let mut sum_acc = 0.0;
        let mut sum_fmt = 0.0;
        for g in &groups {
            for b in &g.breakdowns {
                sum_total += b.total;
                sum_acc += b.r_acc;
                sum_fmt += b.r_fmt;
            }
        }
        let reward_overall = sum_total / n_roll as f64;

        let (mut retained, pruned) = online_filter(groups, cfg.filter_fraction)?;
        let stds: Vec<f64> = retained.iter().map(|g| g.reward_std()).collect();
        ema.update(&stds);
        for g in &mut retained {
            compute_advantages(g, &ema)?;
        }

        let mut kl_weighted = 0.0;
        let mut kl_passes = 0usize;
        let mut order: Vec<usize> = (0..retained.len()).collect();
        for pass in 0..cfg.updates_per_batch {
            if pass > 0 {
                order.shuffle(&mut rng);
            }
            for chunk_ids in order.chunks(cfg.global_batch) {
                let chunk: Vec<RolloutGroup> =
                    chunk_ids.iter().map(|&i| retained[i].clone()).collect();
                let (loss, grad, stats) = grpo_loss(&params, &old, &ref_params, &chunk, cfg)
                    .map_err(|e| match e {
                        GrpoError::NonFiniteRatio { .. } => GrpoError::NonFiniteRatio { step },
                        other => other,
                    })?;
                if !loss.is_finite() {
                    return Err(GrpoError::NonFiniteRatio { step });
                }
                let chunk_rolls: usize = chunk.iter().map(|g| g.rollouts.len()).sum();
                kl_weighted += stats.mean_kl * chunk_rolls as f64;
                let mut grad = grad;
                let norm = grad.global_norm();
                if norm > cfg.grad_clip_norm {
                    grad.scale(cfg.grad_clip_norm / norm);
                }
                match adam.as_mut() {
                    Some(state) => state.step(&mut params, &grad, cfg.lr),
                    None => params.scaled_add(-cfg.lr, &grad),
                }
            }
            kl_passes += 1;
        }
        let retained_rolls: usize =
            retained.iter().map(|g| g.rollouts.len()).sum::<usize>() * kl_passes;

        running_max = running_max.max(reward_overall);
        if reward_overall < 0.1 * running_max {
            low_steps += 1;
            if low_steps >= 50 {
                return Err(GrpoError::Diverged { step });
            }
        } else {
            low_steps = 0;
        }

        metrics.push(RlStepMetrics {
            step,
            reward_overall,
            reward_accuracy: sum_acc / n_roll as f64,
            reward_format: sum_fmt / n_roll as f64,
            kl: kl_weighted / retained_rolls.max(1) as f64,
            entropy: entropy_sum / entropy_positions.max(1) as f64,
            sigma_ema: ema.sigma(),
            groups_pruned: pruned,
        });

        if let Some(interval) = cfg.checkpoint_interval {
            if interval > 0 && (step + 1) % interval == 0 {
                if let Some(dir) = ckpt_dir {
                    std::fs::create_dir_all(dir).map_err(CheckpointError::from)?;
                    let path = dir.join(format!("iter_{:04}.ckpt", step + 1));
                    policy::save_checkpoint(&params, &path)?;
                    checkpoints.push(path);
                }
            }
        }
    }
    Ok(RlOutcome { params, metrics, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FlowFeatures, MotionPrimitive};
    use crate::ota::Tag;
    use crate::vocab::TokenId;
    use rand::Rng;

    fn table() -> &'static SynonymTable {
        SynonymTable::builtin()
    }

    #[test]
    fn ema_first_update_assigns_then_decays_to_fixed_point() {
        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        assert!(!norm.is_initialized());
        norm.update(&[0.3, 0.1]);
        assert!(norm.is_initialized());
        assert_eq!(norm.sigma(), 0.2);

        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        for _ in 0..500 {
            norm.update(&[0.5]);
        }
        assert!((norm.sigma() - 0.5).abs() < 1e-6, "sigma {}", norm.sigma());
    }

    #[test]
    fn ema_floor_and_single_decay_step() {
        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        for _ in 0..10 {
            norm.update(&[0.0]);
            assert_eq!(norm.sigma(), 1e-4);
        }

        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        norm.update(&[1.0]);
        assert_eq!(norm.sigma(), 1.0);
        norm.update(&[0.0]);
        assert!((norm.sigma() - 0.99).abs() < 1e-15);

        // Empty batches leave the state alone.
        norm.update(&[]);
        assert!((norm.sigma() - 0.99).abs() < 1e-15);
    }

    fn dummy_query(label: MotionPrimitive) -> RlQuery {
        let vocab = Vocabulary::standard();
        RlQuery {
            features: FlowFeatures { values: vec![0.1, -0.2, 0.3], grid_dims: (1, 1, 2) },
            question: vocab.classify_question(),
            label,
        }
    }

    fn rollout_of(tokens: Vec<TokenId>) -> Rollout {
        Rollout { tokens, per_token_logprob: Vec::new(), total_logprob: 0.0, truncated: false }
    }

    fn well_formed(answer: TokenId) -> Vec<TokenId> {
        let vocab = Vocabulary::standard();
        vec![
            vocab.tag(Tag::ObservationOpen),
            vocab.id("flow").unwrap(),
            vocab.tag(Tag::ObservationClose),
            vocab.tag(Tag::ThinkOpen),
            vocab.id("so").unwrap(),
            vocab.tag(Tag::ThinkClose),
            vocab.tag(Tag::AnswerOpen),
            answer,
            vocab.tag(Tag::AnswerClose),
            vocab.eos(),
        ]
    }

    fn group_with(rewards: &[f64]) -> RolloutGroup {
        RolloutGroup {
            query: dummy_query(MotionPrimitive::PanLeft),
            query_index: 0,
            rollouts: rewards.iter().map(|_| rollout_of(vec![0])).collect(),
            rewards: rewards.to_vec(),
            breakdowns: Vec::new(),
            advantages: Vec::new(),
        }
    }

    #[test]
    fn score_group_hand_values() {
        let vocab = Vocabulary::standard();
        let mut group = RolloutGroup {
            query: dummy_query(MotionPrimitive::PanLeft),
            query_index: 0,
            rollouts: vec![
                rollout_of(well_formed(vocab.label(MotionPrimitive::PanLeft))),
                rollout_of(well_formed(vocab.label(MotionPrimitive::TruckRight))),
                rollout_of(vec![vocab.tag(Tag::ThinkClose), vocab.eos()]),
            ],
            rewards: Vec::new(),
            breakdowns: Vec::new(),
            advantages: Vec::new(),
        };
        score_group(&mut group, 0.1, 0.0, table()).unwrap();
        assert_eq!(group.rewards, vec![1.0, 0.1, 0.0]);
        // Format failure forces the total to zero end to end.
        for b in &group.breakdowns {
            if b.r_fmt == 0.0 {
                assert_eq!(b.total, 0.0);
            }
        }

        // Accuracy-only weighting collapses to the accuracy reward.
        score_group(&mut group, 0.0, 0.0, table()).unwrap();
        assert_eq!(group.rewards, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn advantages_center_scale_and_require_init() {
        let mut group = group_with(&[1.0, 0.0, 0.0, 1.0]);
        let uninit = EmaNormalizer::new(0.99, 1e-4);
        assert!(matches!(
            compute_advantages(&mut group, &uninit),
            Err(GrpoError::UninitializedNormalizer)
        ));

        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        norm.update(&[0.5]);
        compute_advantages(&mut group, &norm).unwrap();
        assert_eq!(group.advantages, vec![1.0, -1.0, -1.0, 1.0]);
        let mean: f64 = group.advantages.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);

        // Doubling sigma halves every advantage.
        let mut wide = EmaNormalizer::new(0.99, 1e-4);
        wide.update(&[1.0]);
        let mut group2 = group_with(&[1.0, 0.0, 0.0, 1.0]);
        compute_advantages(&mut group2, &wide).unwrap();
        for (a, b) in group.advantages.iter().zip(&group2.advantages) {
            assert_eq!(*a, 2.0 * *b);
        }

        let mut same = group_with(&[0.7; 5]);
        compute_advantages(&mut same, &norm).unwrap();
        assert!(same.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn filter_prunes_extremes_and_keeps_order() {
        // 200 groups with distinct means: exactly 2 + 2 pruned.
        let groups: Vec<RolloutGroup> =
            (0..200).map(|i| group_with(&[i as f64 / 200.0])).collect();
        let lowest_two: Vec<f64> = vec![0.0, 1.0 / 200.0];
        let (retained, pruned) = online_filter(groups, 0.01).unwrap();
        assert_eq!(pruned, 4);
        assert_eq!(retained.len(), 196);
        let means: Vec<f64> = retained.iter().map(|g| g.mean_reward()).collect();
        assert!(!means.contains(&lowest_two[0]) && !means.contains(&lowest_two[1]));
        assert!(!means.contains(&(198.0 / 200.0)) && !means.contains(&(199.0 / 200.0)));
        // Retained order is the original order.
        let mut sorted = means.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(means, sorted);

        // f = 0 is the identity.
        let groups: Vec<RolloutGroup> = (0..10).map(|i| group_with(&[i as f64])).collect();
        let (retained, pruned) = online_filter(groups, 0.0).unwrap();
        assert_eq!((retained.len(), pruned), (10, 0));

        // All-equal rewards prune by batch position from both ends.
        let groups: Vec<RolloutGroup> = (0..10)
            .map(|i| {
                let mut g = group_with(&[0.5]);
                g.query_index = i;
                g
            })
            .collect();
        let (retained, pruned) = online_filter(groups, 0.1).unwrap();
        assert_eq!(pruned, 2);
        let kept: Vec<usize> = retained.iter().map(|g| g.query_index).collect();
        assert_eq!(kept, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn prune_count_matches_integer_ceiling_for_every_batch_size() {
        for n in 3..=500usize {
            let k = prune_count(0.01, n);
            assert_eq!(k, n.div_ceil(100), "n = {n}");
            let groups: Vec<RolloutGroup> =
                (0..n).map(|i| group_with(&[i as f64])).collect();
            let (retained, pruned) = online_filter(groups, 0.01).unwrap();
            assert_eq!(pruned, 2 * k);
            assert_eq!(retained.len(), n - 2 * k);
        }
        // Aggressive fractions that would empty the batch are an error.
        let groups: Vec<RolloutGroup> = (0..3).map(|i| group_with(&[i as f64])).collect();
        assert!(matches!(
            online_filter(groups, 0.4),
            Err(GrpoError::FilterTooAggressive { removed: 4, n: 3 })
        ));
    }

    #[test]
    fn clip_branches_are_exact() {
        let eps = 0.2;
        // Matching signs take the clipped value exactly.
        let (term, unclipped) = clipped_term(1.0 + 2.0 * eps, 0.7, eps);
        assert_eq!(term, (1.0 + eps) * 0.7);
        assert!(!unclipped);
        let (term, unclipped) = clipped_term(1.0 - 2.0 * eps, -0.7, eps);
        assert_eq!(term, (1.0 - eps) * -0.7);
        assert!(!unclipped);
        // Opposite signs stay pessimistic (unclipped branch).
        let (term, unclipped) = clipped_term(1.0 - 2.0 * eps, 0.7, eps);
        assert_eq!(term, (1.0 - 2.0 * eps) * 0.7);
        assert!(unclipped);
        let (term, unclipped) = clipped_term(1.0 + 2.0 * eps, -0.7, eps);
        assert_eq!(term, (1.0 + 2.0 * eps) * -0.7);
        assert!(unclipped);
        // Ratio 1 is always inside the clip window.
        let (term, unclipped) = clipped_term(1.0, 0.3, eps);
        assert_eq!(term, 0.3);
        assert!(unclipped);
        // Magnitude never exceeds (1+eps)·|A|.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let ratio = rng.gen_range(0.0..3.0);
            let adv = rng.gen_range(-2.0..2.0);
            let (term, _) = clipped_term(ratio, adv, eps);
            if ratio <= 1.0 + eps {
                // Below the upper clip the term can only shrink toward the
                // pessimistic branch.
                assert!(term <= (1.0 + eps) * adv.abs() + 1e-12);
            } else {
                assert!(term.abs() <= ratio * adv.abs() + 1e-12);
            }
        }
    }

    fn sampled_groups(
        params: &PolicyParams,
        cfg: &GrpoConfig,
        seed: u64,
    ) -> Vec<RolloutGroup> {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = [MotionPrimitive::PanLeft, MotionPrimitive::DollyIn, MotionPrimitive::Static];
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut query = dummy_query(label);
                let mut feats = vec![0.0; 6];
                for f in &mut feats {
                    *f = rng.gen_range(-1.0..1.0);
                }
                query.features = FlowFeatures { values: feats, grid_dims: (1, 1, 6) };
                let rollouts: Vec<Rollout> = (0..cfg.group_size)
                    .map(|_| {
                        policy::sample_rollout(
                            params,
                            &query.features.values,
                            &query.question,
                            vocab.eos(),
                            10,
                            &mut rng,
                        )
                        .unwrap()
                    })
                    .collect();
                let mut g = RolloutGroup {
                    query,
                    query_index: i,
                    rollouts,
                    rewards: Vec::new(),
                    breakdowns: Vec::new(),
                    advantages: Vec::new(),
                };
                score_group(&mut g, cfg.lambda, cfg.wrong_answer_penalty, table()).unwrap();
                g
            })
            .collect()
    }

    #[test]
    fn identity_parameters_give_zero_loss_and_centered_policy_term() {
        let vocab = Vocabulary::standard();
        let cfg = GrpoConfig { group_size: 4, ..GrpoConfig::default() };
        let params =
            PolicyParams::init(6, 6, vocab.size(), &mut ChaCha8Rng::seed_from_u64(2));
        let mut groups = sampled_groups(&params, &cfg, 3);
        let mut norm = EmaNormalizer::new(0.99, 1e-4);
        norm.update(&[0.25]);
        for g in &mut groups {
            compute_advantages(g, &norm).unwrap();
        }
        let old = params.clone();
        let reference = params.clone();
        let (loss, grad, stats) = grpo_loss(&params, &old, &reference, &groups, &cfg).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
        assert_eq!(stats.mean_kl, 0.0);
        assert_eq!(stats.mean_ratio, 1.0);
        assert_eq!(stats.clip_fraction, 0.0);

        // With β = 0 the loss is exactly −mean(Aᵢ).
        let cfg0 = GrpoConfig { kl_beta: 0.0, ..cfg.clone() };
        let (loss0, _, _) = grpo_loss(&params, &old, &reference, &groups, &cfg0).unwrap();
        let n: usize = groups.iter().map(|g| g.advantages.len()).sum();
        let mean_adv: f64 =
            groups.iter().flat_map(|g| g.advantages.iter()).sum::<f64>() / n as f64;
        assert!((loss0 + mean_adv).abs() < 1e-12);
        assert!(mean_adv.abs() < 1e-12);

        // The KL penalty separates additively.
        let (loss_b, _, stats_b) = grpo_loss(&params, &old, &reference, &groups, &cfg).unwrap();
        assert!((loss_b - loss0 - cfg.kl_beta * stats_b.mean_kl).abs() < 1e-12);
        let _ = grad;
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let vocab_size = 12usize;
        let feature_len = 5usize;
        let hidden = 4usize;
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = PolicyParams::init(hidden, feature_len, vocab_size, &mut rng);
            // Nearby old and reference params keep ratios finite and off the
            // clip boundaries.
            let mut old = params.clone();
            for w in old.flat_mut() {
                *w += rng.gen_range(-0.01..0.01);
            }
            let mut reference = params.clone();
            for w in reference.flat_mut() {
                *w += rng.gen_range(-0.05..0.05);
            }
            for token_level in [false, true] {
                let cfg = GrpoConfig {
                    group_size: 3,
                    kl_beta: 0.05,
                    token_level_ratio: token_level,
                    ..GrpoConfig::default()
                };
                let mut groups: Vec<RolloutGroup> = (0..2)
                    .map(|gi| {
                        let mut feats = vec![0.0; feature_len];
                        for f in &mut feats {
                            *f = rng.gen_range(-1.0..1.0);
                        }
                        let rollouts: Vec<Rollout> = (0..cfg.group_size)
                            .map(|_| {
                                let len = rng.gen_range(2..5);
                                rollout_of(
                                    (0..len)
                                        .map(|_| rng.gen_range(0..vocab_size as TokenId))
                                        .collect(),
                                )
                            })
                            .collect();
                        RolloutGroup {
                            query: RlQuery {
                                features: FlowFeatures {
                                    values: feats,
                                    grid_dims: (1, 1, feature_len),
                                },
                                question: vec![rng.gen_range(0..vocab_size as TokenId)],
                                label: MotionPrimitive::PanLeft,
                            },
                            query_index: gi,
                            rollouts,
                            rewards: vec![0.0; cfg.group_size],
                            breakdowns: Vec::new(),
                            advantages: (0..cfg.group_size)
                                .map(|_| rng.gen_range(-1.0..1.0))
                                .collect(),
                        }
                    })
                    .collect();
                // Re-center advantages like the real pipeline does.
                for g in &mut groups {
                    let mean: f64 =
                        g.advantages.iter().sum::<f64>() / g.advantages.len() as f64;
                    for a in &mut g.advantages {
                        *a -= mean;
                    }
                }
                let (_, grad, _) = grpo_loss(&params, &old, &reference, &groups, &cfg).unwrap();
                let mut probe = params.clone();
                let n = probe.num_params();
                let eps = 1e-5;
                let mut checked = 0usize;
                for i in (0..n).step_by(7) {
                    let orig = *probe.flat().nth(i).unwrap();
                    *probe.flat_mut().nth(i).unwrap() = orig + eps;
                    let (up, _, _) = grpo_loss(&probe, &old, &reference, &groups, &cfg).unwrap();
                    *probe.flat_mut().nth(i).unwrap() = orig - eps;
                    let (down, _, _) = grpo_loss(&probe, &old, &reference, &groups, &cfg).unwrap();
                    *probe.flat_mut().nth(i).unwrap() = orig;
                    let fd = (up - down) / (2.0 * eps);
                    let an = *grad.flat().nth(i).unwrap();
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-4,
                        "seed {seed} token_level {token_level} coord {i}: analytic {an} fd {fd}"
                    );
                    checked += 1;
                }
                assert!(checked > 20);
            }
        }
    }

    fn tiny_corpus() -> Vec<RlQuery> {
        let geo = crate::geometry::GeometryConfig {
            num_points: 32,
            num_distractors: 4,
            ..crate::geometry::GeometryConfig::default()
        };
        let vocab = Vocabulary::standard();
        crate::episodes::make_dataset(crate::episodes::CorpusKind::Rl, &geo, 1, true, 0.0, 77)
            .unwrap()
            .iter()
            .map(|r| r.to_rl_query(vocab).unwrap())
            .collect()
    }

    #[test]
    fn rl_training_is_deterministic() {
        let vocab = Vocabulary::standard();
        let corpus = tiny_corpus();
        let init = PolicyParams::init(
            8,
            corpus[0].features.values.len(),
            vocab.size(),
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let cfg = GrpoConfig {
            group_size: 2,
            rollout_batch: 4,
            global_batch: 2,
            iters: 3,
            max_len: 12,
            ..GrpoConfig::default()
        };
        let a = rl_train(&init, &corpus, &cfg, 13, None, table()).unwrap();
        let b = rl_train(&init, &corpus, &cfg, 13, None, table()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.params.flat().zip(b.params.flat()).all(|(x, y)| x == y));
        let c = rl_train(&init, &corpus, &cfg, 14, None, table()).unwrap();
        assert_ne!(a.metrics, c.metrics);

        assert_eq!(a.metrics.len(), 3);
        for row in &a.metrics {
            assert!(row.sigma_ema >= cfg.ema_floor);
            assert!(row.reward_overall.is_finite());
            assert!(row.entropy >= 0.0);
            assert_eq!(row.groups_pruned, 2);
        }
    }

    #[test]
    fn rl_train_validates_inputs_and_writes_checkpoints() {
        let vocab = Vocabulary::standard();
        let corpus = tiny_corpus();
        let init = PolicyParams::init(
            8,
            corpus[0].features.values.len(),
            vocab.size(),
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let bad = GrpoConfig { group_size: 1, ..GrpoConfig::default() };
        assert!(matches!(
            rl_train(&init, &corpus, &bad, 1, None, table()),
            Err(GrpoError::BadConfig(_))
        ));
        let too_big = GrpoConfig {
            rollout_batch: corpus.len() + 1,
            global_batch: 1,
            group_size: 2,
            ..GrpoConfig::default()
        };
        assert!(matches!(
            rl_train(&init, &corpus, &too_big, 1, None, table()),
            Err(GrpoError::BadConfig(_))
        ));

        let cfg = GrpoConfig {
            group_size: 2,
            rollout_batch: 4,
            global_batch: 2,
            iters: 4,
            max_len: 12,
            checkpoint_interval: Some(2),
            ..GrpoConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = rl_train(&init, &corpus, &cfg, 13, Some(dir.path()), table()).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        assert!(out.checkpoints[0].ends_with("iter_0002.ckpt"));
        let loaded = policy::load_checkpoint(&out.checkpoints[1]).unwrap();
        assert!(loaded.flat().zip(out.params.flat()).all(|(a, b)| a == b));
    }

    #[test]
    fn format_zero_forces_total_zero_on_sampled_rollouts() {
        let vocab = Vocabulary::standard();
        let cfg = GrpoConfig { group_size: 6, ..GrpoConfig::default() };
        let params =
            PolicyParams::init(6, 6, vocab.size(), &mut ChaCha8Rng::seed_from_u64(9));
        let groups = sampled_groups(&params, &cfg, 21);
        let mut saw_malformed = false;
        for g in &groups {
            for b in &g.breakdowns {
                if b.r_fmt == 0.0 {
                    saw_malformed = true;
                    assert_eq!(b.r_acc, 0.0);
                    assert_eq!(b.total, 0.0);
                }
            }
        }
        // Random-init rollouts are essentially never well-formed.
        assert!(saw_malformed);
    }
}
