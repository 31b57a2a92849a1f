//! Scripted session-reward environment and a small trainer loop.
//!
//! The environment treats one sampled sequence as four labeled token
//! segments (core / episodic / semantic / procedural). Matching the target
//! token at a position counts as useful memory content; per-segment match
//! counts stand in for retrieval counts, driving attribution exactly as in
//! the full pipeline. Rewards follow the same gated form as the real reward
//! engine: validity gate, task fraction, and a verbosity penalty.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    advantages, objective_gradient, AdrpoConfig, AdrpoError, RolloutGroup, SegmentLayout,
    ToyPolicy, ToyRollout,
};
use crate::attribution::{weights_from_counts, RetrievalCounts, WeightAssignment};
use crate::memory::MemType;
use crate::reward::combine_reward;

/// Environment definition. Desk scale: vocabulary ≤ 8, sequence length ≤ 6.
#[derive(Debug, Clone)]
pub struct ToyEnvConfig {
    pub layout: SegmentLayout,
    pub vocab: usize,
    /// Target token per position; matching it counts toward the task reward.
    pub targets: Vec<usize>,
    /// Segments whose matches are scored (and counted for attribution).
    /// `None` entries refer to the core segment.
    pub scored_segments: Vec<Option<MemType>>,
    /// Emitting this token at position 0 makes the rollout invalid.
    pub invalid_token: Option<usize>,
    /// Occurrences of this token anywhere accrue the length penalty.
    pub verbose_token: Option<usize>,
    pub lambda: f64,
}

impl ToyEnvConfig {
    /// All four segments scored, no validity or verbosity hazards.
    pub fn bandit(layout: SegmentLayout, vocab: usize, target: usize) -> ToyEnvConfig {
        ToyEnvConfig {
            layout,
            vocab,
            targets: vec![target; layout.seq_len()],
            scored_segments: vec![
                None,
                Some(MemType::Episodic),
                Some(MemType::Semantic),
                Some(MemType::Procedural),
            ],
            invalid_token: None,
            verbose_token: None,
            lambda: 0.8,
        }
    }

    /// Only episodic tokens carry task signal, so attribution always points
    /// at the episodic segment when anything matched.
    pub fn episodic_only(layout: SegmentLayout, vocab: usize, target: usize) -> ToyEnvConfig {
        ToyEnvConfig {
            scored_segments: vec![Some(MemType::Episodic)],
            ..ToyEnvConfig::bandit(layout, vocab, target)
        }
    }
}

/// Score of one rollout in the environment.
#[derive(Debug, Clone)]
pub struct ToyScore {
    pub valid: bool,
    pub r_task: f64,
    pub ell: f64,
    /// Full gated reward, always computed for reporting.
    pub reward: f64,
    pub counts: RetrievalCounts,
    pub verbose_len: usize,
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    cfg: ToyEnvConfig,
}

impl ToyEnv {
    pub fn new(cfg: ToyEnvConfig) -> Result<ToyEnv, AdrpoError> {
        if cfg.targets.len() != cfg.layout.seq_len() {
            return Err(AdrpoError::ShapeMismatch(format!(
                "{} targets for sequence length {}",
                cfg.targets.len(),
                cfg.layout.seq_len()
            )));
        }
        if cfg.targets.iter().any(|t| *t >= cfg.vocab) {
            return Err(AdrpoError::ShapeMismatch("target token out of vocabulary".into()));
        }
        Ok(ToyEnv { cfg })
    }

    pub fn config(&self) -> &ToyEnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> SegmentLayout {
        self.cfg.layout
    }

    pub fn score(&self, tokens: &[usize]) -> ToyScore {
        let cfg = &self.cfg;
        let valid = cfg
            .invalid_token
            .map_or(true, |bad| tokens.first() != Some(&bad));
        let mut counts: RetrievalCounts = MemType::ALL.iter().map(|t| (*t, 0)).collect();
        let mut matched = 0usize;
        let mut scored_positions = 0usize;
        for (segment, range) in cfg.layout.segments() {
            if !cfg.scored_segments.contains(&segment) {
                continue;
            }
            scored_positions += range.len();
            let hits = range
                .clone()
                .filter(|pos| tokens[*pos] == cfg.targets[*pos])
                .count();
            matched += hits;
            if let Some(mem_type) = segment {
                *counts.entry(mem_type).or_insert(0) += hits;
            }
        }
        let r_task = if scored_positions == 0 {
            0.0
        } else {
            matched as f64 / scored_positions as f64
        };
        let verbose_len = cfg
            .verbose_token
            .map_or(0, |v| tokens.iter().filter(|t| **t == v).count());
        let ell = verbose_len as f64 / tokens.len().max(1) as f64;
        ToyScore {
            valid,
            r_task,
            ell,
            reward: combine_reward(valid, r_task, ell, cfg.lambda),
            counts,
            verbose_len,
        }
    }

    /// Reward used for the training signal when the task reward is withheld:
    /// the validity and length terms survive, the QA factor is dropped.
    pub fn withheld_reward(&self, score: &ToyScore) -> f64 {
        combine_reward(score.valid, 1.0, score.ell, self.cfg.lambda)
    }
}

/// Trainer knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub groups_per_epoch: usize,
    /// Rollouts per group (N).
    pub group_size: usize,
    pub learning_rate: f64,
    /// Probability that a session (group) receives the task reward.
    pub reward_density: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 50,
            groups_per_epoch: 8,
            group_size: 8,
            learning_rate: 0.8,
            reward_density: 1.0,
            seed: 0,
        }
    }
}

/// One epoch's aggregates, reported over the full (non-withheld) reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub task_reward: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LearningCurve {
    pub epochs: Vec<EpochStats>,
}

impl LearningCurve {
    pub fn final_mean_reward(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.mean_reward)
    }

    pub fn final_task_reward(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.task_reward)
    }

    /// First epoch index whose task reward reaches `threshold`, if any.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .position(|e| e.task_reward >= threshold)
    }

    /// CSV with columns `epoch,mean_reward,task_reward,mean_length`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "epoch,mean_reward,task_reward,mean_length")?;
        for e in &self.epochs {
            writeln!(
                file,
                "{},{:.6},{:.6},{:.6}",
                e.epoch, e.mean_reward, e.task_reward, e.mean_length
            )?;
        }
        Ok(())
    }
}

/// Runs the sampled-rollout training loop on a fresh uniform policy.
///
/// Each group snapshots the policy as the reference, samples N rollouts from
/// it, scores them, normalizes rewards into advantages, and takes one
/// gradient-ascent step on the weighted clipped objective. Groups whose task
/// reward is withheld by `reward_density` still train on validity and length
/// signals. Reported statistics always use the full reward so curves stay
/// comparable across densities.
pub fn train_toy(
    env: &ToyEnv,
    cfg: &AdrpoConfig,
    params: &TrainParams,
) -> Result<(ToyPolicy, LearningCurve), AdrpoError> {
    cfg.validate()?;
    if !(params.reward_density > 0.0 && params.reward_density <= 1.0) {
        return Err(AdrpoError::InvalidConfig(format!(
            "reward_density must be in (0,1], got {}",
            params.reward_density
        )));
    }
    if params.group_size < 2 {
        return Err(AdrpoError::GroupTooSmall(params.group_size));
    }
    let layout = env.layout();
    let mut policy = ToyPolicy::uniform(layout.seq_len(), env.config().vocab);
    let anchor = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut curve = LearningCurve::default();

    for epoch in 0..params.epochs {
        let mut reward_sum = 0.0;
        let mut task_sum = 0.0;
        let mut length_sum = 0.0;
        let mut rollout_count = 0usize;
        for _ in 0..params.groups_per_epoch {
            let snapshot = policy.clone();
            let task_rewarded = rng.gen_range(0.0..1.0) < params.reward_density;
            let mut rollouts = Vec::with_capacity(params.group_size);
            for _ in 0..params.group_size {
                let tokens = snapshot.sample(&mut rng);
                let score = env.score(&tokens);
                let weights = rollout_weights(cfg.alpha, &score.counts);
                let training_reward = if task_rewarded {
                    score.reward
                } else {
                    env.withheld_reward(&score)
                };
                reward_sum += score.reward;
                task_sum += score.r_task;
                length_sum += score.verbose_len as f64;
                rollout_count += 1;
                rollouts.push(ToyRollout {
                    tokens,
                    reward: training_reward,
                    weights,
                });
            }
            let group = RolloutGroup { layout, rollouts };
            // Identical rewards normalize to all-zero advantages; the
            // gradient is exactly zero then, so skip the arithmetic.
            let adv = advantages(&group.rewards(), cfg.adv_eps)?;
            if adv.iter().all(|a| *a == 0.0) && cfg.kl_beta == 0.0 {
                continue;
            }
            let kl_reference = if cfg.ratio_vs_old_policy { &anchor } else { &snapshot };
            let grad = step_gradient(&policy, &snapshot, kl_reference, &group, cfg)?;
            policy.apply_gradient(&grad, params.learning_rate);
        }
        let denom = rollout_count.max(1) as f64;
        curve.epochs.push(EpochStats {
            epoch,
            mean_reward: reward_sum / denom,
            task_reward: task_sum / denom,
            mean_length: length_sum / denom,
        });
    }
    Ok((policy, curve))
}

/// Surrogate gradient against the batch snapshot plus the KL term against
/// the configured anchor. With `ratio_vs_old_policy = false` both are the
/// snapshot, which is plain [`objective_gradient`].
fn step_gradient(
    policy: &ToyPolicy,
    snapshot: &ToyPolicy,
    kl_reference: &ToyPolicy,
    group: &RolloutGroup,
    cfg: &AdrpoConfig,
) -> Result<Vec<Vec<f64>>, AdrpoError> {
    if std::ptr::eq(snapshot, kl_reference) || snapshot == kl_reference {
        return objective_gradient(policy, snapshot, group, cfg);
    }
    // Ratio part with β = 0 against the snapshot, KL part against the anchor.
    let surrogate_cfg = AdrpoConfig {
        kl_beta: 0.0,
        ..cfg.clone()
    };
    let mut grad = objective_gradient(policy, snapshot, group, &surrogate_cfg)?;
    if cfg.kl_beta > 0.0 {
        let kl_only = AdrpoConfig {
            kl_beta: cfg.kl_beta,
            ..cfg.clone()
        };
        let empty_rewarded: Vec<ToyRollout> = group
            .rollouts
            .iter()
            .map(|r| ToyRollout {
                tokens: r.tokens.clone(),
                reward: 0.0,
                weights: WeightAssignment::unweighted(),
            })
            .collect();
        let kl_group = RolloutGroup {
            layout: group.layout,
            rollouts: empty_rewarded,
        };
        // All-equal rewards zero the surrogate, leaving only the KL part.
        let kl_grad = objective_gradient(policy, kl_reference, &kl_group, &kl_only)?;
        for (row, kl_row) in grad.iter_mut().zip(kl_grad) {
            for (g, k) in row.iter_mut().zip(kl_row) {
                *g += k;
            }
        }
    }
    Ok(grad)
}

fn rollout_weights(alpha: f64, counts: &RetrievalCounts) -> WeightAssignment {
    if alpha > 1.0 {
        weights_from_counts(counts, alpha).expect("alpha validated > 1")
    } else {
        WeightAssignment::unweighted()
    }
}
