//! Group-normalized advantages and the clipped, contribution-weighted
//! surrogate objective, verified exactly on a small tabular softmax policy.
//!
//! The objective per rollout sums over the four memory-type token segments:
//! each token contributes `min(w · ρ · A, clip(ρ, 1-ε, 1+ε) · A)` averaged
//! over its segment, where `ρ` is the per-token importance ratio against the
//! reference policy and `w` amplifies the dominant contributor's segment.
//! A `β`-weighted exact KL term against the reference is subtracted. Both
//! the scalar objective and its analytic gradient with respect to the policy
//! logits are implemented; the gradient is checked against central finite
//! differences in the test suites.

pub mod toy;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::WeightAssignment;
use crate::memory::MemType;

#[derive(Debug, Error)]
pub enum AdrpoError {
    #[error("rollout group too small: need at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrpoConfig {
    /// Clipping half-width ε for the importance ratio.
    pub clip_eps: f64,
    /// Weight β of the KL penalty against the reference policy.
    pub kl_beta: f64,
    /// Stabilizer ε added to the advantage denominator.
    pub adv_eps: f64,
    /// Amplification for the dominant contributor; 1.0 selects the
    /// unweighted baseline.
    pub alpha: f64,
    /// When true the trainer keeps the KL anchored to the initial policy and
    /// treats the per-batch snapshot purely as the old policy for ratios.
    /// With single-step batches the ratio behavior is identical either way.
    pub ratio_vs_old_policy: bool,
}

impl Default for AdrpoConfig {
    fn default() -> Self {
        AdrpoConfig {
            clip_eps: 0.2,
            kl_beta: 0.0,
            adv_eps: 1e-8,
            alpha: 4.0,
            ratio_vs_old_policy: false,
        }
    }
}

impl AdrpoConfig {
    pub fn validate(&self) -> Result<(), AdrpoError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(AdrpoError::InvalidConfig(format!(
                "clip_eps must be in (0,1), got {}",
                self.clip_eps
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(AdrpoError::InvalidConfig("kl_beta must be >= 0".into()));
        }
        if !(self.adv_eps > 0.0) {
            return Err(AdrpoError::InvalidConfig("adv_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Positions of the four memory-type token segments within one sequence.
/// Core first, then episodic, semantic, procedural, contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    lens: [usize; 4],
}

impl SegmentLayout {
    pub fn new(core: usize, episodic: usize, semantic: usize, procedural: usize) -> SegmentLayout {
        SegmentLayout {
            lens: [core, episodic, semantic, procedural],
        }
    }

    pub fn seq_len(&self) -> usize {
        self.lens.iter().sum()
    }

    /// The four `(memory type, position range)` segments; `None` is core.
    pub fn segments(&self) -> [(Option<MemType>, Range<usize>); 4] {
        let mut start = 0;
        let mut out: [(Option<MemType>, Range<usize>); 4] = [
            (None, 0..0),
            (Some(MemType::Episodic), 0..0),
            (Some(MemType::Semantic), 0..0),
            (Some(MemType::Procedural), 0..0),
        ];
        for (slot, len) in out.iter_mut().zip(self.lens) {
            slot.1 = start..start + len;
            start += len;
        }
        out
    }

    pub fn range_of(&self, mem_type: Option<MemType>) -> Range<usize> {
        self.segments()
            .into_iter()
            .find(|(t, _)| *t == mem_type)
            .map(|(_, r)| r)
            .expect("all four segments exist")
    }
}

/// Tabular softmax policy: independent categorical distribution per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    /// Uniform policy over `vocab` tokens at each of `seq_len` positions.
    pub fn uniform(seq_len: usize, vocab: usize) -> ToyPolicy {
        ToyPolicy {
            logits: vec![vec![0.0; vocab]; seq_len],
        }
    }

    pub fn from_logits(logits: Vec<Vec<f64>>) -> ToyPolicy {
        ToyPolicy { logits }
    }

    pub fn seq_len(&self) -> usize {
        self.logits.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn logit_mut(&mut self, pos: usize, token: usize) -> &mut f64 {
        &mut self.logits[pos][token]
    }

    /// Gradient-ascent step: `logits += lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[Vec<f64>], learning_rate: f64) {
        for (row, grad_row) in self.logits.iter_mut().zip(grad) {
            for (z, g) in row.iter_mut().zip(grad_row) {
                *z += learning_rate * g;
            }
        }
    }

    /// Softmax distribution at one position.
    pub fn distribution(&self, pos: usize) -> Vec<f64> {
        softmax(&self.logits[pos])
    }

    pub fn log_prob(&self, pos: usize, token: usize) -> f64 {
        let row = &self.logits[pos];
        row[token] - log_sum_exp(row)
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.seq_len())
            .map(|pos| {
                let p = self.distribution(pos);
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                for (token, prob) in p.iter().enumerate() {
                    acc += prob;
                    if draw < acc {
                        return token;
                    }
                }
                p.len() - 1
            })
            .collect()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// One sampled construction attempt: a token sequence, its session-level
/// reward, and its attribution weights. All four segments share the reward.
#[derive(Debug, Clone)]
pub struct ToyRollout {
    pub tokens: Vec<usize>,
    pub reward: f64,
    pub weights: WeightAssignment,
}

/// N rollouts normalized together.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub layout: SegmentLayout,
    pub rollouts: Vec<ToyRollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Within-group advantage normalization: `A_i = (r_i - μ) / (σ + ε)` with
/// the population standard deviation.
pub fn advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>, AdrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(AdrpoError::GroupTooSmall(n));
    }
    // Identical rewards have σ = 0 and zero numerators exactly; computing the
    // mean numerically would leave rounding residue instead of hard zeros.
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; n]);
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma = variance.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (sigma + adv_eps)).collect())
}

/// Exact categorical KL divergence `KL(policy ‖ reference)` summed over
/// positions. Non-negative by Gibbs' inequality.
pub fn kl_divergence(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<f64, AdrpoError> {
    if policy.seq_len() != reference.seq_len() || policy.vocab_size() != reference.vocab_size() {
        return Err(AdrpoError::SupportMismatch(format!(
            "policy {}x{} vs reference {}x{}",
            policy.seq_len(),
            policy.vocab_size(),
            reference.seq_len(),
            reference.vocab_size()
        )));
    }
    let mut total = 0.0;
    for pos in 0..policy.seq_len() {
        let p = policy.distribution(pos);
        let q = reference.distribution(pos);
        for (pv, qv) in p.iter().zip(&q) {
            if *pv > 0.0 {
                total += pv * (pv.ln() - qv.ln());
            }
        }
    }
    Ok(total)
}

fn check_shapes(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    group: &RolloutGroup,
) -> Result<(), AdrpoError> {
    let seq_len = group.layout.seq_len();
    if policy.seq_len() != seq_len {
        return Err(AdrpoError::ShapeMismatch(format!(
            "policy has {} positions, layout needs {}",
            policy.seq_len(),
            seq_len
        )));
    }
    if reference.seq_len() != seq_len || reference.vocab_size() != policy.vocab_size() {
        return Err(AdrpoError::ShapeMismatch("reference/policy shapes differ".into()));
    }
    for (i, rollout) in group.rollouts.iter().enumerate() {
        if rollout.tokens.len() != seq_len {
            return Err(AdrpoError::ShapeMismatch(format!(
                "rollout {i} has {} tokens, expected {seq_len}",
                rollout.tokens.len()
            )));
        }
        if let Some(t) = rollout.tokens.iter().find(|t| **t >= policy.vocab_size()) {
            return Err(AdrpoError::ShapeMismatch(format!(
                "rollout {i} token {t} out of vocabulary"
            )));
        }
    }
    Ok(())
}

/// The clipped, weighted surrogate objective.
///
/// Mean over rollouts of `Σ_m (1/|a^(m)|) Σ_k min(w^(m)·ρ·A, clip(ρ)·A)`
/// minus `β · KL(policy ‖ reference)`. Ratios are per-token:
/// `ρ = exp(logp_policy - logp_reference)`.
pub fn objective(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    group: &RolloutGroup,
    cfg: &AdrpoConfig,
) -> Result<f64, AdrpoError> {
    cfg.validate()?;
    check_shapes(policy, reference, group)?;
    let adv = advantages(&group.rewards(), cfg.adv_eps)?;
    let n = group.rollouts.len() as f64;
    let mut surrogate = 0.0;
    for (rollout, advantage) in group.rollouts.iter().zip(&adv) {
        for (mem_type, range) in group.layout.segments() {
            if range.is_empty() {
                continue;
            }
            let weight = rollout.weights.weight_for(mem_type);
            let mut segment_sum = 0.0;
            for pos in range.clone() {
                let token = rollout.tokens[pos];
                let ratio = (policy.log_prob(pos, token) - reference.log_prob(pos, token)).exp();
                let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                segment_sum += (weight * ratio * advantage).min(clipped * advantage);
            }
            surrogate += segment_sum / range.len() as f64;
        }
    }
    Ok(surrogate / n - cfg.kl_beta * kl_divergence(policy, reference)?)
}

/// Analytic gradient of [`objective`] with respect to the policy logits.
pub fn objective_gradient(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    group: &RolloutGroup,
    cfg: &AdrpoConfig,
) -> Result<Vec<Vec<f64>>, AdrpoError> {
    cfg.validate()?;
    check_shapes(policy, reference, group)?;
    let adv = advantages(&group.rewards(), cfg.adv_eps)?;
    let n = group.rollouts.len() as f64;
    let seq_len = policy.seq_len();
    let vocab = policy.vocab_size();
    let mut grad = vec![vec![0.0; vocab]; seq_len];
    let distributions: Vec<Vec<f64>> = (0..seq_len).map(|pos| policy.distribution(pos)).collect();

    for (rollout, advantage) in group.rollouts.iter().zip(&adv) {
        for (mem_type, range) in group.layout.segments() {
            if range.is_empty() {
                continue;
            }
            let weight = rollout.weights.weight_for(mem_type);
            let scale = 1.0 / (n * range.len() as f64);
            for pos in range.clone() {
                let token = rollout.tokens[pos];
                let ratio = (policy.log_prob(pos, token) - reference.log_prob(pos, token)).exp();
                let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let unclipped_term = weight * ratio * advantage;
                let clipped_term = clipped * advantage;
                // d(term)/d(logp) through the branch the min selects. The
                // clipped branch is flat outside the clipping band.
                let dterm_dlogp = if unclipped_term <= clipped_term {
                    weight * ratio * advantage
                } else if ratio > 1.0 - cfg.clip_eps && ratio < 1.0 + cfg.clip_eps {
                    ratio * advantage
                } else {
                    0.0
                };
                if dterm_dlogp == 0.0 {
                    continue;
                }
                // d(logp(token))/d(logit[u]) = δ(u == token) - p(u).
                let p = &distributions[pos];
                for (u, grad_slot) in grad[pos].iter_mut().enumerate() {
                    let indicator = if u == token { 1.0 } else { 0.0 };
                    *grad_slot += scale * dterm_dlogp * (indicator - p[u]);
                }
            }
        }
    }

    if cfg.kl_beta > 0.0 {
        // d KL / d logit[pos][u] = p_u * ((ln p_u - ln q_u) - KL_pos).
        for pos in 0..seq_len {
            let p = &distributions[pos];
            let q = reference.distribution(pos);
            let kl_pos: f64 = p
                .iter()
                .zip(&q)
                .filter(|(pv, _)| **pv > 0.0)
                .map(|(pv, qv)| pv * (pv.ln() - qv.ln()))
                .sum();
            for (u, grad_slot) in grad[pos].iter_mut().enumerate() {
                let dkl = p[u] * ((p[u].ln() - q[u].ln()) - kl_pos);
                *grad_slot -= cfg.kl_beta * dkl;
            }
        }
    }

    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> SegmentLayout {
        SegmentLayout::new(1, 2, 2, 1)
    }

    fn random_policy<R: Rng>(rng: &mut R, seq_len: usize, vocab: usize) -> ToyPolicy {
        ToyPolicy::from_logits(
            (0..seq_len)
                .map(|_| (0..vocab).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect(),
        )
    }

    fn random_group<R: Rng>(rng: &mut R, layout: SegmentLayout, vocab: usize, n: usize) -> RolloutGroup {
        let weights_pool = [
            WeightAssignment::unweighted(),
            crate::attribution::assign_weights(Some(MemType::Episodic), 4.0).unwrap(),
            crate::attribution::assign_weights(Some(MemType::Semantic), 2.0).unwrap(),
        ];
        let rollouts = (0..n)
            .map(|_| ToyRollout {
                tokens: (0..layout.seq_len()).map(|_| rng.gen_range(0..vocab)).collect(),
                reward: rng.gen_range(0.0..1.0),
                weights: weights_pool[rng.gen_range(0..weights_pool.len())].clone(),
            })
            .collect();
        RolloutGroup { layout, rollouts }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = random_policy(&mut rng, 6, 8);
        for pos in 0..6 {
            let sum: f64 = policy.distribution(pos).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn advantages_uniform_rewards_are_zero() {
        let a = advantages(&[0.7; 8], 1e-8).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn advantages_two_point() {
        let a = advantages(&[0.0, 1.0], 1e-8).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-6);
        assert!((a[1] - 1.0).abs() < 1e-6);
        assert!(a[0] < 0.0 && a[1] > 0.0);
    }

    /// Independent oracle with compensated (Kahan) summation.
    fn advantages_oracle(rewards: &[f64], eps: f64) -> (Vec<f64>, f64) {
        let kahan_sum = |values: &[f64]| {
            let mut sum = 0.0;
            let mut c = 0.0;
            for v in values {
                let y = v - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        };
        let n = rewards.len() as f64;
        let mean = kahan_sum(rewards) / n;
        let sq: Vec<f64> = rewards.iter().map(|r| (r - mean) * (r - mean)).collect();
        let sigma = (kahan_sum(&sq) / n).sqrt();
        (
            rewards.iter().map(|r| (r - mean) / (sigma + eps)).collect(),
            sigma,
        )
    }

    #[test]
    fn advantages_match_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let rewards: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = advantages(&rewards, 1e-8).unwrap();
            let (want, sigma) = advantages_oracle(&rewards, 1e-8);
            let mean: f64 = got.iter().sum::<f64>() / got.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            let std_got =
                (got.iter().map(|a| a * a).sum::<f64>() / got.len() as f64).sqrt();
            assert!((std_got - sigma / (sigma + 1e-8)).abs() < 1e-9);
        }
    }

    #[test]
    fn group_too_small_rejected() {
        assert!(matches!(advantages(&[1.0], 1e-8), Err(AdrpoError::GroupTooSmall(1))));
    }

    #[test]
    fn kl_identical_policies_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_policy(&mut rng, 4, 5);
        assert_eq!(kl_divergence(&p, &p.clone()).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = random_policy(&mut rng, 3, 4);
            let q = random_policy(&mut rng, 3, 4);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_two_symbol_hand_case() {
        // p = (0.75, 0.25), q = (0.5, 0.5):
        // KL = 0.75 ln 1.5 + 0.25 ln 0.5 ≈ 0.13081.
        let p = ToyPolicy::from_logits(vec![vec![0.75f64.ln(), 0.25f64.ln()]]);
        let q = ToyPolicy::from_logits(vec![vec![0.5f64.ln(), 0.5f64.ln()]]);
        let kl = kl_divergence(&p, &q).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kl_support_mismatch() {
        let p = ToyPolicy::uniform(2, 3);
        let q = ToyPolicy::uniform(2, 4);
        assert!(matches!(kl_divergence(&p, &q), Err(AdrpoError::SupportMismatch(_))));
    }

    #[test]
    fn identity_policy_equal_rewards_objective_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = random_policy(&mut rng, layout().seq_len(), 5);
        let mut group = random_group(&mut rng, layout(), 5, 8);
        for r in &mut group.rollouts {
            r.reward = 0.5;
        }
        let j = objective(&policy, &policy.clone(), &group, &AdrpoConfig::default()).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn amplification_binds_only_below_the_clip_ceiling() {
        // Two rollouts, ratio exactly 1 everywhere. For the positive-advantage
        // rollout min(4·A, A) = A: the clipped branch caps amplification. For
        // the negative-advantage rollout min(4·A, A) = 4·A on the weighted
        // segment.
        let lay = layout();
        let policy = ToyPolicy::uniform(lay.seq_len(), 4);
        let weights = crate::attribution::assign_weights(Some(MemType::Episodic), 4.0).unwrap();
        let group = RolloutGroup {
            layout: lay,
            rollouts: vec![
                ToyRollout {
                    tokens: vec![0; lay.seq_len()],
                    reward: 1.0,
                    weights: weights.clone(),
                },
                ToyRollout {
                    tokens: vec![1; lay.seq_len()],
                    reward: 0.0,
                    weights,
                },
            ],
        };
        let cfg = AdrpoConfig {
            kl_beta: 0.0,
            ..AdrpoConfig::default()
        };
        let j = objective(&policy, &policy.clone(), &group, &cfg).unwrap();
        let a = advantages(&[1.0, 0.0], cfg.adv_eps).unwrap();
        // Rollout 0: all four segments contribute A0 (clip binds).
        // Rollout 1: episodic contributes 4·A1, the other three A1 each.
        let expected = (4.0 * a[0] + (4.0 * a[1] + 3.0 * a[1])) / 2.0;
        assert!((j - expected).abs() < 1e-12, "j={j} expected={expected}");
        // And the unweighted version is exactly the symmetric zero.
        let mut unweighted = group.clone();
        for r in &mut unweighted.rollouts {
            r.weights = WeightAssignment::unweighted();
        }
        let j0 = objective(&policy, &policy.clone(), &unweighted, &cfg).unwrap();
        assert!((j0 - (4.0 * a[0] + 4.0 * a[1]) / 2.0).abs() < 1e-12);
        assert!(j < j0);
    }

    #[test]
    fn zero_advantage_zero_beta_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = random_policy(&mut rng, layout().seq_len(), 5);
        let reference = random_policy(&mut rng, layout().seq_len(), 5);
        let mut group = random_group(&mut rng, layout(), 5, 4);
        for r in &mut group.rollouts {
            r.reward = 0.25;
        }
        let cfg = AdrpoConfig {
            kl_beta: 0.0,
            ..AdrpoConfig::default()
        };
        let grad = objective_gradient(&policy, &reference, &group, &cfg).unwrap();
        assert!(grad.iter().flatten().all(|g| *g == 0.0));
    }

    fn finite_difference(
        policy: &ToyPolicy,
        reference: &ToyPolicy,
        group: &RolloutGroup,
        cfg: &AdrpoConfig,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut fd = vec![vec![0.0; policy.vocab_size()]; policy.seq_len()];
        for pos in 0..policy.seq_len() {
            for token in 0..policy.vocab_size() {
                let mut plus = policy.clone();
                *plus.logit_mut(pos, token) += step;
                let mut minus = policy.clone();
                *minus.logit_mut(pos, token) -= step;
                let jp = objective(&plus, reference, group, cfg).unwrap();
                let jm = objective(&minus, reference, group, cfg).unwrap();
                fd[pos][token] = (jp - jm) / (2.0 * step);
            }
        }
        fd
    }

    #[test]
    fn gradient_matches_finite_differences_on_one_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lay = layout();
        let policy = random_policy(&mut rng, lay.seq_len(), 5);
        let reference = random_policy(&mut rng, lay.seq_len(), 5);
        let group = random_group(&mut rng, lay, 5, 6);
        let cfg = AdrpoConfig {
            kl_beta: 0.05,
            ..AdrpoConfig::default()
        };
        let analytic = objective_gradient(&policy, &reference, &group, &cfg).unwrap();
        let fd = finite_difference(&policy, &reference, &group, &cfg, 1e-5);
        for (a_row, f_row) in analytic.iter().zip(&fd) {
            for (a, f) in a_row.iter().zip(f_row) {
                let denom = a.abs().max(f.abs()).max(1e-6);
                assert!(
                    ((a - f).abs() / denom) < 1e-4,
                    "analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn alpha_sweep_gradient_norm_on_dominant_segment() {
        // Dominant-type tokens with ratio slightly below 1 and positive
        // advantage: the clipped branch binds, so the norm stays flat across
        // alpha (non-decreasing). With negative advantage the weighted branch
        // binds and the norm grows strictly.
        let lay = layout();
        let vocab = 4;
        let reference = ToyPolicy::uniform(lay.seq_len(), vocab);
        let mut policy = ToyPolicy::uniform(lay.seq_len(), vocab);
        // Nudge episodic-position logits down so sampled token 0 has ρ < 1.
        for pos in lay.range_of(Some(MemType::Episodic)) {
            *policy.logit_mut(pos, 0) -= 0.05;
        }
        let epi_range = lay.range_of(Some(MemType::Episodic));
        let norm_of = |grad: &Vec<Vec<f64>>| -> f64 {
            epi_range
                .clone()
                .map(|pos| grad[pos].iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        let build_group = |alpha: f64, good_first: bool| {
            let weights = if alpha > 1.0 {
                crate::attribution::assign_weights(Some(MemType::Episodic), alpha).unwrap()
            } else {
                WeightAssignment::unweighted()
            };
            let rewards = if good_first { [1.0, 0.0] } else { [0.0, 1.0] };
            RolloutGroup {
                layout: lay,
                rollouts: vec![
                    ToyRollout {
                        tokens: vec![0; lay.seq_len()],
                        reward: rewards[0],
                        weights: weights.clone(),
                    },
                    ToyRollout {
                        tokens: vec![1; lay.seq_len()],
                        reward: rewards[1],
                        weights,
                    },
                ],
            }
        };
        let cfg = AdrpoConfig {
            kl_beta: 0.0,
            ..AdrpoConfig::default()
        };
        // Positive advantage on the ρ<1 rollout.
        let mut last = -1.0;
        for alpha in [1.0, 2.0, 4.0] {
            let group = build_group(alpha, true);
            let grad = objective_gradient(&policy, &reference, &group, &cfg).unwrap();
            let norm = norm_of(&grad);
            assert!(norm >= last - 1e-12, "alpha {alpha}: {norm} < {last}");
            last = norm;
        }
        // Negative advantage: amplification acts, norms strictly increase.
        let mut last = -1.0;
        for alpha in [1.0, 2.0, 4.0] {
            let group = build_group(alpha, false);
            let grad = objective_gradient(&policy, &reference, &group, &cfg).unwrap();
            let norm = norm_of(&grad);
            assert!(norm > last, "alpha {alpha}: {norm} <= {last}");
            last = norm;
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let policy = ToyPolicy::uniform(3, 4);
        let group = RolloutGroup {
            layout: layout(),
            rollouts: vec![
                ToyRollout {
                    tokens: vec![0; 6],
                    reward: 0.0,
                    weights: WeightAssignment::unweighted(),
                },
                ToyRollout {
                    tokens: vec![0; 6],
                    reward: 1.0,
                    weights: WeightAssignment::unweighted(),
                },
            ],
        };
        assert!(matches!(
            objective(&policy, &policy.clone(), &group, &AdrpoConfig::default()),
            Err(AdrpoError::ShapeMismatch(_))
        ));
    }
}
