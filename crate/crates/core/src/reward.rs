//! Dense session-level reward: synthetic-QA task reward, piecewise length
//! penalties, and the gated combination `r = 1[valid] * r_task * (1 - λ·ℓ)`.
//!
//! Core memory is penalized on its token increment against absolute
//! thresholds; entry memories are penalized on their token ratio against an
//! expert reference, with a tolerance band and a minimum-difference floor.
//! Invalid rollouts score exactly zero and skip QA evaluation entirely.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, Gateway, GatewayError};
use crate::memory::{MemType, MemoryBank};
use crate::prompts::{render_answer_context, PromptSet};
use crate::store::{StoreError, VectorStore};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("question set is empty")]
    EmptyQuestionSet,
    #[error("gateway failure on question {question_index}: {source}")]
    Gateway {
        question_index: usize,
        source: GatewayError,
    },
    #[error("retrieval failure on question {question_index}: {source}")]
    Retrieval {
        question_index: usize,
        source: StoreError,
    },
    #[error("store references entry {0} missing from the bank")]
    MissingEntry(String),
}

/// Length-penalty parameters. Defaults follow the reference configuration:
/// λ=0.8, core thresholds 150/400 tokens, entry difference floor 200 tokens,
/// tolerance band [0.5, 1.3]. The full-penalty ratio boundaries γ_min/γ_max
/// have no published value; 0.1 and 3.0 are this crate's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub lambda: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub delta_min: f64,
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            lambda: 0.8,
            theta_min: 150.0,
            theta_max: 400.0,
            delta_min: 200.0,
            gamma_l: 0.5,
            gamma_u: 1.3,
            gamma_min: 0.1,
            gamma_max: 3.0,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta_min < self.theta_max) {
            return Err(format!(
                "theta_min {} must be < theta_max {}",
                self.theta_min, self.theta_max
            ));
        }
        if !(self.gamma_min < self.gamma_l
            && self.gamma_l <= self.gamma_u
            && self.gamma_u < self.gamma_max)
        {
            return Err(format!(
                "need gamma_min < gamma_l <= gamma_u < gamma_max, got {} {} {} {}",
                self.gamma_min, self.gamma_l, self.gamma_u, self.gamma_max
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0,1]", self.lambda));
        }
        Ok(())
    }
}

/// Per-type length penalties, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMap {
    pub core: f64,
    pub episodic: f64,
    pub semantic: f64,
    pub procedural: f64,
}

impl PenaltyMap {
    pub fn values(&self) -> [f64; 4] {
        [self.core, self.episodic, self.semantic, self.procedural]
    }

    pub fn set(&mut self, mem_type: MemType, value: f64) {
        match mem_type {
            MemType::Episodic => self.episodic = value,
            MemType::Semantic => self.semantic = value,
            MemType::Procedural => self.procedural = value,
        }
    }
}

/// How the four per-type penalties collapse into the single ℓ of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EllAggregation {
    #[default]
    Mean,
    Max,
}

/// Everything recorded about one rollout's reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub valid: bool,
    pub r_task: f64,
    pub penalties: PenaltyMap,
    pub ell_aggregate: f64,
    pub reward: f64,
    pub retrieval_counts: BTreeMap<MemType, usize>,
}

/// Core-block penalty on the token increment `Δ_core`.
///
/// Zero up to `theta_min`, a linear ramp on `(theta_min, theta_max)`, one at
/// and beyond `theta_max`. Negative increments are never penalized.
pub fn core_length_penalty(delta_core_tokens: i64, p: &PenaltyParams) -> f64 {
    let delta = delta_core_tokens as f64;
    if delta <= p.theta_min {
        0.0
    } else if delta >= p.theta_max {
        1.0
    } else {
        (delta - p.theta_min) / (p.theta_max - p.theta_min)
    }
}

/// Entry-memory penalty comparing stored tokens against the expert reference.
///
/// With `ρ = new/expert` and `Δ = |new - expert|`: zero when `Δ < delta_min`
/// or `ρ` is inside the tolerance band `[gamma_l, gamma_u]`; linear ramps up
/// to the full-penalty boundaries `gamma_min`/`gamma_max`; one outside them.
/// A zero expert reference is degenerate and scores zero with a warning.
pub fn entry_length_penalty(new_tokens: usize, expert_tokens: usize, p: &PenaltyParams) -> f64 {
    if expert_tokens == 0 {
        log::warn!("entry length penalty skipped: expert reference has 0 tokens");
        return 0.0;
    }
    let rho = new_tokens as f64 / expert_tokens as f64;
    let delta = (new_tokens as f64 - expert_tokens as f64).abs();
    if delta < p.delta_min || (p.gamma_l..=p.gamma_u).contains(&rho) {
        0.0
    } else if rho > p.gamma_u && rho <= p.gamma_max {
        (rho - p.gamma_u) / (p.gamma_max - p.gamma_u)
    } else if rho >= p.gamma_min && rho < p.gamma_l {
        (p.gamma_l - rho) / (p.gamma_l - p.gamma_min)
    } else {
        1.0
    }
}

/// Arithmetic mean of the four per-type penalties.
pub fn aggregate_ell(penalties: &PenaltyMap) -> f64 {
    aggregate_ell_with(EllAggregation::Mean, penalties)
}

pub fn aggregate_ell_with(mode: EllAggregation, penalties: &PenaltyMap) -> f64 {
    let values = penalties.values();
    match mode {
        EllAggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        EllAggregation::Max => values.into_iter().fold(0.0, f64::max),
    }
}

/// Fraction of questions the judge marked correct.
pub fn task_reward(judge_verdicts: &[bool]) -> Result<f64, RewardError> {
    if judge_verdicts.is_empty() {
        return Err(RewardError::EmptyQuestionSet);
    }
    let correct = judge_verdicts.iter().filter(|v| **v).count();
    Ok(correct as f64 / judge_verdicts.len() as f64)
}

/// Exactly `1[valid] * r_task * (1 - lambda * ell)`.
pub fn combine_reward(valid: bool, r_task: f64, ell_aggregate: f64, lambda: f64) -> f64 {
    if valid {
        r_task * (1.0 - lambda * ell_aggregate)
    } else {
        0.0
    }
}

/// One synthetic question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub gold_answer: String,
}

/// Validity and length accounting established before QA evaluation.
#[derive(Debug, Clone, Default)]
pub struct RolloutPrior {
    pub valid: bool,
    pub penalties: PenaltyMap,
}

/// Scores one candidate bank against its session's synthetic questions.
///
/// Per question: retrieve `k_answer` entries pooled across all three types,
/// prepend the core text, ask the answer model, and let the judge compare
/// against gold. Retrieval counts are summed across questions. An invalid
/// rollout short-circuits to reward zero without touching the gateways.
/// Judges must answer `CORRECT` or `INCORRECT`; anything else is scored
/// incorrect.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_rollout(
    bank: &MemoryBank,
    qa_pairs: &[QaPair],
    answer_gw: &Gateway,
    judge_gw: &Gateway,
    store: &VectorStore,
    embedder: &dyn Embedder,
    k_answer: usize,
    prior: &RolloutPrior,
    params: &PenaltyParams,
    prompts: &PromptSet,
) -> Result<RewardRecord, RewardError> {
    if qa_pairs.is_empty() {
        return Err(RewardError::EmptyQuestionSet);
    }
    let mut retrieval_counts: BTreeMap<MemType, usize> =
        MemType::ALL.iter().map(|t| (*t, 0)).collect();
    let ell = aggregate_ell(&prior.penalties);
    if !prior.valid {
        return Ok(RewardRecord {
            valid: false,
            r_task: 0.0,
            penalties: prior.penalties,
            ell_aggregate: ell,
            reward: 0.0,
            retrieval_counts,
        });
    }

    let mut verdicts = Vec::with_capacity(qa_pairs.len());
    for (question_index, qa) in qa_pairs.iter().enumerate() {
        let retrieved = store
            .top_k(&qa.question, k_answer, None, embedder)
            .map_err(|source| RewardError::Retrieval {
                question_index,
                source,
            })?;
        let mut entries = Vec::with_capacity(retrieved.ranked.len());
        for (id, mem_type, _) in &retrieved.ranked {
            let entry = bank
                .section(*mem_type)
                .get(*id)
                .ok_or_else(|| RewardError::MissingEntry(id.to_string()))?;
            entries.push(entry);
            *retrieval_counts.entry(*mem_type).or_insert(0) += 1;
        }
        let context = render_answer_context(&bank.core.text, entries.into_iter());
        let (system, user) = prompts
            .answer
            .render(&[("context", context.as_str()), ("question", qa.question.as_str())]);
        let candidate = answer_gw
            .chat(&crate::gateway::ChatRequest::new(system, user))
            .map_err(|source| RewardError::Gateway {
                question_index,
                source,
            })?;
        let (system, user) = prompts.judge.render(&[
            ("question", qa.question.as_str()),
            ("gold", qa.gold_answer.as_str()),
            ("candidate", candidate.as_str()),
        ]);
        let verdict_text = judge_gw
            .chat(&crate::gateway::ChatRequest::new(system, user))
            .map_err(|source| RewardError::Gateway {
                question_index,
                source,
            })?;
        let verdict = match verdict_text.trim() {
            "CORRECT" => true,
            "INCORRECT" => false,
            other => {
                log::warn!("judge returned {other:?}; scoring incorrect");
                false
            }
        };
        verdicts.push(verdict);
    }

    let r_task = task_reward(&verdicts)?;
    Ok(RewardRecord {
        valid: true,
        r_task,
        penalties: prior.penalties,
        ell_aggregate: ell,
        reward: combine_reward(true, r_task, ell, params.lambda),
        retrieval_counts,
    })
}
