//! Contribution-aware gradient weights from retrieval counts.
//!
//! During QA evaluation each retrieved entry is tallied by memory type. The
//! type with the highest count is the dominant contributor and its policy
//! tokens receive weight `alpha`; everything else, including core memory
//! (always in context, never retrieved), stays at 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemType;

/// Default amplification for the dominant contributor.
pub const DEFAULT_ALPHA: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("alpha must be > 1, got {0} (use WeightAssignment::unweighted for the alpha=1 baseline)")]
    AlphaOutOfRange(f64),
}

/// Per-type retrieval tallies across the J questions of one evaluation.
pub type RetrievalCounts = BTreeMap<MemType, usize>;

/// Gradient weight per memory type for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    pub core: f64,
    pub episodic: f64,
    pub semantic: f64,
    pub procedural: f64,
    pub dominant: Option<MemType>,
}

impl Default for WeightAssignment {
    fn default() -> Self {
        WeightAssignment::unweighted()
    }
}

impl WeightAssignment {
    /// All weights 1 regardless of counts — the plain GRPO baseline.
    pub fn unweighted() -> WeightAssignment {
        WeightAssignment {
            core: 1.0,
            episodic: 1.0,
            semantic: 1.0,
            procedural: 1.0,
            dominant: None,
        }
    }

    pub fn weight_for(&self, mem_type: Option<MemType>) -> f64 {
        match mem_type {
            None => self.core,
            Some(MemType::Episodic) => self.episodic,
            Some(MemType::Semantic) => self.semantic,
            Some(MemType::Procedural) => self.procedural,
        }
    }
}

/// Argmax of the retrieval counts. All-zero counts mean no evidence of
/// contribution, so no type is dominant. Ties break by the fixed priority
/// episodic > semantic > procedural.
pub fn dominant_type(counts: &RetrievalCounts) -> Option<MemType> {
    let mut best: Option<(MemType, usize)> = None;
    // Iteration in priority order makes strictly-greater the tie-break rule.
    for mem_type in [MemType::Episodic, MemType::Semantic, MemType::Procedural] {
        let count = counts.get(&mem_type).copied().unwrap_or(0);
        if count > 0 && best.map_or(true, |(_, c)| count > c) {
            best = Some((mem_type, count));
        }
    }
    best.map(|(t, _)| t)
}

/// Weight `alpha` on the dominant type, 1 everywhere else. No dominant type
/// means uniform weights.
pub fn assign_weights(
    dominant: Option<MemType>,
    alpha: f64,
) -> Result<WeightAssignment, AttributionError> {
    if !(alpha > 1.0) {
        return Err(AttributionError::AlphaOutOfRange(alpha));
    }
    let mut weights = WeightAssignment::unweighted();
    match dominant {
        Some(MemType::Episodic) => weights.episodic = alpha,
        Some(MemType::Semantic) => weights.semantic = alpha,
        Some(MemType::Procedural) => weights.procedural = alpha,
        None => {}
    }
    weights.dominant = dominant;
    Ok(weights)
}

/// Weights straight from counts; the composition used by the pipeline.
pub fn weights_from_counts(
    counts: &RetrievalCounts,
    alpha: f64,
) -> Result<WeightAssignment, AttributionError> {
    assign_weights(dominant_type(counts), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(epi: usize, sem: usize, proc: usize) -> RetrievalCounts {
        [
            (MemType::Episodic, epi),
            (MemType::Semantic, sem),
            (MemType::Procedural, proc),
        ]
        .into()
    }

    #[test]
    fn strict_argmax() {
        assert_eq!(dominant_type(&counts(5, 2, 0)), Some(MemType::Episodic));
        assert_eq!(dominant_type(&counts(1, 2, 0)), Some(MemType::Semantic));
        assert_eq!(dominant_type(&counts(0, 0, 3)), Some(MemType::Procedural));
    }

    #[test]
    fn all_zero_has_no_dominant() {
        assert_eq!(dominant_type(&counts(0, 0, 0)), None);
    }

    #[test]
    fn ties_break_epi_then_sem_then_proc() {
        assert_eq!(dominant_type(&counts(3, 3, 1)), Some(MemType::Episodic));
        assert_eq!(dominant_type(&counts(0, 2, 2)), Some(MemType::Semantic));
        assert_eq!(dominant_type(&counts(4, 4, 4)), Some(MemType::Episodic));
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        for (e, s, p) in [(1, 2, 3), (4, 0, 1), (2, 2, 1), (0, 0, 0)] {
            let base = dominant_type(&counts(e, s, p));
            for scale in [2, 3, 7] {
                assert_eq!(
                    dominant_type(&counts(e * scale, s * scale, p * scale)),
                    base
                );
            }
        }
    }

    #[test]
    fn dominant_gets_alpha_everyone_else_one() {
        let w = assign_weights(Some(MemType::Episodic), 4.0).unwrap();
        assert_eq!(
            (w.core, w.episodic, w.semantic, w.procedural),
            (1.0, 4.0, 1.0, 1.0)
        );
        assert_eq!(w.dominant, Some(MemType::Episodic));
    }

    #[test]
    fn no_dominant_means_uniform() {
        let w = assign_weights(None, 4.0).unwrap();
        assert_eq!(w, WeightAssignment { dominant: None, ..WeightAssignment::unweighted() });
    }

    #[test]
    fn alpha_at_or_below_one_rejected() {
        assert!(matches!(
            assign_weights(Some(MemType::Episodic), 1.0),
            Err(AttributionError::AlphaOutOfRange(_))
        ));
        assert!(assign_weights(None, 0.5).is_err());
        // The documented baseline path instead:
        let w = WeightAssignment::unweighted();
        assert_eq!(w.weight_for(Some(MemType::Episodic)), 1.0);
    }

    #[test]
    fn exactly_one_amplified_for_positive_counts() {
        for e in 0..5usize {
            for s in 0..5usize {
                for p in 0..5usize {
                    if e + s + p == 0 {
                        continue;
                    }
                    let w = weights_from_counts(&counts(e, s, p), 4.0).unwrap();
                    let mut values = [w.core, w.episodic, w.semantic, w.procedural];
                    values.sort_by(f64::total_cmp);
                    assert_eq!(values, [1.0, 1.0, 1.0, 4.0]);
                }
            }
        }
    }
}
