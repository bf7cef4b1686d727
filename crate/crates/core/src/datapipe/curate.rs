use serde::{Deserialize, Serialize};

use super::{PipelineError, Stage, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// One step only: there is no later step to compare with.
    SingleStep,
    /// No later step reached the first step's score.
    NoImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum FilterDecision {
    Kept { k: u32 },
    Rejected { reason: RejectReason },
}

/// Scorer scores of every step, in order.
pub fn step_scores(record: &TrajectoryRecord) -> Result<Vec<f64>, PipelineError> {
    record
        .trajectory
        .steps
        .iter()
        .map(|s| {
            s.scorer_score.ok_or_else(|| PipelineError::MissingScore {
                trajectory_id: record.id().to_string(),
                step: s.index,
            })
        })
        .collect()
}

/// Keeps a sequence when some later score reaches the first one; `k` is the
/// 1-based position of the overall maximum, earliest on ties.
pub fn filter_scores(scores: &[f64]) -> FilterDecision {
    let Some((&first, rest)) = scores.split_first() else {
        return FilterDecision::Rejected {
            reason: RejectReason::SingleStep,
        };
    };
    if rest.is_empty() {
        return FilterDecision::Rejected {
            reason: RejectReason::SingleStep,
        };
    }
    let later_max = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if later_max < first {
        return FilterDecision::Rejected {
            reason: RejectReason::NoImprovement,
        };
    }
    let mut k = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[k] {
            k = i;
        }
    }
    FilterDecision::Kept { k: k as u32 + 1 }
}

pub fn filter_trajectory(record: &TrajectoryRecord) -> Result<FilterDecision, PipelineError> {
    Ok(filter_scores(&step_scores(record)?))
}

/// Drops the steps after `k` and tags the record as truncated.
pub fn truncate(record: &TrajectoryRecord, k: u32) -> Result<TrajectoryRecord, PipelineError> {
    let len = record.trajectory.steps.len();
    if k == 0 || k as usize > len {
        return Err(PipelineError::BadTruncation {
            trajectory_id: record.id().to_string(),
            k,
            len,
        });
    }
    let mut out = record.clone();
    out.trajectory.steps.truncate(k as usize);
    out.trajectory.best_index = Some(k);
    out.stage = Stage::Truncated;
    out.check()?;
    Ok(out)
}
