use std::collections::HashMap;

use super::{
    Lineage, PipelineError, SampleInputs, SampleTarget, Stage, TrainingSample, TrajectoryRecord, SAMPLE_SCHEMA_VERSION,
};
use crate::protocol::{score_in_range, serialize_expert_output, serialize_thinker_output};
use crate::session::Critique;

/// One sample per recorded critique: the thinker's inputs at that turn
/// paired with its reasoning and refined instruction.
pub fn unroll(record: &TrajectoryRecord) -> Result<Vec<TrainingSample>, PipelineError> {
    if record.stage != Stage::Truncated {
        return Err(PipelineError::WrongStage {
            trajectory_id: record.id().to_string(),
            expected: Stage::Truncated.as_str(),
            found: record.stage.as_str(),
        });
    }
    let traj = &record.trajectory;
    let mut samples = Vec::new();
    for (pos, step) in traj.steps.iter().enumerate() {
        let sample_id = format!("{}/{}", traj.trajectory_id, step.index);
        if step.index as usize != pos + 1 {
            return Err(PipelineError::Lineage {
                sample_id,
                reason: format!("step index {} at position {}", step.index, pos + 1),
            });
        }
        let Some(critique) = &step.verdict else { continue };
        let score = step.scorer_score.ok_or_else(|| PipelineError::MissingScore {
            trajectory_id: traj.trajectory_id.clone(),
            step: step.index,
        })?;
        if !score_in_range(score) {
            return Err(PipelineError::Lineage {
                sample_id,
                reason: format!("score {score} outside [0, 10]"),
            });
        }
        let target = match critique {
            Critique::Verdict(v) => SampleTarget {
                reasoning: v.reasoning.clone(),
                refined_instruction: Some(v.refined_instruction.clone()),
                stop: false,
                text: serialize_thinker_output(v),
            },
            Critique::Expert(e) => SampleTarget {
                reasoning: e.reason.clone(),
                refined_instruction: e.new_rewritten_prompt.clone(),
                stop: e.is_satisfied,
                text: serialize_expert_output(e),
            },
        };
        samples.push(TrainingSample {
            schema_version: SAMPLE_SCHEMA_VERSION,
            sample_id,
            inputs: SampleInputs {
                source: traj.task.source.clone(),
                previous_edit: step.image.clone(),
                original_instruction: traj.task.original_instruction.clone(),
                previous_instruction: step.instruction_used.clone(),
            },
            target,
            score_meta: score,
            task_type: traj.task.task_type,
            lineage: Lineage {
                trajectory_id: traj.trajectory_id.clone(),
                step_index: step.index,
            },
        });
    }
    Ok(samples)
}

/// Checks that every sample points at a retained, critiqued step of a
/// truncated record with the same score.
pub fn verify_lineage(samples: &[TrainingSample], records: &[TrajectoryRecord]) -> Result<(), PipelineError> {
    let by_id: HashMap<&str, &TrajectoryRecord> = records
        .iter()
        .filter(|r| r.stage == Stage::Truncated)
        .map(|r| (r.id(), r))
        .collect();
    for sample in samples {
        let fail = |reason: &str| PipelineError::Lineage {
            sample_id: sample.sample_id.clone(),
            reason: reason.to_string(),
        };
        let record = by_id
            .get(sample.lineage.trajectory_id.as_str())
            .ok_or_else(|| fail("no truncated record with this trajectory id"))?;
        let step = record
            .trajectory
            .step(sample.lineage.step_index)
            .ok_or_else(|| fail("step not retained in the truncated record"))?;
        if step.verdict.is_none() {
            return Err(fail("step has no critique"));
        }
        if step.scorer_score != Some(sample.score_meta) {
            return Err(fail("score differs from the step's score"));
        }
    }
    Ok(())
}
