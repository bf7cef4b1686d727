use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{step_scores, PipelineError, TrainingSample, TrajectoryRecord};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Trajectories whose score variance exceeds this go to RL.
    pub variance_threshold: f64,
    /// Most RL trajectories to take; unlimited when absent.
    pub rl_trajectory_budget: Option<usize>,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            variance_threshold: 1.0,
            rl_trajectory_budget: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    pub rl: Vec<TrajectoryRecord>,
    pub sft: Vec<TrajectoryRecord>,
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Splits records by intra-trajectory score variance. When more records
/// qualify than the budget allows, the highest variances win, ties broken
/// by a seeded per-record key. Both halves keep input order.
pub fn partition(records: Vec<TrajectoryRecord>, cfg: &PartitionConfig) -> Result<Partition, PipelineError> {
    let mut candidates = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let var = population_variance(&step_scores(r)?);
        if var > cfg.variance_threshold {
            candidates.push((var, seeds::derive(cfg.seed, r.id()), i));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.truncate(cfg.rl_trajectory_budget.unwrap_or(usize::MAX));
    let mut to_rl = vec![false; records.len()];
    for (_, _, i) in candidates {
        to_rl[i] = true;
    }
    let mut out = Partition::default();
    for (r, rl) in records.into_iter().zip(to_rl) {
        if rl {
            out.rl.push(r);
        } else {
            out.sft.push(r);
        }
    }
    Ok(out)
}

/// Routes samples to the half that holds their trajectory: `(sft, rl)`.
pub fn assign_samples(
    samples: &[TrainingSample],
    partition: &Partition,
) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>), PipelineError> {
    let rl: HashSet<&str> = partition.rl.iter().map(TrajectoryRecord::id).collect();
    let sft: HashSet<&str> = partition.sft.iter().map(TrajectoryRecord::id).collect();
    let (mut to_sft, mut to_rl) = (Vec::new(), Vec::new());
    for s in samples {
        let id = s.lineage.trajectory_id.as_str();
        if rl.contains(id) {
            to_rl.push(s.clone());
        } else if sft.contains(id) {
            to_sft.push(s.clone());
        } else {
            return Err(PipelineError::Lineage {
                sample_id: s.sample_id.clone(),
                reason: "trajectory is in neither half of the split".into(),
            });
        }
    }
    Ok((to_sft, to_rl))
}
