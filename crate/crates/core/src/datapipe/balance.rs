use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainingSample;
use crate::seeds;
use crate::session::TaskType;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    #[default]
    Downsample,
}

/// Buckets are task type x score bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSpec {
    /// Bin edges over [0, 10]; the last bin is closed on the right.
    pub score_edges: Vec<f64>,
    /// Largest allowed count ratio between two non-empty buckets.
    pub max_ratio: f64,
    pub strategy: BalanceStrategy,
    pub seed: u64,
}

impl Default for BalanceSpec {
    fn default() -> Self {
        BalanceSpec {
            score_edges: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            max_ratio: 1.5,
            strategy: BalanceStrategy::Downsample,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BalanceSpecError {
    #[error("score_edges must start at 0, end at 10 and strictly increase")]
    Edges,
    #[error("max_ratio {0} must be at least 1")]
    Ratio(f64),
}

impl BalanceSpec {
    pub fn validate(&self) -> Result<(), BalanceSpecError> {
        let e = &self.score_edges;
        let increasing = e.windows(2).all(|w| w[0] < w[1]);
        if e.len() < 2 || e[0] != 0.0 || e[e.len() - 1] != 10.0 || !increasing {
            return Err(BalanceSpecError::Edges);
        }
        if self.max_ratio.is_nan() || self.max_ratio < 1.0 {
            return Err(BalanceSpecError::Ratio(self.max_ratio));
        }
        Ok(())
    }
}

/// Index of the bin holding `score`; the last bin includes its upper edge.
pub fn score_bin(edges: &[f64], score: f64) -> usize {
    let bins = edges.len() - 1;
    (0..bins)
        .find(|&i| score >= edges[i] && score < edges[i + 1])
        .unwrap_or(bins - 1)
}

/// Downsamples over-full buckets so that no non-empty bucket holds more
/// than `floor(max_ratio * smallest)` samples. Output keeps input order.
pub fn balance(samples: &[TrainingSample], spec: &BalanceSpec) -> Result<Vec<TrainingSample>, BalanceSpecError> {
    spec.validate()?;
    let mut buckets: BTreeMap<(TaskType, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets
            .entry((s.task_type, score_bin(&spec.score_edges, s.score_meta)))
            .or_default()
            .push(i);
    }
    let Some(min) = buckets.values().map(Vec::len).min() else {
        return Ok(Vec::new());
    };
    // The epsilon keeps exact products such as 1.5 * 10 from flooring low.
    let cap = ((spec.max_ratio * min as f64) + 1e-9).floor() as usize;
    let mut keep = vec![false; samples.len()];
    for ((task_type, bin), members) in &buckets {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let label = format!("balance/{task_type:?}/{bin}");
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, &label));
        for j in index::sample(&mut rng, members.len(), cap) {
            keep[members[j]] = true;
        }
    }
    Ok(samples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.clone())
        .collect())
}
