//! Turning logged sessions into training data: persistence, trajectory
//! filtering and truncation, step-wise unrolling, bucket balancing and the
//! variance-based SFT/RL split.

mod balance;
mod curate;
mod partition;
pub mod store;
mod unroll;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backends, ImageRef};
use crate::session::{TaskType, Trajectory};

pub use balance::{balance, score_bin, BalanceSpec, BalanceSpecError, BalanceStrategy};
pub use curate::{filter_scores, filter_trajectory, step_scores, truncate, FilterDecision, RejectReason};
pub use partition::{assign_samples, partition, population_variance, Partition, PartitionConfig};
pub use store::{Store, StoreError};
pub use unroll::{unroll, verify_lineage};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;
pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Kept,
    Truncated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Kept => "kept",
            Stage::Truncated => "truncated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub editor: String,
    pub thinker: String,
    #[serde(default)]
    pub scorer: Option<String>,
}

impl Provenance {
    pub fn of(backends: &Backends) -> Self {
        Provenance {
            editor: backends.editor.name().to_string(),
            thinker: backends.thinker.name().to_string(),
            scorer: backends.scorer_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub stage: Stage,
    pub provenance: Provenance,
    /// RFC 3339 creation time. Derived records keep their source's time.
    pub created_at: String,
    pub trajectory: Trajectory,
}

impl TrajectoryRecord {
    pub fn new(trajectory: Trajectory, provenance: Provenance) -> Self {
        TrajectoryRecord {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            stage: Stage::Raw,
            provenance,
            created_at: timestamp_now(),
            trajectory,
        }
    }

    pub fn id(&self) -> &str {
        &self.trajectory.trajectory_id
    }

    /// Stage-specific invariants.
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.stage != Stage::Truncated {
            return Ok(());
        }
        let scores = step_scores(self)?;
        let (Some(first), Some(last)) = (scores.first(), scores.last()) else {
            return Err(self.invariant("truncated record has no steps"));
        };
        if scores.iter().any(|s| s > last) || last < first {
            return Err(self.invariant("last step does not hold the maximal score"));
        }
        Ok(())
    }

    fn invariant(&self, what: &str) -> PipelineError {
        PipelineError::Invariant(format!("{}: {what}", self.id()))
    }

    /// Content hash ignoring the creation time; equal keys mean the same record.
    pub fn content_key(&self) -> String {
        let mut probe = self.clone();
        probe.created_at.clear();
        let bytes = serde_json::to_vec(&probe).expect("record serializes");
        crate::backends::image::sha256_hex(&bytes)
    }
}

/// Current time, or `SOURCE_DATE_EPOCH` when set so that runs reproduce
/// byte for byte.
pub fn timestamp_now() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInputs {
    pub source: ImageRef,
    pub previous_edit: ImageRef,
    pub original_instruction: String,
    pub previous_instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTarget {
    pub reasoning: String,
    /// Absent when the critic declared the edit finished.
    pub refined_instruction: Option<String>,
    pub stop: bool,
    /// Canonical serialized critic answer.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub trajectory_id: String,
    pub step_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub schema_version: u32,
    pub sample_id: String,
    pub inputs: SampleInputs,
    pub target: SampleTarget,
    /// Score of the image the critique was made on.
    pub score_meta: f64,
    pub task_type: TaskType,
    pub lineage: Lineage,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{trajectory_id}: step {step} has no scorer score")]
    MissingScore { trajectory_id: String, step: u32 },
    #[error("{trajectory_id}: expected stage {expected}, found {found}")]
    WrongStage {
        trajectory_id: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{trajectory_id}: cannot truncate at step {k} of {len}")]
    BadTruncation { trajectory_id: String, k: u32, len: usize },
    #[error("sample {sample_id}: {reason}")]
    Lineage { sample_id: String, reason: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Balance(#[from] BalanceSpecError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::MissingScore { .. } => "missing-score",
            PipelineError::WrongStage { .. } => "wrong-stage",
            PipelineError::BadTruncation { .. } => "bad-truncation",
            PipelineError::Lineage { .. } => "lineage-inconsistency",
            PipelineError::Invariant(_) => "invariant-violated",
            PipelineError::Balance(_) => "invalid-balance-spec",
            PipelineError::Store(_) => "store-failure",
        }
    }
}
