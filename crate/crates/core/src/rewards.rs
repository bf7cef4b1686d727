//! Rewards for critic training: format, critic and edit terms, their weighted
//! sum, and group-relative advantages over rollout groups.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ImageRef, Scorer};
use crate::protocol::{judge_format, score_in_range, FormatJudgment, ScoreAggregate, ThinkerVerdict};

pub const REWARD_SCHEMA_VERSION: u32 = 1;

/// Weight-sum tolerance.
const WEIGHT_EPS: f64 = 1e-9;
/// Reward spread below which a group gets zero advantages.
pub const STD_EPS: f64 = 1e-12;
/// Violation count at which a graded format reward reaches zero.
const GRADED_VIOLATION_SPAN: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    #[default]
    Binary,
    Graded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub format_mode: FormatMode,
    /// Drop the critic and edit terms from the total when the format is invalid.
    pub zero_on_invalid: bool,
    /// How a verdict's two scores combine into its prediction.
    pub aggregate: ScoreAggregate,
    pub group_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.2,
            beta: 0.4,
            gamma: 0.4,
            format_mode: FormatMode::Binary,
            zero_on_invalid: false,
            aggregate: ScoreAggregate::Mean,
            group_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardConfigError {
    #[error("weight {name} = {value} must be finite and non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("group_size must be at least 1")]
    GroupSize,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(RewardConfigError::NegativeWeight { name, value });
            }
        }
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > WEIGHT_EPS {
            return Err(RewardConfigError::WeightSum(sum));
        }
        if self.group_size == 0 {
            return Err(RewardConfigError::GroupSize);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_critic: f64,
    pub r_edit: f64,
    pub r_overall: f64,
    /// Set when `zero_on_invalid` removed the critic and edit terms.
    #[serde(default)]
    pub substantive_zeroed: bool,
    #[serde(default)]
    pub advantage: Option<f64>,
}

impl RewardBreakdown {
    /// The total recomputed from its parts and the weights.
    pub fn reconstruct(&self, cfg: &RewardConfig) -> f64 {
        let substantive = if self.substantive_zeroed {
            0.0
        } else {
            cfg.beta * self.r_critic + cfg.gamma * self.r_edit
        };
        cfg.alpha * self.r_format + substantive
    }
}

/// Negative absolute error between the critic's predicted score and the
/// expert's score.
pub fn critic_reward(predicted: &ThinkerVerdict, expert_score: f64, rule: ScoreAggregate) -> f64 {
    debug_assert!(score_in_range(expert_score));
    -(predicted.aggregate(rule) - expert_score).abs()
}

pub fn edit_reward(score_after: f64, score_before: f64) -> f64 {
    score_after - score_before
}

pub fn format_reward(judgment: &FormatJudgment, mode: FormatMode) -> f64 {
    match mode {
        FormatMode::Binary => {
            if judgment.valid {
                1.0
            } else {
                0.0
            }
        }
        FormatMode::Graded => (1.0 - judgment.violations.len() as f64 / GRADED_VIOLATION_SPAN).clamp(0.0, 1.0),
    }
}

pub fn overall_reward(
    judgment: &FormatJudgment,
    r_critic: f64,
    r_edit: f64,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardConfigError> {
    cfg.validate()?;
    let r_format = format_reward(judgment, cfg.format_mode);
    let substantive_zeroed = cfg.zero_on_invalid && !judgment.valid;
    let mut breakdown = RewardBreakdown {
        r_format,
        r_critic,
        r_edit,
        r_overall: 0.0,
        substantive_zeroed,
        advantage: None,
    };
    breakdown.r_overall = breakdown.reconstruct(cfg);
    Ok(breakdown)
}

/// Standardizes rewards within a group with the population deviation.
/// A group without spread gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= STD_EPS {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// One rollout group with its advantages. Incomplete rollouts are excluded
/// from the statistics and keep no advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_size: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub excluded: usize,
}

impl RolloutGroup {
    pub fn from_rewards(rewards: Vec<f64>) -> Self {
        let advantages = group_advantages(&rewards);
        RolloutGroup {
            group_size: rewards.len(),
            rewards,
            advantages,
            excluded: 0,
        }
    }

    /// Computes advantages over the complete rollouts and writes each one
    /// back into its breakdown.
    pub fn assign(rollouts: &mut [Option<RewardBreakdown>]) -> Self {
        let rewards: Vec<f64> = rollouts.iter().flatten().map(|b| b.r_overall).collect();
        let mut group = RolloutGroup::from_rewards(rewards);
        group.group_size = rollouts.len();
        group.excluded = rollouts.iter().filter(|b| b.is_none()).count();
        for (b, a) in rollouts.iter_mut().flatten().zip(&group.advantages) {
            b.advantage = Some(*a);
        }
        group
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Config(#[from] RewardConfigError),
    #[error("scorer failed: {0}")]
    Scorer(#[from] BackendError),
    #[error("scorer returned {0}, outside [0, 10]")]
    ScoreRange(f64),
}

fn checked_score(scorer: &dyn Scorer, src: &ImageRef, image: &ImageRef, t_s: &str) -> Result<f64, RolloutError> {
    let s = scorer.score(src, image, t_s)?;
    if score_in_range(s) {
        Ok(s)
    } else {
        Err(RolloutError::ScoreRange(s))
    }
}

/// Scores one rollout: the expert judges the image before and after the edit
/// made from the verdict's instruction.
#[allow(clippy::too_many_arguments)]
pub fn score_rollout_step(
    src: &ImageRef,
    before: &ImageRef,
    after: &ImageRef,
    t_s: &str,
    verdict: &ThinkerVerdict,
    raw: &str,
    scorer: &dyn Scorer,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RolloutError> {
    cfg.validate()?;
    let before_score = checked_score(scorer, src, before, t_s)?;
    let after_score = checked_score(scorer, src, after, t_s)?;
    let judgment = judge_format(raw);
    // The verdict critiques the image it was shown, the pre-edit one.
    let r_critic = critic_reward(verdict, before_score, cfg.aggregate);
    let r_edit = edit_reward(after_score, before_score);
    Ok(overall_reward(&judgment, r_critic, r_edit, cfg)?)
}

/// Serialized per-rollout reward line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub schema_version: u32,
    pub group_id: String,
    pub rollout_index: usize,
    #[serde(default)]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type ScoreKey = (String, String, String);

/// Memoizes scorer results per (source, image, instruction).
#[derive(Default)]
pub struct ScoreCache {
    map: Mutex<HashMap<ScoreKey, f64>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("score cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(src: &ImageRef, image: &ImageRef, t_s: &str) -> ScoreKey {
        (src.content_hash.clone(), image.content_hash.clone(), t_s.to_string())
    }

    pub fn get(&self, src: &ImageRef, image: &ImageRef, t_s: &str) -> Option<f64> {
        let map = self.map.lock().expect("score cache poisoned");
        map.get(&Self::key(src, image, t_s)).copied()
    }

    /// Inserts unless present; returns the value now stored.
    pub fn insert_if_absent(&self, src: &ImageRef, image: &ImageRef, t_s: &str, score: f64) -> f64 {
        let mut map = self.map.lock().expect("score cache poisoned");
        *map.entry(Self::key(src, image, t_s)).or_insert(score)
    }
}

/// A scorer that consults a shared cache first. Failures are not cached.
pub struct CachedScorer {
    inner: Arc<dyn Scorer>,
    cache: Arc<ScoreCache>,
}

impl CachedScorer {
    pub fn new(inner: Arc<dyn Scorer>, cache: Arc<ScoreCache>) -> Self {
        CachedScorer { inner, cache }
    }
}

impl Scorer for CachedScorer {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, source: &ImageRef, edited: &ImageRef, original_instruction: &str) -> Result<f64, BackendError> {
        if let Some(s) = self.cache.get(source, edited, original_instruction) {
            return Ok(s);
        }
        let s = self.inner.score(source, edited, original_instruction)?;
        Ok(self.cache.insert_if_absent(source, edited, original_instruction, s))
    }
}
