//! Deterministic oracle world.
//!
//! Images are points in `R^d`, the intended result of every task is a single
//! goal point, and every judge scores an image as
//! `clamp(10 - slope * |image - goal|, 0, 10)`. Instructions steer the editor
//! by embedding a vector literal such as `[0.5, -1, 2.25]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, Editor, ImageRef, Scorer, ThinkRequest, Thinker, ThinkerMode};
use crate::protocol::{serialize_expert_output, serialize_thinker_output, ExpertVerdict, ThinkerVerdict};
use crate::seeds;
use crate::session::{EditTask, TaskType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("goal has {got} coordinates, expected {expected}")]
    GoalDimension { expected: usize, got: usize },
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
}

/// Configuration of the oracle world; `goal` is drawn from `seed` when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimWorldConfig {
    pub dimension: usize,
    pub goal: Option<Vec<f64>>,
    pub editor_fidelity: f64,
    pub noise_scale: f64,
    pub score_slope: f64,
    pub seed: u64,
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        SimWorldConfig {
            dimension: 8,
            goal: None,
            editor_fidelity: 0.5,
            noise_scale: 0.05,
            score_slope: 1.0,
            seed: 0,
        }
    }
}

impl SimWorldConfig {
    pub fn build(&self) -> Result<SimWorld, SimError> {
        if self.dimension == 0 {
            return Err(SimError::ZeroDimension);
        }
        if !(0.0..=1.0).contains(&self.editor_fidelity) {
            return Err(SimError::OutOfRange {
                field: "editor_fidelity",
                value: self.editor_fidelity,
            });
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(SimError::OutOfRange {
                field: "noise_scale",
                value: self.noise_scale,
            });
        }
        if !(self.score_slope > 0.0 && self.score_slope.is_finite()) {
            return Err(SimError::OutOfRange {
                field: "score_slope",
                value: self.score_slope,
            });
        }
        let goal = match &self.goal {
            Some(g) if g.len() != self.dimension => {
                return Err(SimError::GoalDimension {
                    expected: self.dimension,
                    got: g.len(),
                })
            }
            Some(g) => g.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "goal"));
                (0..self.dimension).map(|_| rng.random_range(-1.0..=1.0)).collect()
            }
        };
        Ok(SimWorld {
            dimension: self.dimension,
            goal,
            editor_fidelity: self.editor_fidelity,
            noise_scale: self.noise_scale,
            score_slope: self.score_slope,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub dimension: usize,
    pub goal: Vec<f64>,
    pub editor_fidelity: f64,
    pub noise_scale: f64,
    pub score_slope: f64,
    pub seed: u64,
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Vector literal understood by [`parse_target`].
pub fn encode_target(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

/// First bracketed list of exactly `dimension` numbers in `text`.
pub fn parse_target(text: &str, dimension: usize) -> Option<Vec<f64>> {
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let close = after.find(']')?;
        let parsed: Option<Vec<f64>> = after[..close]
            .split(',')
            .map(|p| p.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        match parsed {
            Some(v) if v.len() == dimension => return Some(v),
            _ => rest = after,
        }
    }
    None
}

impl SimWorld {
    fn check(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let v = image.vector()?;
        if v.len() != self.dimension {
            return Err(BackendError::Rejected(format!(
                "image `{}` has {} coordinates, world dimension is {}",
                image.id,
                v.len(),
                self.dimension
            )));
        }
        Ok(v.to_vec())
    }

    pub fn distance_to_goal(&self, v: &[f64]) -> f64 {
        distance(v, &self.goal)
    }

    pub fn score_vector(&self, v: &[f64]) -> f64 {
        (10.0 - self.score_slope * self.distance_to_goal(v)).clamp(0.0, 10.0)
    }

    pub fn score(&self, image: &ImageRef) -> Result<f64, BackendError> {
        Ok(self.score_vector(&self.check(image)?))
    }

    /// One editor application: `current + fidelity * (target - current) + noise`.
    pub fn apply_edit(&self, current: &[f64], instruction: &str, seed: u64) -> Vec<f64> {
        let target = parse_target(instruction, self.dimension).unwrap_or_else(|| current.to_vec());
        let f = self.editor_fidelity;
        let mut out: Vec<f64> = current
            .iter()
            .zip(&target)
            .map(|(c, t)| c * (1.0 - f) + t * f)
            .collect();
        if self.noise_scale > 0.0 {
            let normal = Normal::new(0.0, self.noise_scale).expect("validated noise scale");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in &mut out {
                *x += normal.sample(&mut rng);
            }
        }
        out
    }

    pub fn goal_instruction(&self) -> String {
        format!("Adjust every attribute to target {}", encode_target(&self.goal))
    }

    /// Random tasks around the goal. Each source sits at a random distance
    /// in `source_radius` from the goal; most original instructions point at
    /// an off-goal target (offset drawn from `instruction_offset`), the rest
    /// carry no target at all.
    pub fn generate_tasks(&self, spec: &SimTaskSpec, seed: u64) -> Vec<EditTask> {
        (0..spec.count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(seed, "sim-task", i as u64));
                let source: Vec<f64> = self
                    .goal
                    .iter()
                    .zip(random_direction(&mut rng, self.dimension))
                    .map({
                        let r = rng.random_range(spec.source_radius.0..=spec.source_radius.1);
                        move |(g, u)| g + r * u
                    })
                    .collect();
                let task_type = TaskType::ALL[rng.random_range(0..TaskType::ALL.len())];
                let instruction = if rng.random::<f64>() < spec.vague_fraction {
                    VAGUE[rng.random_range(0..VAGUE.len())].to_string()
                } else {
                    let r = rng.random_range(spec.instruction_offset.0..=spec.instruction_offset.1);
                    let target: Vec<f64> = self
                        .goal
                        .iter()
                        .zip(random_direction(&mut rng, self.dimension))
                        .map(|(g, u)| g + r * u)
                        .collect();
                    format!("{} toward {}", task_type.verb(), encode_target(&target))
                };
                let id = format!("task-{i:05}");
                EditTask {
                    task_id: id.clone(),
                    source: ImageRef::from_vector(format!("{id}/source"), source),
                    original_instruction: instruction,
                    task_type,
                }
            })
            .collect()
    }
}

const VAGUE: [&str; 4] = [
    "Make it look better",
    "Fix the picture",
    "Improve the scene",
    "Edit this photo nicely",
];

fn random_direction(rng: &mut ChaCha8Rng, dimension: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Shape of a generated task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTaskSpec {
    pub count: usize,
    pub source_radius: (f64, f64),
    pub instruction_offset: (f64, f64),
    pub vague_fraction: f64,
}

impl Default for SimTaskSpec {
    fn default() -> Self {
        SimTaskSpec {
            count: 100,
            source_radius: (2.0, 6.0),
            instruction_offset: (2.0, 8.0),
            vague_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimEditor {
    world: Arc<SimWorld>,
}

impl SimEditor {
    pub fn new(world: Arc<SimWorld>) -> Self {
        SimEditor { world }
    }
}

impl Editor for SimEditor {
    fn name(&self) -> &str {
        "sim-editor"
    }

    fn edit(&self, source: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Rejected("empty instruction".into()));
        }
        let current = self.world.check(source)?;
        let out = self.world.apply_edit(&current, instruction, seed);
        let mut image = ImageRef::from_vector(String::new(), out);
        image.id = format!("sim-{}", &image.content_hash[..16]);
        Ok(image)
    }
}

/// Thinker that always knows the goal: its scores are the world score of the
/// previous edit and its refinement names the goal exactly.
#[derive(Debug, Clone)]
pub struct SimThinker {
    world: Arc<SimWorld>,
    mode: ThinkerMode,
    /// Expert mode declares satisfaction at or above this score.
    pub satisfied_threshold: f64,
}

impl SimThinker {
    pub fn new(world: Arc<SimWorld>, mode: ThinkerMode) -> Self {
        SimThinker {
            world,
            mode,
            satisfied_threshold: 9.0,
        }
    }

    pub fn with_satisfied_threshold(mut self, threshold: f64) -> Self {
        self.satisfied_threshold = threshold;
        self
    }
}

impl Thinker for SimThinker {
    fn name(&self) -> &str {
        match self.mode {
            ThinkerMode::Verdict => "sim-thinker",
            ThinkerMode::Expert => "sim-expert",
        }
    }

    fn mode(&self) -> ThinkerMode {
        self.mode
    }

    fn think(&self, request: &ThinkRequest<'_>) -> Result<String, BackendError> {
        let v = self.world.check(request.previous_edit)?;
        let score = self.world.score_vector(&v);
        let gap = self.world.distance_to_goal(&v);
        let reasoning = format!(
            "The edited image is {gap:.4} units away from the intended result. Original instruction: {}",
            request.original_instruction
        );
        Ok(match self.mode {
            ThinkerMode::Verdict => {
                let verdict = ThinkerVerdict::new(reasoning, score, score, self.world.goal_instruction())
                    .map_err(|e| BackendError::Rejected(e.to_string()))?;
                serialize_thinker_output(&verdict)
            }
            ThinkerMode::Expert => {
                let is_satisfied = score >= self.satisfied_threshold;
                serialize_expert_output(&ExpertVerdict {
                    is_satisfied,
                    reason: reasoning,
                    new_rewritten_prompt: (!is_satisfied).then(|| self.world.goal_instruction()),
                })
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimScorer {
    world: Arc<SimWorld>,
}

impl SimScorer {
    pub fn new(world: Arc<SimWorld>) -> Self {
        SimScorer { world }
    }
}

impl Scorer for SimScorer {
    fn name(&self) -> &str {
        "sim-scorer"
    }

    fn score(&self, _source: &ImageRef, edited: &ImageRef, _original_instruction: &str) -> Result<f64, BackendError> {
        self.world.score(edited)
    }
}
