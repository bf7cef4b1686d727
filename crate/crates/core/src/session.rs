//! The critique/refine/repeat state machine.
//!
//! A session edits the source image with the user's instruction, then
//! alternates thinker critiques and re-edits of the source until the thinker's
//! score clears the stop threshold, an expert declares the edit finished, or
//! the turn budget runs out. Each editor call becomes one [`Step`].

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ImageRef, ThinkRequest, ThinkerMode};
use crate::protocol::{
    parse_expert_output, parse_thinker_output, score_in_range, ExpertParseError, ExpertVerdict, ScoreAggregate,
    ThinkerVerdict,
};
use crate::seeds;

/// Edit category labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Add,
    Adjust,
    Extract,
    Replace,
    Remove,
    Background,
    Style,
    Hybrid,
    Action,
    Other,
}

impl TaskType {
    pub const ALL: [TaskType; 10] = [
        TaskType::Add,
        TaskType::Adjust,
        TaskType::Extract,
        TaskType::Replace,
        TaskType::Remove,
        TaskType::Background,
        TaskType::Style,
        TaskType::Hybrid,
        TaskType::Action,
        TaskType::Other,
    ];

    pub fn verb(self) -> &'static str {
        match self {
            TaskType::Add => "Add the requested object, moving",
            TaskType::Adjust => "Adjust the attributes",
            TaskType::Extract => "Extract the subject, moving",
            TaskType::Replace => "Replace the object, moving",
            TaskType::Remove => "Remove the object, moving",
            TaskType::Background => "Change the background",
            TaskType::Style => "Restyle the picture",
            TaskType::Hybrid => "Apply the combined edit",
            TaskType::Action => "Change the pose",
            TaskType::Other => "Edit the image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTask {
    pub task_id: String,
    pub source: ImageRef,
    pub original_instruction: String,
    pub task_type: TaskType,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("task id is empty")]
    EmptyId,
    #[error("task `{0}` has an empty instruction")]
    EmptyInstruction(String),
}

impl EditTask {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.task_id.is_empty() {
            return Err(TaskError::EmptyId);
        }
        if self.original_instruction.trim().is_empty() {
            return Err(TaskError::EmptyInstruction(self.task_id.clone()));
        }
        Ok(())
    }
}

/// A parsed thinker answer, in whichever mode the thinker runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Critique {
    Verdict(ThinkerVerdict),
    Expert(ExpertVerdict),
}

impl Critique {
    pub fn reasoning(&self) -> &str {
        match self {
            Critique::Verdict(v) => &v.reasoning,
            Critique::Expert(e) => &e.reason,
        }
    }

    /// Instruction for the next edit. A satisfied expert keeps the previous one.
    pub fn next_instruction<'a>(&'a self, previous: &'a str) -> &'a str {
        match self {
            Critique::Verdict(v) => &v.refined_instruction,
            Critique::Expert(e) => e.new_rewritten_prompt.as_deref().unwrap_or(previous),
        }
    }

    /// Predicted score of the critiqued image; experts predict none.
    pub fn predicted_score(&self, rule: ScoreAggregate) -> Option<f64> {
        match self {
            Critique::Verdict(v) => Some(v.aggregate(rule)),
            Critique::Expert(_) => None,
        }
    }
}

/// One editor call and the critique of its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based turn index.
    pub index: u32,
    /// Instruction that produced `image`: the original instruction at turn 1,
    /// the previous step's refinement afterwards.
    pub instruction_used: String,
    pub image: ImageRef,
    /// Critique computed on `image`; it yields the next instruction.
    #[serde(default)]
    pub verdict: Option<Critique>,
    #[serde(default)]
    pub scorer_score: Option<f64>,
    /// Raw text of the last thinker call on this step (empty if none).
    #[serde(default)]
    pub raw_thinker_text: String,
    /// Codes of format problems met while critiquing this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
    pub seed: u64,
}

impl Step {
    /// Score used to pick the best step: the external score when present,
    /// else the thinker's own aggregate.
    pub fn selection_score(&self, rule: ScoreAggregate) -> Option<f64> {
        self.scorer_score
            .or_else(|| self.verdict.as_ref().and_then(|c| c.predicted_score(rule)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    StoppedByThreshold,
    StoppedByExpert,
    MaxTurnsReached,
    Aborted,
}

impl SessionStatus {
    pub const TERMINAL: [SessionStatus; 4] = [
        SessionStatus::StoppedByThreshold,
        SessionStatus::StoppedByExpert,
        SessionStatus::MaxTurnsReached,
        SessionStatus::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Running => "running",
            SessionStatus::StoppedByThreshold => "stopped_by_threshold",
            SessionStatus::StoppedByExpert => "stopped_by_expert",
            SessionStatus::MaxTurnsReached => "max_turns_reached",
            SessionStatus::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub task: EditTask,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub status: SessionStatus,
    #[serde(default)]
    pub best_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("trajectory has no step with a selection score")]
    NoScoreableStep,
}

/// Highest-scoring step; ties go to the earliest step.
pub fn select_best(traj: &Trajectory, rule: ScoreAggregate) -> Result<&Step, SelectError> {
    let mut best: Option<(&Step, f64)> = None;
    for step in &traj.steps {
        if let Some(s) = step.selection_score(rule) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((step, s));
            }
        }
    }
    best.map(|(step, _)| step).ok_or(SelectError::NoScoreableStep)
}

impl Trajectory {
    pub fn new(task: EditTask, seed: u64) -> Self {
        Trajectory {
            trajectory_id: format!("{}-{:016x}", task.task_id, seed),
            task,
            seed,
            steps: Vec::new(),
            status: SessionStatus::Running,
            best_index: None,
            abort_cause: None,
        }
    }

    pub fn step(&self, index: u32) -> Option<&Step> {
        self.steps
            .get(index.checked_sub(1)? as usize)
            .filter(|s| s.index == index)
    }

    pub fn best_step(&self) -> Option<&Step> {
        self.best_index.and_then(|k| self.step(k))
    }

    pub fn best_score(&self, rule: ScoreAggregate) -> Option<f64> {
        self.best_step().and_then(|s| s.selection_score(rule))
    }

    /// Checks the structural invariants every finished trajectory satisfies.
    pub fn check(&self, rule: ScoreAggregate) -> Result<(), String> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.index as usize != i + 1 {
                return Err(format!("step {} sits at position {}", step.index, i + 1));
            }
            if let Some(s) = step.scorer_score {
                if !score_in_range(s) {
                    return Err(format!("step {} has scorer score {s}", step.index));
                }
            }
        }
        match self.status {
            SessionStatus::Running => return Err("trajectory is still running".into()),
            SessionStatus::Aborted => {}
            _ if self.steps.is_empty() => return Err("finished trajectory has no steps".into()),
            _ => {}
        }
        if let Some(k) = self.best_index {
            let best = select_best(self, rule).map_err(|e| e.to_string())?;
            if best.index != k {
                return Err(format!("best_index {k} but argmax is step {}", best.index));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Turn budget: at most this many editor calls and thinker calls.
    pub max_turns: u32,
    /// A verdict whose aggregate reaches this score ends the session.
    pub stop_threshold: f64,
    pub aggregate: ScoreAggregate,
    /// Score every step with the external scorer, not only the final one.
    pub run_scorer_each_step: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_turns: 5,
            stop_threshold: 8.0,
            aggregate: ScoreAggregate::Mean,
            run_scorer_each_step: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopConfigError {
    #[error("max_turns must be at least 1")]
    ZeroTurns,
    #[error("stop_threshold {0} is outside [0, 10]")]
    Threshold(f64),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopConfigError> {
        if self.max_turns == 0 {
            return Err(LoopConfigError::ZeroTurns);
        }
        if !score_in_range(self.stop_threshold) {
            return Err(LoopConfigError::Threshold(self.stop_threshold));
        }
        Ok(())
    }
}

fn expert_error_code(e: &ExpertParseError) -> &'static str {
    match e {
        ExpertParseError::NoVerdictObject => "expert-no-verdict",
        ExpertParseError::InvalidField { .. } => "expert-invalid-field",
        ExpertParseError::Inconsistent { .. } => "expert-inconsistent",
    }
}

struct CritiqueOutcome {
    critique: Option<Critique>,
    raw: String,
    violations: Vec<String>,
}

/// Session driver; counts calls per role so the budget holds for any
/// backend behaviour.
struct Session<'a> {
    backends: &'a Backends,
    cfg: &'a LoopConfig,
    thinker_calls: u32,
}

impl Session<'_> {
    /// `turn` is the index of the step being critiqued; every later turn
    /// short of the last still needs one call, so retries only spend slack.
    fn critique(&mut self, request: &ThinkRequest<'_>, turn: u32) -> Result<CritiqueOutcome, BackendError> {
        let reserved = self.cfg.max_turns.saturating_sub(turn + 1);
        let mode = self.backends.thinker.mode();
        let mut violations = Vec::new();
        let mut raw = String::new();
        // One re-invocation after a parse failure, budget permitting.
        for attempt in 0..2 {
            if attempt > 0 && self.thinker_calls + reserved >= self.cfg.max_turns {
                break;
            }
            self.thinker_calls += 1;
            raw = self.backends.thinker.think(request)?;
            let parsed = match mode {
                ThinkerMode::Verdict => parse_thinker_output(&raw).map(Critique::Verdict).map_err(|v| v.code()),
                ThinkerMode::Expert => parse_expert_output(&raw)
                    .map(Critique::Expert)
                    .map_err(|e| expert_error_code(&e).to_string()),
            };
            match parsed {
                Ok(critique) => {
                    return Ok(CritiqueOutcome {
                        critique: Some(critique),
                        raw,
                        violations,
                    })
                }
                Err(code) => violations.push(code),
            }
        }
        Ok(CritiqueOutcome {
            critique: None,
            raw,
            violations,
        })
    }

    fn external_score(&self, task: &EditTask, image: &ImageRef) -> Option<Result<f64, BackendError>> {
        let scorer = self.backends.scorer.as_ref()?;
        Some(
            scorer
                .score(&task.source, image, &task.original_instruction)
                .and_then(|s| {
                    if score_in_range(s) {
                        Ok(s)
                    } else {
                        Err(BackendError::UnparseableResponse(format!("scorer returned {s}")))
                    }
                }),
        )
    }
}

fn abort(mut traj: Trajectory, cause: String, rule: ScoreAggregate) -> Trajectory {
    log::warn!("{}: aborted: {cause}", traj.trajectory_id);
    traj.status = SessionStatus::Aborted;
    traj.abort_cause = Some(cause);
    traj.best_index = select_best(&traj, rule).ok().map(|s| s.index);
    traj
}

/// Runs one task to completion.
pub fn run_session(task: &EditTask, backends: &Backends, cfg: &LoopConfig, seed: u64) -> Trajectory {
    let mut traj = Trajectory::new(task.clone(), seed);
    let rule = cfg.aggregate;
    if let Err(e) = cfg.validate() {
        return abort(traj, format!("invalid loop config: {e}"), rule);
    }
    if let Err(e) = task.validate() {
        return abort(traj, e.to_string(), rule);
    }
    let mut session = Session {
        backends,
        cfg,
        thinker_calls: 0,
    };
    let mut instruction = task.original_instruction.clone();

    for turn in 1..=cfg.max_turns {
        let step_seed = seeds::derive_indexed(seed, "edit", u64::from(turn));
        let image = match backends.editor.edit(&task.source, &instruction, step_seed) {
            Ok(image) => image,
            Err(e) => return abort(traj, format!("editor failed at turn {turn}: {e}"), rule),
        };
        let mut step = Step {
            index: turn,
            instruction_used: instruction.clone(),
            image,
            verdict: None,
            scorer_score: None,
            raw_thinker_text: String::new(),
            violations: Vec::new(),
            seed: step_seed,
        };
        if cfg.run_scorer_each_step {
            match session.external_score(task, &step.image) {
                Some(Ok(s)) => step.scorer_score = Some(s),
                Some(Err(e)) => {
                    traj.steps.push(step);
                    return abort(traj, format!("scorer failed at turn {turn}: {e}"), rule);
                }
                None => {}
            }
        }

        if turn == cfg.max_turns {
            traj.steps.push(step);
            traj.status = SessionStatus::MaxTurnsReached;
            break;
        }

        let outcome = {
            let request = ThinkRequest {
                source: &task.source,
                previous_edit: &step.image,
                original_instruction: &task.original_instruction,
                previous_instruction: &instruction,
            };
            session.critique(&request, turn)
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                traj.steps.push(step);
                return abort(traj, format!("thinker failed at turn {turn}: {e}"), rule);
            }
        };
        step.raw_thinker_text = outcome.raw;
        step.violations = outcome.violations;
        step.verdict = outcome.critique;

        let mut stop = None;
        match &step.verdict {
            Some(Critique::Verdict(v)) if v.aggregate(rule) >= cfg.stop_threshold => {
                stop = Some(SessionStatus::StoppedByThreshold);
            }
            Some(Critique::Expert(e)) if e.is_satisfied => stop = Some(SessionStatus::StoppedByExpert),
            Some(c) => instruction = c.next_instruction(&instruction).to_string(),
            // Unparseable twice: the next edit reuses the current instruction.
            None => {}
        }
        log::debug!(
            "{}: turn {turn} score {:?} violations {:?}",
            traj.trajectory_id,
            step.selection_score(rule),
            step.violations
        );
        traj.steps.push(step);
        if let Some(status) = stop {
            traj.status = status;
            break;
        }
    }

    // The last image of an exhausted budget has no critique; score it now
    // if a scorer exists so it can compete for best step.
    if let Some(last) = traj.steps.last_mut() {
        if last.selection_score(rule).is_none() {
            match session.external_score(task, &last.image) {
                Some(Ok(s)) => last.scorer_score = Some(s),
                Some(Err(e)) => log::warn!("{}: final-step scoring failed: {e}", traj.trajectory_id),
                None => {}
            }
        }
    }
    traj.best_index = select_best(&traj, rule).ok().map(|s| s.index);
    log::info!(
        "{}: {} after {} turns, best step {:?}",
        traj.trajectory_id,
        traj.status.as_str(),
        traj.steps.len(),
        traj.best_index
    );
    traj
}

/// Per-task seed: a function of the batch seed and the task id only.
pub fn task_seed(batch_seed: u64, task: &EditTask) -> u64 {
    seeds::derive(batch_seed, &task.task_id)
}

/// Runs every task with at most `parallelism` sessions in flight. Output
/// order matches input order and results do not depend on `parallelism`.
pub fn run_batch(
    tasks: &[EditTask],
    backends: &Backends,
    cfg: &LoopConfig,
    parallelism: usize,
    batch_seed: u64,
) -> Vec<Trajectory> {
    let workers = parallelism.max(1).min(tasks.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Trajectory>>> = Mutex::new(vec![None; tasks.len()]);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(task) = tasks.get(i) else { break };
                let seed = task_seed(batch_seed, task);
                let traj =
                    catch_unwind(AssertUnwindSafe(|| run_session(task, backends, cfg, seed))).unwrap_or_else(|_| {
                        abort(
                            Trajectory::new(task.clone(), seed),
                            "session panicked".into(),
                            cfg.aggregate,
                        )
                    });
                slots.lock().expect("result slots poisoned")[i] = Some(traj);
            });
        }
    });

    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|t| t.expect("every task produces a trajectory"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::{encode_target, SimEditor, SimScorer, SimThinker, SimWorld, SimWorldConfig};
    use crate::backends::{Editor, Scorer, Thinker};
    use crate::protocol::serialize_thinker_output;
    use proptest::prelude::*;
    use std::sync::atomic::AtomicU32;
    use std::sync::Arc;

    fn world(fidelity: f64, noise: f64) -> Arc<SimWorld> {
        Arc::new(
            SimWorldConfig {
                dimension: 2,
                goal: Some(vec![3.0, 4.0]),
                editor_fidelity: fidelity,
                noise_scale: noise,
                score_slope: 1.0,
                seed: 1,
            }
            .build()
            .unwrap(),
        )
    }

    fn sim_backends(w: &Arc<SimWorld>, scorer: bool) -> Backends {
        Backends::new(
            Arc::new(SimEditor::new(w.clone())),
            Arc::new(SimThinker::new(w.clone(), ThinkerMode::Verdict)),
            scorer.then(|| Arc::new(SimScorer::new(w.clone())) as Arc<dyn Scorer>),
        )
    }

    fn task(id: &str, instruction: &str) -> EditTask {
        EditTask {
            task_id: id.into(),
            source: ImageRef::from_vector(format!("{id}/src"), vec![0.0, 0.0]),
            original_instruction: instruction.into(),
            task_type: TaskType::Adjust,
        }
    }

    #[test]
    fn off_target_instruction_corrected_at_turn_two() {
        let w = world(1.0, 0.0);
        let t = task("a", &format!("move to {}", encode_target(&[0.0, 4.0])));
        let traj = run_session(&t, &sim_backends(&w, false), &LoopConfig::default(), 7);
        assert_eq!(traj.status, SessionStatus::StoppedByThreshold);
        assert_eq!(traj.steps.len(), 2);
        match traj.steps[1].verdict.as_ref().unwrap() {
            Critique::Verdict(v) => assert_eq!((v.semantic_score, v.quality_score), (10.0, 10.0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(traj.steps[0].selection_score(ScoreAggregate::Mean), Some(7.0));
        assert_eq!(traj.best_index, Some(2));
        traj.check(ScoreAggregate::Mean).unwrap();
    }

    #[test]
    fn on_target_instruction_stops_after_one_edit() {
        let w = world(1.0, 0.0);
        let t = task("a", &w.goal_instruction());
        let traj = run_session(&t, &sim_backends(&w, false), &LoopConfig::default(), 7);
        assert_eq!(traj.status, SessionStatus::StoppedByThreshold);
        assert_eq!(traj.steps.len(), 1);
    }

    #[test]
    fn single_turn_budget() {
        let w = world(0.5, 0.0);
        let cfg = LoopConfig {
            max_turns: 1,
            ..Default::default()
        };
        let counting = Counting::new(sim_backends(&w, true));
        let traj = run_session(&task("a", "vague"), &counting.backends(), &cfg, 1);
        assert_eq!(traj.status, SessionStatus::MaxTurnsReached);
        assert_eq!(traj.steps.len(), 1);
        assert!(traj.steps[0].verdict.is_none());
        assert_eq!(counting.edits(), 1);
        assert_eq!(counting.thinks(), 0);
        // Scored lazily for selection.
        assert_eq!(traj.best_index, Some(1));
        assert_eq!(traj.steps[0].scorer_score, Some(5.0));
    }

    #[test]
    fn final_step_without_scorer_loses_to_last_verdicted_step() {
        let w = world(0.5, 0.0);
        let cfg = LoopConfig {
            max_turns: 3,
            stop_threshold: 10.0,
            ..Default::default()
        };
        let traj = run_session(&task("a", "vague"), &sim_backends(&w, false), &cfg, 1);
        assert_eq!(traj.status, SessionStatus::MaxTurnsReached);
        assert!(traj.steps[2].selection_score(ScoreAggregate::Mean).is_none());
        assert_eq!(traj.best_index, Some(2));
    }

    #[test]
    fn select_best_ties_and_argmax() {
        let w = world(0.5, 0.0);
        let mut traj = run_session(
            &task("a", "x"),
            &sim_backends(&w, true),
            &LoopConfig {
                max_turns: 3,
                stop_threshold: 10.0,
                run_scorer_each_step: true,
                ..Default::default()
            },
            3,
        );
        for (scores, want) in [(vec![5.0, 8.0, 8.0], 2), (vec![9.0, 3.0, 1.0], 1)] {
            for (s, v) in traj.steps.iter_mut().zip(&scores) {
                s.scorer_score = Some(*v);
            }
            assert_eq!(select_best(&traj, ScoreAggregate::Mean).unwrap().index, want);
        }
        traj.steps.clear();
        assert_eq!(
            select_best(&traj, ScoreAggregate::Mean),
            Err(SelectError::NoScoreableStep)
        );
    }

    proptest! {
        #[test]
        fn select_best_matches_scan(scores in proptest::collection::vec(proptest::option::of(0u8..=10), 1..8)) {
            let w = world(0.5, 0.0);
            let mut traj = Trajectory::new(task("p", "x"), 0);
            for (i, s) in scores.iter().enumerate() {
                traj.steps.push(Step {
                    index: i as u32 + 1,
                    instruction_used: "x".into(),
                    image: ImageRef::from_vector("i", w.goal.clone()),
                    verdict: None,
                    scorer_score: s.map(f64::from),
                    raw_thinker_text: String::new(),
                    violations: vec![],
                    seed: 0,
                });
            }
            // Brute force: first index whose score is >= every other score.
            let expected = (0..scores.len())
                .find(|&i| scores[i].is_some() && scores.iter().all(|o| o.is_none_or(|o| o <= scores[i].unwrap())))
                .map(|i| i as u32 + 1);
            let got = select_best(&traj, ScoreAggregate::Mean).ok().map(|s| s.index);
            prop_assert_eq!(got, expected);
        }
    }

    /// Wraps backends, counting calls per role.
    struct Counting {
        inner: Backends,
        edits: Arc<AtomicU32>,
        thinks: Arc<AtomicU32>,
    }

    struct CountEditor(Arc<dyn Editor>, Arc<AtomicU32>);
    struct CountThinker(Arc<dyn Thinker>, Arc<AtomicU32>);

    impl Editor for CountEditor {
        fn name(&self) -> &str {
            self.0.name()
        }
        fn edit(&self, s: &ImageRef, i: &str, seed: u64) -> Result<ImageRef, BackendError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            self.0.edit(s, i, seed)
        }
    }

    impl Thinker for CountThinker {
        fn name(&self) -> &str {
            self.0.name()
        }
        fn mode(&self) -> ThinkerMode {
            self.0.mode()
        }
        fn think(&self, r: &ThinkRequest<'_>) -> Result<String, BackendError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            self.0.think(r)
        }
    }

    impl Counting {
        fn new(inner: Backends) -> Self {
            Counting {
                inner,
                edits: Arc::default(),
                thinks: Arc::default(),
            }
        }
        fn backends(&self) -> Backends {
            Backends::new(
                Arc::new(CountEditor(self.inner.editor.clone(), self.edits.clone())),
                Arc::new(CountThinker(self.inner.thinker.clone(), self.thinks.clone())),
                self.inner.scorer.clone(),
            )
        }
        fn edits(&self) -> u32 {
            self.edits.load(Ordering::SeqCst)
        }
        fn thinks(&self) -> u32 {
            self.thinks.load(Ordering::SeqCst)
        }
    }

    struct Scripted(Vec<String>, AtomicUsize);

    impl Thinker for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn mode(&self) -> ThinkerMode {
            ThinkerMode::Verdict
        }
        fn think(&self, _: &ThinkRequest<'_>) -> Result<String, BackendError> {
            let i = self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0[i.min(self.0.len() - 1)].clone())
        }
    }

    #[test]
    fn parse_failure_retries_once_then_reuses_instruction() {
        let w = world(0.5, 0.0);
        let good = serialize_thinker_output(&ThinkerVerdict::new("r", 2.0, 2.0, w.goal_instruction()).unwrap());
        let thinker = Arc::new(Scripted(
            vec!["garbage".into(), "<think>x</think>".into(), "again".into(), good],
            AtomicUsize::new(0),
        ));
        let calls = thinker.clone();
        let backends = Backends::new(Arc::new(SimEditor::new(w.clone())), thinker, None);
        let cfg = LoopConfig {
            max_turns: 5,
            stop_threshold: 9.0,
            ..Default::default()
        };
        let traj = run_session(&task("a", "first"), &backends, &cfg, 2);
        assert_eq!(traj.steps[0].violations, vec!["missing-think", "missing-score"]);
        assert!(traj.steps[0].verdict.is_none());
        assert_eq!(traj.steps[1].instruction_used, "first");
        // Turn 1 spent the only spare call, so turn 2 gets no retry.
        assert_eq!(traj.steps[1].violations, vec!["missing-think"]);
        assert!(traj.steps[1].verdict.is_none());
        assert_eq!(traj.steps[2].instruction_used, "first");
        assert!(traj.steps[2].verdict.is_some());
        assert_eq!(traj.steps[3].instruction_used, w.goal_instruction());
        assert!(calls.1.load(Ordering::SeqCst) <= 5);
    }

    #[test]
    fn batch_isolates_failures_and_keeps_order() {
        struct Flaky(Arc<dyn Editor>);
        impl Editor for Flaky {
            fn name(&self) -> &str {
                "flaky"
            }
            fn edit(&self, s: &ImageRef, i: &str, seed: u64) -> Result<ImageRef, BackendError> {
                if s.id.starts_with("dead") {
                    Err(BackendError::Unreachable("gone".into()))
                } else {
                    self.0.edit(s, i, seed)
                }
            }
        }
        let w = world(0.5, 0.05);
        let base = sim_backends(&w, true);
        let backends = Backends::new(
            Arc::new(Flaky(base.editor.clone())),
            base.thinker.clone(),
            base.scorer.clone(),
        );
        let tasks: Vec<EditTask> = (0..10)
            .map(|i| task(&if i == 4 { "dead".to_string() } else { format!("t{i}") }, "x"))
            .collect();
        let out = run_batch(&tasks, &backends, &LoopConfig::default(), 4, 9);
        assert_eq!(out.len(), 10);
        for (t, traj) in tasks.iter().zip(&out) {
            assert_eq!(t.task_id, traj.task.task_id);
        }
        let aborted = out.iter().filter(|t| t.status == SessionStatus::Aborted).count();
        assert_eq!(aborted, 1);
        assert_eq!(out[4].status, SessionStatus::Aborted);
        assert!(out[4].steps.is_empty());
        assert!(run_batch(&[], &backends, &LoopConfig::default(), 4, 9).is_empty());
    }

    #[test]
    fn batch_is_independent_of_parallelism() {
        let w = world(0.5, 0.05);
        let b = sim_backends(&w, true);
        let tasks: Vec<EditTask> = (0..10).map(|i| task(&format!("t{i}"), "x")).collect();
        let one = run_batch(&tasks, &b, &LoopConfig::default(), 1, 42);
        let eight = run_batch(&tasks, &b, &LoopConfig::default(), 8, 42);
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&eight).unwrap()
        );
    }

    #[test]
    fn invalid_config_aborts() {
        let w = world(0.5, 0.0);
        let traj = run_session(
            &task("a", "x"),
            &sim_backends(&w, false),
            &LoopConfig {
                max_turns: 0,
                ..Default::default()
            },
            0,
        );
        assert_eq!(traj.status, SessionStatus::Aborted);
        let traj = run_session(&task("a", "  "), &sim_backends(&w, false), &LoopConfig::default(), 0);
        assert_eq!(traj.status, SessionStatus::Aborted);
    }
}
