//! Acceptance suite. Each test checks one criterion and writes a single
//! PASS/FAIL line straight to stderr, so the lines show up even when the
//! harness captures output.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use editrefine::backends::sim::{SimEditor, SimScorer, SimTaskSpec, SimThinker, SimWorld, SimWorldConfig};
use editrefine::backends::{BackendError, Backends, Editor, ImageRef, Scorer, ThinkRequest, Thinker, ThinkerMode};
use editrefine::bench::{render_report, run_ablation, TurnReport};
use editrefine::datapipe::store::{read_jsonl, write_jsonl, JsonlWriter, Scan};
use editrefine::datapipe::{
    assign_samples, balance, filter_trajectory, partition, population_variance, score_bin, step_scores, truncate,
    unroll, verify_lineage, BalanceSpec, FilterDecision, PartitionConfig, Provenance, Stage, Store, TrainingSample,
    TrajectoryRecord,
};
use editrefine::protocol::{judge_format, parse_thinker_output, serialize_thinker_output, ThinkerVerdict};
use editrefine::rewards::{critic_reward, edit_reward, group_advantages, overall_reward, FormatMode, RewardConfig};
use editrefine::session::{
    run_batch, run_session, Critique, EditTask, LoopConfig, SessionStatus, Step, TaskType, Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} - {detail}");
}

/// Prints the criterion line, then fails the test if it did not pass.
fn conclude(n: u32, failures: &[String], detail: &str) {
    report(n, failures.is_empty(), detail);
    assert!(failures.is_empty(), "criterion {n} failures:\n{}", failures.join("\n"));
}

fn check_runtime(failures: &mut Vec<String>, started: Instant, limit: Duration) -> Duration {
    let elapsed = started.elapsed();
    if elapsed >= limit {
        failures.push(format!("runtime {elapsed:?} exceeds {limit:?}"));
    }
    elapsed
}

// ---------------------------------------------------------------- criterion 1

const WORDS: [&str; 16] = [
    "the",
    "hat",
    "is",
    "slightly",
    "off-center",
    "a<b",
    "x > y",
    "{\"k\": 1}",
    "colour",
    "naïve",
    "✓",
    "sky",
    "\n",
    "\t",
    "score:",
    "50%",
];

fn random_text(rng: &mut ChaCha8Rng, min_words: usize) -> String {
    let n = rng.random_range(min_words..12);
    let mut words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    words.push("end");
    words.join(" ")
}

fn random_score(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => f64::from(rng.random_range(0..=10)),
        1 => f64::from(rng.random_range(0..=40)) / 4.0,
        _ => rng.random_range(0.0..=10.0),
    }
}

fn malformed_cases() -> Vec<(String, &'static str)> {
    let ok_score = r#"{"semantic": 7, "quality": 8}"#;
    let full = |think: &str, score: &str, answer: &str| {
        format!("<think>{think}</think><score>{score}</score><answer>{answer}</answer>")
    };
    let mut base: Vec<(String, &'static str)> = vec![
        (String::new(), "missing-think"),
        ("just prose, no tags".into(), "missing-think"),
        (format!("<score>{ok_score}</score><answer>a</answer>"), "missing-think"),
        ("<think>a</think><answer>b</answer>".into(), "missing-score"),
        (format!("<think>a</think><score>{ok_score}</score>"), "missing-answer"),
        (
            format!("<think>a<score>{ok_score}</score><answer>b</answer>"),
            "missing-think",
        ),
        (
            "<think>a</think><score>{\"semantic\": 1, \"quality\": 1}<answer>b</answer>".into(),
            "missing-score",
        ),
        (
            format!("<think>a</think><score>{ok_score}</score><answer>b"),
            "missing-answer",
        ),
        (
            format!("<THINK>a</THINK><score>{ok_score}</score><answer>b</answer>"),
            "missing-think",
        ),
        (
            format!("<think >a</think><score>{ok_score}</score><answer>b</answer>"),
            "missing-think",
        ),
        (
            format!("<think>a</think><scores>{ok_score}</scores><answer>b</answer>"),
            "missing-score",
        ),
        (
            format!("<think>a</think><score>{ok_score}</score><answers>b</answers>"),
            "missing-answer",
        ),
        (
            format!("<think>a</think><think>b</think><score>{ok_score}</score><answer>c</answer>"),
            "duplicate-think",
        ),
        (
            format!("<think>a</think><score>{ok_score}</score><score>{ok_score}</score><answer>c</answer>"),
            "duplicate-score",
        ),
        (
            format!("<think>a</think><score>{ok_score}</score><answer>c</answer><answer>d</answer>"),
            "duplicate-answer",
        ),
        (
            format!("<think>a</think></think><score>{ok_score}</score><answer>c</answer>"),
            "duplicate-think",
        ),
        (
            format!("<think>a</think><score>{ok_score}</score><answer>c</answer></answer>"),
            "duplicate-answer",
        ),
        (
            format!("<score>{ok_score}</score><think>a</think><answer>b</answer>"),
            "tag-order",
        ),
        (
            format!("<think>a</think><answer>b</answer><score>{ok_score}</score>"),
            "tag-order",
        ),
        (
            format!("<answer>b</answer><score>{ok_score}</score><think>a</think>"),
            "tag-order",
        ),
        (
            format!("<answer>b</answer><think>a</think><score>{ok_score}</score>"),
            "tag-order",
        ),
        (
            format!("<score>{ok_score}</score><answer>b</answer><think>a</think>"),
            "tag-order",
        ),
        (
            format!("</think>a<think><score>{ok_score}</score><answer>b</answer>"),
            "tag-order",
        ),
        (
            format!("<think>a<score>{ok_score}</score></think><answer>b</answer>"),
            "tag-order",
        ),
        (
            format!("<think>a<answer>b</answer></think><score>{ok_score}</score>"),
            "tag-order",
        ),
    ];
    for body in [
        "",
        "7",
        "{}",
        r#"{"semantic": 7}"#,
        r#"{"quality": 7}"#,
        r#"{"semantic": "7", "quality": 3}"#,
        "{semantic: 7, quality: 3}",
        "[7]",
        "[7, 3, 1]",
        r#"["7", 3]"#,
        "null",
        r#"{"semantic": 7, "quality": 3"#,
        r#"{"semantic": null, "quality": 3}"#,
        r#"{"semantic": 7, "quality": 3} trailing"#,
    ] {
        base.push((full("a", body, "b"), "malformed-score"));
    }
    for body in [
        r#"{"semantic": 11, "quality": 3}"#,
        r#"{"semantic": -1, "quality": 3}"#,
        r#"{"semantic": 7, "quality": 10.5}"#,
        r#"{"semantic": 100, "quality": 100}"#,
        r#"{"semantic": -0.01, "quality": 5}"#,
        "[11, 2]",
        r#"{"semantic": 10.000001, "quality": 0}"#,
    ] {
        base.push((full("a", body, "b"), "score-out-of-range"));
    }
    for answer in ["", " ", "\n\t ", "\n"] {
        base.push((full("a", ok_score, answer), "empty-answer"));
    }
    let wrapped: Vec<(String, &'static str)> = base
        .iter()
        .map(|(raw, code)| (format!("Here is my review.\n{raw}\nThanks."), *code))
        .collect();
    base.extend(wrapped);
    base
}

#[test]
fn criterion_1_protocol_roundtrip() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let v = ThinkerVerdict::new(
            random_text(&mut rng, 0),
            random_score(&mut rng),
            random_score(&mut rng),
            random_text(&mut rng, 1),
        )
        .expect("generated verdicts are valid");
        match parse_thinker_output(&serialize_thinker_output(&v)) {
            Ok(back) if back == v => {}
            other => failures.push(format!("verdict {i} {v:?} came back as {other:?}")),
        }
    }
    let cases = malformed_cases();
    if cases.len() != 100 {
        failures.push(format!("expected 100 malformed cases, built {}", cases.len()));
    }
    for (raw, code) in &cases {
        match parse_thinker_output(raw) {
            Err(v) if v.code() == *code => {}
            other => failures.push(format!("{raw:?}: expected {code}, got {other:?}")),
        }
        if judge_format(raw).valid {
            failures.push(format!("{raw:?}: judged valid"));
        }
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(5));
    conclude(
        1,
        &failures,
        &format!("1000 roundtrips, {} malformed inputs, {elapsed:.2?}", cases.len()),
    );
}

// ---------------------------------------------------------------- criterion 2

fn provenance() -> Provenance {
    Provenance {
        editor: "sim-editor".into(),
        thinker: "sim-expert".into(),
        scorer: Some("sim-scorer".into()),
    }
}

fn record_from_scores(id: usize, scores: &[f64]) -> TrajectoryRecord {
    let task = EditTask {
        task_id: format!("seq-{id}"),
        source: ImageRef::from_vector("src", vec![0.0]),
        original_instruction: "edit".into(),
        task_type: TaskType::Other,
    };
    let mut traj = Trajectory::new(task, id as u64);
    for (i, s) in scores.iter().enumerate() {
        traj.steps.push(Step {
            index: i as u32 + 1,
            instruction_used: "edit".into(),
            image: ImageRef::from_vector(format!("img-{i}"), vec![*s]),
            verdict: None,
            scorer_score: Some(*s),
            raw_thinker_text: String::new(),
            violations: Vec::new(),
            seed: 0,
        });
    }
    traj.status = SessionStatus::MaxTurnsReached;
    let mut rec = TrajectoryRecord::new(traj, provenance());
    rec.created_at = "1970-01-01T00:00:00Z".into();
    rec
}

/// Literal predicate: keep iff some step after the first scores at least the
/// first; truncate at the earliest overall maximum.
fn oracle_filter(scores: &[f64]) -> Option<u32> {
    if scores.len() < 2 {
        return None;
    }
    let first = scores[0];
    if !scores[1..].iter().any(|&s| s >= first) {
        return None;
    }
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    scores.iter().position(|&s| s == max).map(|i| i as u32 + 1)
}

#[test]
fn criterion_2_filter_oracle() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut kept = 0;
    for i in 0..2000 {
        let len = rng.random_range(1..=6);
        // The first 1000 are continuous; the rest are integers to exercise ties.
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if i < 1000 {
                    rng.random_range(0.0..=10.0)
                } else {
                    f64::from(rng.random_range(0..=10))
                }
            })
            .collect();
        let rec = record_from_scores(i, &scores);
        let got = match filter_trajectory(&rec).expect("scores present") {
            FilterDecision::Kept { k } => Some(k),
            FilterDecision::Rejected { .. } => None,
        };
        let want = oracle_filter(&scores);
        if got != want {
            failures.push(format!("{scores:?}: filter {got:?}, oracle {want:?}"));
            continue;
        }
        if let Some(k) = got {
            kept += 1;
            let t = truncate(&rec, k).expect("truncation succeeds");
            let kept_scores = step_scores(&t).unwrap();
            if kept_scores.as_slice() != &scores[..k as usize] {
                failures.push(format!("{scores:?}: truncated to {kept_scores:?}"));
            }
        }
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(5));
    conclude(
        2,
        &failures,
        &format!("2000 sequences ({kept} kept), zero mismatches required, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 3

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[test]
fn criterion_3_reward_identities() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raws = [
        serialize_thinker_output(&ThinkerVerdict::new("fine", 6.0, 7.0, "keep going").unwrap()),
        "<think>x</think><answer>y</answer>".to_string(),
        "<answer>y</answer><score>[1, 2]</score><think>x</think>".to_string(),
        "nothing".to_string(),
        "<think>a</think><score>{\"semantic\": 12, \"quality\": 1}</score><answer> </answer>".to_string(),
    ];
    for i in 0..1000 {
        let judgment = judge_format(&raws[rng.random_range(0..raws.len())]);
        let mut cut = [rng.random::<f64>(), rng.random::<f64>()];
        cut.sort_by(f64::total_cmp);
        let cfg = RewardConfig {
            alpha: cut[0],
            beta: cut[1] - cut[0],
            gamma: 1.0 - cut[1],
            format_mode: if rng.random() {
                FormatMode::Binary
            } else {
                FormatMode::Graded
            },
            zero_on_invalid: rng.random(),
            ..Default::default()
        };
        let verdict = ThinkerVerdict::new("r", random_score(&mut rng), random_score(&mut rng), "p").unwrap();
        let expert = random_score(&mut rng);
        let r_critic = critic_reward(&verdict, expert, cfg.aggregate);
        if r_critic > 0.0 {
            failures.push(format!("tuple {i}: critic reward {r_critic} > 0"));
        }
        let (after, before) = (random_score(&mut rng), random_score(&mut rng));
        let r_edit = edit_reward(after, before);
        if r_edit != -edit_reward(before, after) {
            failures.push(format!(
                "tuple {i}: edit reward not antisymmetric for ({after}, {before})"
            ));
        }
        let b = match overall_reward(&judgment, r_critic, r_edit, &cfg) {
            Ok(b) => b,
            Err(e) => {
                failures.push(format!("tuple {i}: {e}"));
                continue;
            }
        };
        let r_format = match cfg.format_mode {
            FormatMode::Binary => f64::from(u8::from(judgment.valid)),
            FormatMode::Graded => (1.0 - judgment.violations.len() as f64 / 5.0).max(0.0),
        };
        let zeroed = cfg.zero_on_invalid && !judgment.valid;
        let expected = cfg.alpha * r_format
            + if zeroed {
                0.0
            } else {
                cfg.beta * r_critic + cfg.gamma * r_edit
            };
        if (b.r_overall - expected).abs() > 1e-9 || b.r_format != r_format {
            failures.push(format!(
                "tuple {i}: overall {} vs reconstruction {expected}",
                b.r_overall
            ));
        }
    }
    for g in 0..1000 {
        let size = if g % 2 == 0 { 8 } else { rng.random_range(1..=16) };
        let rewards: Vec<f64> = if g % 50 == 0 {
            vec![rng.random_range(-3.0..3.0); size]
        } else {
            (0..size).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let adv = group_advantages(&rewards);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        if mean.abs() > 1e-9 {
            failures.push(format!("group {g}: advantage mean {mean}"));
        }
        if first_argmax(&adv) != first_argmax(&rewards) {
            failures.push(format!("group {g}: argmax moved"));
        }
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(5));
    conclude(
        3,
        &failures,
        &format!("1000 reward tuples and 1000 groups, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 4

struct CountingEditor {
    calls: AtomicU32,
    fail: bool,
}

impl Editor for CountingEditor {
    fn name(&self) -> &str {
        "counting-editor"
    }
    fn edit(&self, source: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail {
            return Err(BackendError::Unreachable("editor is down".into()));
        }
        Ok(ImageRef::from_vector(
            format!("{}:{instruction}:{seed}", source.id),
            vec![seed as f64],
        ))
    }
}

enum Behaviour {
    Malformed,
    Perfect,
    Middling,
    Unreachable,
    ExpertSatisfied,
    ExpertNever,
}

struct ScriptedThinker {
    calls: AtomicU32,
    behaviour: Behaviour,
}

impl Thinker for ScriptedThinker {
    fn name(&self) -> &str {
        "scripted-thinker"
    }
    fn mode(&self) -> ThinkerMode {
        match self.behaviour {
            Behaviour::ExpertSatisfied | Behaviour::ExpertNever => ThinkerMode::Expert,
            _ => ThinkerMode::Verdict,
        }
    }
    fn think(&self, _: &ThinkRequest<'_>) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let verdict = |s: f64| serialize_thinker_output(&ThinkerVerdict::new("ok", s, s, format!("try {n}")).unwrap());
        match self.behaviour {
            Behaviour::Malformed => Ok("<think>never closes".into()),
            Behaviour::Perfect => Ok(verdict(10.0)),
            Behaviour::Middling => Ok(verdict(5.0)),
            Behaviour::Unreachable => Err(BackendError::Unreachable("thinker is down".into())),
            Behaviour::ExpertSatisfied => {
                Ok(r#"{"is_satisfied": true, "reason": "done", "new_rewritten_prompt": null}"#.into())
            }
            Behaviour::ExpertNever => Ok(format!(
                r#"{{"is_satisfied": false, "reason": "no", "new_rewritten_prompt": "again {n}"}}"#
            )),
        }
    }
}

fn status_postconditions(traj: &Trajectory, cfg: &LoopConfig) -> Result<(), String> {
    traj.check(cfg.aggregate)?;
    let scores: Vec<f64> = traj
        .steps
        .iter()
        .filter_map(|s| s.verdict.as_ref().and_then(|c| c.predicted_score(cfg.aggregate)))
        .collect();
    match traj.status {
        SessionStatus::StoppedByThreshold => {
            let last = traj
                .steps
                .last()
                .and_then(|s| s.verdict.as_ref())
                .and_then(|c| c.predicted_score(cfg.aggregate));
            if !matches!(last, Some(s) if s >= cfg.stop_threshold) {
                return Err(format!("stopped by threshold but final verdict scored {last:?}"));
            }
        }
        SessionStatus::MaxTurnsReached => {
            if let Some(s) = scores.iter().find(|s| **s >= cfg.stop_threshold) {
                return Err(format!("max turns reached despite verdict {s}"));
            }
            if traj.steps.len() != cfg.max_turns as usize {
                return Err(format!("max turns reached after {} steps", traj.steps.len()));
            }
        }
        SessionStatus::StoppedByExpert => {
            let satisfied = matches!(
                traj.steps.last().and_then(|s| s.verdict.as_ref()),
                Some(Critique::Expert(e)) if e.is_satisfied
            );
            if !satisfied {
                return Err("stopped by expert without a satisfied verdict".into());
            }
        }
        SessionStatus::Aborted => {
            if traj.abort_cause.is_none() {
                return Err("aborted without a cause".into());
            }
        }
        SessionStatus::Running => return Err("still running".into()),
    }
    Ok(())
}

#[test]
fn criterion_4_loop_termination() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let task = EditTask {
        task_id: "adversarial".into(),
        source: ImageRef::from_vector("src", vec![0.0]),
        original_instruction: "do something".into(),
        task_type: TaskType::Other,
    };
    let mut sessions = 0;
    for max_turns in 1..=6 {
        for threshold in [0.0, 5.0, 8.0, 10.0] {
            let cfg = LoopConfig {
                max_turns,
                stop_threshold: threshold,
                ..Default::default()
            };
            for (label, behaviour, editor_fails) in [
                ("malformed thinker", Behaviour::Malformed, false),
                ("failing editor", Behaviour::Perfect, true),
                ("always-10 thinker", Behaviour::Perfect, false),
                ("middling thinker", Behaviour::Middling, false),
                ("unreachable thinker", Behaviour::Unreachable, false),
                ("satisfied expert", Behaviour::ExpertSatisfied, false),
                ("never-satisfied expert", Behaviour::ExpertNever, false),
            ] {
                let editor = Arc::new(CountingEditor {
                    calls: AtomicU32::new(0),
                    fail: editor_fails,
                });
                let thinker = Arc::new(ScriptedThinker {
                    calls: AtomicU32::new(0),
                    behaviour,
                });
                let backends = Backends::new(editor.clone(), thinker.clone(), None);
                let traj = run_session(&task, &backends, &cfg, 17);
                sessions += 1;
                let (edits, thinks) = (
                    editor.calls.load(Ordering::SeqCst),
                    thinker.calls.load(Ordering::SeqCst),
                );
                let ctx = format!("{label}, N={max_turns}, tau={threshold}");
                if edits > max_turns || thinks > max_turns {
                    failures.push(format!("{ctx}: {edits} editor / {thinks} thinker calls"));
                }
                if let Err(e) = status_postconditions(&traj, &cfg) {
                    failures.push(format!("{ctx}: {e}"));
                }
                let expected = match label {
                    "malformed thinker" | "never-satisfied expert" => Some(SessionStatus::MaxTurnsReached),
                    "failing editor" | "unreachable thinker" if max_turns > 1 || label == "failing editor" => {
                        Some(SessionStatus::Aborted)
                    }
                    "always-10 thinker" if max_turns > 1 => Some(SessionStatus::StoppedByThreshold),
                    "satisfied expert" if max_turns > 1 => Some(SessionStatus::StoppedByExpert),
                    _ if max_turns == 1 => Some(SessionStatus::MaxTurnsReached),
                    _ => None,
                };
                if let Some(want) = expected {
                    if traj.status != want {
                        failures.push(format!("{ctx}: status {:?}, expected {want:?}", traj.status));
                    }
                }
                if label == "always-10 thinker" && max_turns > 1 && edits != 1 {
                    failures.push(format!("{ctx}: {edits} edits before stopping"));
                }
                if label == "failing editor" && !traj.steps.is_empty() {
                    failures.push(format!("{ctx}: aborted session kept {} steps", traj.steps.len()));
                }
            }
        }
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(5));
    conclude(
        4,
        &failures,
        &format!("{sessions} adversarial sessions within N calls per role, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 5

fn table4_world() -> Arc<SimWorld> {
    Arc::new(
        SimWorldConfig {
            dimension: 8,
            goal: None,
            editor_fidelity: 0.5,
            noise_scale: 0.05,
            score_slope: 1.0,
            seed: 2024,
        }
        .build()
        .expect("valid world"),
    )
}

fn sim_backends(world: &Arc<SimWorld>, mode: ThinkerMode) -> Backends {
    Backends::new(
        Arc::new(SimEditor::new(world.clone())),
        Arc::new(SimThinker::new(world.clone(), mode)),
        Some(Arc::new(SimScorer::new(world.clone())) as Arc<dyn Scorer>),
    )
}

fn table4_reports(parallelism: usize, seed: u64) -> Vec<TurnReport> {
    let world = table4_world();
    let tasks = world.generate_tasks(
        &SimTaskSpec {
            count: 100,
            ..Default::default()
        },
        seed,
    );
    let cfg = LoopConfig {
        stop_threshold: 9.5,
        ..Default::default()
    };
    run_ablation(
        &tasks,
        &sim_backends(&world, ThinkerMode::Verdict),
        &[1, 2, 4],
        &cfg,
        parallelism,
        seed,
    )
    .expect("ablation runs")
}

fn jsonl_bytes<T: serde::Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).unwrap();
        out.push(b'\n');
    }
    out
}

#[test]
fn criterion_5_turn_scaling() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let reports = table4_reports(1, 5);
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(60));
    let m: Vec<f64> = reports.iter().map(|r| r.mean_score).collect();
    for r in &reports {
        if r.excluded != 0 {
            failures.push(format!("budget {}: {} tasks excluded", r.turn_budget, r.excluded));
        }
    }
    if m[1] <= m[0] {
        failures.push(format!("budget 2 mean {} does not exceed budget 1 mean {}", m[1], m[0]));
    }
    if m[1] - m[0] < 1.0 {
        failures.push(format!("gain from budget 1 to 2 is {}, below 1.0", m[1] - m[0]));
    }
    if m[2] < m[1] - 0.05 {
        failures.push(format!(
            "budget 4 mean {} falls below budget 2 mean {} - 0.05",
            m[2], m[1]
        ));
    }
    let _ = writeln!(std::io::stderr(), "{}", render_report(&reports).table.trim_end());
    conclude(
        5,
        &failures,
        &format!(
            "mean best score b1={:.4} b2={:.4} b4={:.4}, {elapsed:.2?}",
            m[0], m[1], m[2]
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

struct PipelineRun {
    raw: usize,
    truncated: Vec<TrajectoryRecord>,
    samples: Vec<TrainingSample>,
    balanced: Vec<TrainingSample>,
    rl: Vec<TrajectoryRecord>,
    sft: Vec<TrajectoryRecord>,
    rl_samples: Vec<TrainingSample>,
    sft_samples: Vec<TrainingSample>,
    /// Stage outputs as written to disk.
    files: BTreeMap<String, Vec<u8>>,
}

fn pin_clock() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1767225600");
}

fn run_pipeline(dir: &Path, parallelism: usize, seed: u64) -> PipelineRun {
    pin_clock();
    let world = Arc::new(
        SimWorldConfig {
            dimension: 8,
            seed: 77,
            ..Default::default()
        }
        .build()
        .unwrap(),
    );
    let tasks = world.generate_tasks(
        &SimTaskSpec {
            count: 200,
            ..Default::default()
        },
        seed,
    );
    let backends = sim_backends(&world, ThinkerMode::Expert);
    let cfg = LoopConfig {
        run_scorer_each_step: true,
        ..Default::default()
    };
    let trajectories = run_batch(&tasks, &backends, &cfg, parallelism, seed);

    let store = Store::open(dir).unwrap();
    let writer = store.trajectory_writer().unwrap();
    for t in trajectories {
        store
            .append_trajectory(&writer, &TrajectoryRecord::new(t, Provenance::of(&backends)))
            .unwrap();
    }
    let raw = store.scan_trajectories(&[Stage::Raw]).unwrap().records;

    let mut truncated = Vec::new();
    for rec in &raw {
        if let FilterDecision::Kept { k } = filter_trajectory(rec).unwrap() {
            let t = truncate(rec, k).unwrap();
            store.append_trajectory(&writer, &t).unwrap();
            truncated.push(t);
        }
    }
    let samples: Vec<TrainingSample> = truncated.iter().flat_map(|r| unroll(r).unwrap()).collect();
    write_jsonl(store.path("samples.jsonl"), &samples).unwrap();
    let balanced = balance(
        &samples,
        &BalanceSpec {
            max_ratio: 1.5,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    write_jsonl(store.path("balanced.jsonl"), &balanced).unwrap();
    let split = partition(
        truncated.clone(),
        &PartitionConfig {
            variance_threshold: 1.0,
            rl_trajectory_budget: None,
            seed,
        },
    )
    .unwrap();
    let (sft_samples, rl_samples) = assign_samples(&balanced, &split).unwrap();
    write_jsonl(store.path("sft.jsonl"), &sft_samples).unwrap();
    write_jsonl(store.path("rl.jsonl"), &rl_samples).unwrap();

    let files = [
        "trajectories.jsonl",
        "samples.jsonl",
        "balanced.jsonl",
        "sft.jsonl",
        "rl.jsonl",
    ]
    .into_iter()
    .map(|f| (f.to_string(), std::fs::read(store.path(f)).unwrap()))
    .collect();
    PipelineRun {
        raw: raw.len(),
        truncated,
        samples,
        balanced,
        rl: split.rl,
        sft: split.sft,
        rl_samples,
        sft_samples,
        files,
    }
}

fn bucket_counts(samples: &[TrainingSample], spec: &BalanceSpec) -> BTreeMap<(TaskType, usize), usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts
            .entry((s.task_type, score_bin(&spec.score_edges, s.score_meta)))
            .or_insert(0) += 1;
    }
    counts
}

#[test]
fn criterion_6_pipeline_conservation() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let run = run_pipeline(dir.path(), 4, 6);

    if run.raw != 200 {
        failures.push(format!("expected 200 raw trajectories, found {}", run.raw));
    }
    for rec in &run.truncated {
        let s = step_scores(rec).unwrap();
        let last = *s.last().unwrap();
        if s.iter().any(|x| *x > last) || last < s[0] {
            failures.push(format!("{}: truncated record does not end at its maximum", rec.id()));
        }
    }
    let expected_samples: usize = run
        .truncated
        .iter()
        .map(|r| r.trajectory.steps.iter().filter(|s| s.verdict.is_some()).count())
        .sum();
    if run.samples.len() != expected_samples {
        failures.push(format!(
            "{} samples, {} retained critiques",
            run.samples.len(),
            expected_samples
        ));
    }
    for samples in [&run.samples, &run.balanced, &run.sft_samples, &run.rl_samples] {
        if let Err(e) = verify_lineage(samples, &run.truncated) {
            failures.push(e.to_string());
        }
    }
    let counts = bucket_counts(&run.balanced, &BalanceSpec::default());
    let (max, min) = (
        counts.values().max().copied().unwrap_or(0),
        counts.values().min().copied().unwrap_or(0),
    );
    if max as f64 > 1.5 * min as f64 {
        failures.push(format!("balanced bucket ratio {max}/{min} exceeds 1.5"));
    }
    let rl_ids: HashSet<&str> = run.rl.iter().map(|r| r.id()).collect();
    let sft_ids: HashSet<&str> = run.sft.iter().map(|r| r.id()).collect();
    if !rl_ids.is_disjoint(&sft_ids) || rl_ids.len() + sft_ids.len() != run.truncated.len() {
        failures.push("split is not a partition of the truncated records".into());
    }
    for r in &run.rl {
        if population_variance(&step_scores(r).unwrap()) <= 1.0 {
            failures.push(format!("{}: RL record with variance at most 1.0", r.id()));
        }
    }
    if run.sft_samples.len() + run.rl_samples.len() != run.balanced.len() {
        failures.push("sample manifests do not cover the balanced set".into());
    }
    let scanned: Scan<TrajectoryRecord> = read_jsonl(dir.path().join("trajectories.jsonl")).unwrap();
    if scanned.corrupt != 0 {
        failures.push(format!("{} corrupt lines in the trajectory log", scanned.corrupt));
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(30));
    conclude(
        6,
        &failures,
        &format!(
            "200 raw -> {} truncated -> {} samples -> {} balanced -> {} RL / {} SFT trajectories, {elapsed:.2?}",
            run.truncated.len(),
            run.samples.len(),
            run.balanced.len(),
            run.rl.len(),
            run.sft.len()
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_determinism() {
    let started = Instant::now();
    let mut failures = Vec::new();

    let first = jsonl_bytes(&table4_reports(1, 5));
    let again = jsonl_bytes(&table4_reports(1, 5));
    let parallel = jsonl_bytes(&table4_reports(8, 5));
    if first != again {
        failures.push("turn-scaling reports differ between identical runs".into());
    }
    if first != parallel {
        failures.push("turn-scaling reports differ between parallelism 1 and 8".into());
    }

    let runs: Vec<BTreeMap<String, Vec<u8>>> = [1, 1, 8]
        .into_iter()
        .map(|p| {
            let dir = tempfile::tempdir().unwrap();
            run_pipeline(dir.path(), p, 6).files
        })
        .collect();
    for (label, other) in [("repeat", &runs[1]), ("parallelism 8", &runs[2])] {
        for (name, bytes) in &runs[0] {
            if other.get(name) != Some(bytes) {
                failures.push(format!("{name} differs on {label}"));
            }
        }
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(120));
    conclude(
        7,
        &failures,
        &format!("criteria 5-6 outputs byte-identical across repeats and parallelism 1/8, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 8

#[derive(serde::Serialize, serde::Deserialize)]
struct StressRow {
    writer: usize,
    seq: usize,
    payload: String,
}

#[test]
fn criterion_8_store_durability() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stress.jsonl");
    let writer = JsonlWriter::open(&path).unwrap();
    std::thread::scope(|s| {
        for w in 0..8 {
            let writer = &writer;
            s.spawn(move || {
                for seq in 0..1250 {
                    let row = StressRow {
                        writer: w,
                        seq,
                        payload: "z".repeat((w * 31 + seq) % 200),
                    };
                    writer.append(&row).expect("append");
                }
            });
        }
    });
    drop(writer);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let well_formed = lines
        .iter()
        .filter(|l| serde_json::from_str::<StressRow>(l).is_ok())
        .count();
    if lines.len() != 10_000 || well_formed != 10_000 {
        failures.push(format!("{} lines, {well_formed} well-formed", lines.len()));
    }
    let scan: Scan<StressRow> = read_jsonl(&path).unwrap();
    let mut per_writer = [0usize; 8];
    for row in &scan.records {
        per_writer[row.writer] += 1;
    }
    if per_writer.iter().any(|c| *c != 1250) {
        failures.push(format!("per-writer counts {per_writer:?}"));
    }

    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(br#"{"writer": 3, "seq": 9999, "payl"#).unwrap();
    drop(f);
    let torn: Scan<StressRow> = read_jsonl(&path).unwrap();
    if torn.records.len() != 10_000 || torn.corrupt != 1 {
        failures.push(format!(
            "after a torn write: {} records, warning counter {}",
            torn.records.len(),
            torn.corrupt
        ));
    }
    let elapsed = check_runtime(&mut failures, started, Duration::from_secs(30));
    conclude(
        8,
        &failures,
        &format!("8 writers x 1250 records -> {well_formed} lines, torn tail skipped, {elapsed:.2?}"),
    );
}
