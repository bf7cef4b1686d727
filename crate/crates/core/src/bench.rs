//! Turn-budget ablation: the same tasks run at several turn budgets with
//! paired seeds, summarized per budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backends;
use crate::protocol::score_in_range;
use crate::session::{run_batch, EditTask, LoopConfig, SessionStatus, Trajectory};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("no turn budgets given")]
    NoBudgets,
    #[error("turn budget must be at least 1")]
    ZeroBudget,
    #[error("task set is empty")]
    NoTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    /// Best-step selection score; absent for excluded tasks.
    pub score: Option<f64>,
    pub status: SessionStatus,
    pub turns_used: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub stopped_by_threshold: usize,
    pub stopped_by_expert: usize,
    pub max_turns_reached: usize,
    pub aborted: usize,
}

impl StatusCounts {
    fn add(&mut self, status: SessionStatus) {
        match status {
            SessionStatus::StoppedByThreshold => self.stopped_by_threshold += 1,
            SessionStatus::StoppedByExpert => self.stopped_by_expert += 1,
            SessionStatus::MaxTurnsReached => self.max_turns_reached += 1,
            SessionStatus::Aborted | SessionStatus::Running => self.aborted += 1,
        }
    }

    pub fn get(&self, status: SessionStatus) -> usize {
        match status {
            SessionStatus::StoppedByThreshold => self.stopped_by_threshold,
            SessionStatus::StoppedByExpert => self.stopped_by_expert,
            SessionStatus::MaxTurnsReached => self.max_turns_reached,
            SessionStatus::Aborted | SessionStatus::Running => self.aborted,
        }
    }

    pub fn total(&self) -> usize {
        self.stopped_by_threshold + self.stopped_by_expert + self.max_turns_reached + self.aborted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_budget: u32,
    /// Mean over scored tasks; 0 when none scored.
    pub mean_score: f64,
    pub mean_turns_used: f64,
    pub status_counts: StatusCounts,
    /// Aborted or unscoreable tasks, left out of the means.
    pub excluded: usize,
    pub per_task: Vec<TaskScore>,
}

impl TurnReport {
    pub fn from_trajectories(turn_budget: u32, trajectories: &[Trajectory], cfg: &LoopConfig) -> Self {
        let mut status_counts = StatusCounts::default();
        let per_task: Vec<TaskScore> = trajectories
            .iter()
            .map(|t| {
                status_counts.add(t.status);
                let score = match t.status {
                    SessionStatus::Aborted => None,
                    _ => t.best_score(cfg.aggregate).filter(|s| score_in_range(*s)),
                };
                TaskScore {
                    task_id: t.task.task_id.clone(),
                    score,
                    status: t.status,
                    turns_used: t.steps.len(),
                }
            })
            .collect();
        let scored: Vec<&TaskScore> = per_task.iter().filter(|t| t.score.is_some()).collect();
        let n = scored.len();
        let (mean_score, mean_turns_used) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                scored.iter().filter_map(|t| t.score).sum::<f64>() / n as f64,
                scored.iter().map(|t| t.turns_used as f64).sum::<f64>() / n as f64,
            )
        };
        TurnReport {
            turn_budget,
            mean_score,
            mean_turns_used,
            status_counts,
            excluded: per_task.len() - n,
            per_task,
        }
    }
}

/// Runs every task at each budget. All budgets share the batch seed, so a
/// task gets the same per-task seed everywhere and runs are paired.
pub fn run_ablation(
    tasks: &[EditTask],
    backends: &Backends,
    budgets: &[u32],
    base: &LoopConfig,
    parallelism: usize,
    seed: u64,
) -> Result<Vec<TurnReport>, BenchError> {
    if budgets.is_empty() {
        return Err(BenchError::NoBudgets);
    }
    if budgets.contains(&0) {
        return Err(BenchError::ZeroBudget);
    }
    if tasks.is_empty() {
        return Err(BenchError::NoTasks);
    }
    Ok(budgets
        .iter()
        .map(|&b| {
            let cfg = LoopConfig {
                max_turns: b,
                ..base.clone()
            };
            let trajectories = run_batch(tasks, backends, &cfg, parallelism, seed);
            let report = TurnReport::from_trajectories(b, &trajectories, &cfg);
            log::info!(
                "budget {b}: mean score {:.4} over {} tasks",
                report.mean_score,
                tasks.len() - report.excluded
            );
            report
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub reports: Vec<TurnReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    pub summary: ReportSummary,
}

impl RenderedReport {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

/// Rounds half away from zero at two decimals, working on the shortest
/// decimal form of `x` so that e.g. 2.675 prints as 2.68.
pub fn round_half_up_2(x: f64) -> String {
    let text = format!("{}", x.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..2).map(|i| frac.get(i).copied().unwrap_or(0)));
    if frac.get(2).is_some_and(|d| *d >= 5) {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let body: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    let negative = x < 0.0 && digits.iter().any(|d| *d != 0);
    format!(
        "{}{}.{}",
        if negative { "-" } else { "" },
        &body[..split],
        &body[split..]
    )
}

pub const TABLE_HEADER: [&str; 4] = ["budget", "tasks", "mean_score", "mean_turns"];

/// Aligned text table plus the machine-readable summary.
pub fn render_report(reports: &[TurnReport]) -> RenderedReport {
    let mut header: Vec<String> = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(SessionStatus::TERMINAL.iter().map(|s| s.as_str().to_string()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.turn_budget.to_string(),
                (r.per_task.len() - r.excluded).to_string(),
                round_half_up_2(r.mean_score),
                round_half_up_2(r.mean_turns_used),
            ];
            row.extend(
                SessionStatus::TERMINAL
                    .iter()
                    .map(|s| r.status_counts.get(*s).to_string()),
            );
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut table = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(table, "{}", cells.join("  ").trim_end());
    }
    RenderedReport {
        table,
        summary: ReportSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            reports: reports.to_vec(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::{SimEditor, SimScorer, SimTaskSpec, SimThinker, SimWorldConfig};
    use crate::backends::ThinkerMode;
    use std::sync::Arc;

    fn setup() -> (Vec<EditTask>, Backends) {
        let world = Arc::new(
            SimWorldConfig {
                dimension: 4,
                seed: 3,
                ..Default::default()
            }
            .build()
            .unwrap(),
        );
        let tasks = world.generate_tasks(
            &SimTaskSpec {
                count: 20,
                ..Default::default()
            },
            5,
        );
        let backends = Backends::new(
            Arc::new(SimEditor::new(world.clone())),
            Arc::new(SimThinker::new(world.clone(), ThinkerMode::Verdict)),
            Some(Arc::new(SimScorer::new(world))),
        );
        (tasks, backends)
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up_2(2.675), "2.68");
        assert_eq!(round_half_up_2(2.665), "2.67");
        assert_eq!(round_half_up_2(9.995), "10.00");
        assert_eq!(round_half_up_2(7.3), "7.30");
        assert_eq!(round_half_up_2(0.0), "0.00");
        assert_eq!(round_half_up_2(-1.005), "-1.01");
        assert_eq!(round_half_up_2(-0.001), "0.00");
        assert_eq!(round_half_up_2(1e-7), "0.00");
    }

    #[test]
    fn budget_one_is_single_pass() {
        let (tasks, backends) = setup();
        let cfg = LoopConfig::default();
        let reports = run_ablation(&tasks, &backends, &[1], &cfg, 2, 11).unwrap();
        let one = &reports[0];
        let single = run_batch(&tasks, &backends, &LoopConfig { max_turns: 1, ..cfg }, 1, 11);
        for (t, s) in single.iter().zip(&one.per_task) {
            assert_eq!(s.score, t.steps[0].scorer_score);
            assert_eq!(s.turns_used, 1);
        }
        assert_eq!(one.status_counts.max_turns_reached, tasks.len());
    }

    #[test]
    fn reports_are_deterministic_and_consistent() {
        let (tasks, backends) = setup();
        let a = run_ablation(&tasks, &backends, &[1, 2, 4], &LoopConfig::default(), 4, 7).unwrap();
        let b = run_ablation(&tasks, &backends, &[1, 2, 4], &LoopConfig::default(), 1, 7).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert_eq!(r.status_counts.total(), tasks.len());
            let scores: Vec<f64> = r.per_task.iter().filter_map(|t| t.score).collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            assert!((mean - r.mean_score).abs() < 1e-9);
        }
        let rendered = render_report(&a);
        let lines: Vec<&str> = rendered.table.lines().collect();
        assert_eq!(lines.len(), 4);
        for line in &lines {
            assert_eq!(line.split_whitespace().count(), 4 + SessionStatus::TERMINAL.len());
        }
        let back: ReportSummary = serde_json::from_str(&rendered.summary_json()).unwrap();
        assert_eq!(back, rendered.summary);
    }

    #[test]
    fn validation() {
        let (tasks, backends) = setup();
        let cfg = LoopConfig::default();
        assert_eq!(
            run_ablation(&tasks, &backends, &[], &cfg, 1, 0),
            Err(BenchError::NoBudgets)
        );
        assert_eq!(
            run_ablation(&tasks, &backends, &[0], &cfg, 1, 0),
            Err(BenchError::ZeroBudget)
        );
        assert_eq!(run_ablation(&[], &backends, &[1], &cfg, 1, 0), Err(BenchError::NoTasks));
    }
}
