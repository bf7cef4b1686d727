use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use editrefine::bench::{render_report, run_ablation, BenchError};
use editrefine::datapipe::store::{read_jsonl, write_jsonl, BALANCED_FILE, RL_FILE, SAMPLES_FILE, SFT_FILE};
use editrefine::datapipe::{
    assign_samples, balance, filter_trajectory, partition, truncate, unroll, verify_lineage, FilterDecision,
    PipelineError, Provenance, RejectReason, Stage, Store, TrainingSample, TrajectoryRecord,
};
use editrefine::{run_batch, EditTask, SessionStatus};

use crate::config::AppConfig;
use crate::CliError;
use crate::{Command, Common, SessionArgs};

/// Runs one subcommand. `Ok(false)` means it finished but some tasks aborted.
pub fn dispatch(command: Command) -> Result<bool, CliError> {
    match command {
        Command::Run(args) => run(args, false),
        Command::Generate(args) => run(args, true),
        Command::Filter(common) => filter(&common),
        Command::Unroll(common) => unroll_cmd(&common),
        Command::Balance { common, input, out } => balance_cmd(&common, input, out),
        Command::Split { common, input, out } => split(&common, input, out),
        Command::Report {
            common,
            budgets,
            tasks,
            seed,
            parallelism,
            out,
        } => report(&common, &budgets.0, tasks, seed, parallelism, out),
        Command::SimTasks {
            config,
            out,
            seed,
            count,
        } => sim_tasks(&config, &out, seed, count),
    }
}

fn load(common: &Common) -> Result<(AppConfig, PathBuf), CliError> {
    let cfg = AppConfig::load(&common.config)?;
    let store = common.store.clone().unwrap_or_else(|| cfg.store.clone());
    Ok((cfg, store))
}

fn open_store(root: &Path, stage: &'static str) -> Result<Store, CliError> {
    Store::open(root).map_err(|e| CliError::stage(stage, "store-failure", e))
}

fn pipeline_err(stage: &'static str) -> impl Fn(PipelineError) -> CliError {
    move |e| CliError::stage(stage, e.code(), e)
}

pub fn read_tasks(path: &Path) -> Result<Vec<EditTask>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read tasks {}: {e}", path.display())))?;
    let mut tasks = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut task: EditTask =
            serde_json::from_str(&line).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        task.source
            .complete()
            .map_err(|e| CliError::Config(format!("{}:{}: source: {e}", path.display(), n + 1)))?;
        task.validate()
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn run(args: SessionArgs, generate: bool) -> Result<bool, CliError> {
    let stage = if generate { "generate" } else { "run" };
    let (cfg, root) = load(&args.common)?;
    let tasks = read_tasks(&args.tasks)?;
    let backends = cfg.build_backends()?;
    let mut loop_cfg = cfg.loop_cfg.clone();
    if generate {
        if backends.scorer.is_none() {
            return Err(CliError::Config(
                "backends.scorer: generate scores every step and needs a scorer".into(),
            ));
        }
        loop_cfg.run_scorer_each_step = true;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let parallelism = args.parallelism.unwrap_or(cfg.parallelism).max(1);

    let store = open_store(&root, stage)?;
    let writer = store
        .trajectory_writer()
        .map_err(|e| CliError::stage(stage, "store-failure", e))?;
    let trajectories = run_batch(&tasks, &backends, &loop_cfg, parallelism, seed);
    let provenance = Provenance::of(&backends);
    let (mut written, mut aborted) = (0, 0);
    for t in trajectories {
        if t.status == SessionStatus::Aborted {
            aborted += 1;
        }
        if !generate {
            let best = t
                .best_score(loop_cfg.aggregate)
                .map_or("-".to_string(), |s| format!("{s:.4}"));
            // A closed pipe on stdout should not stop the store writes.
            let _ = writeln!(std::io::stdout(), "{}\t{best}\t{}", t.task.task_id, t.status.as_str());
        }
        let record = TrajectoryRecord::new(t, provenance.clone());
        if store
            .append_trajectory(&writer, &record)
            .map_err(|e| CliError::stage(stage, "store-failure", e))?
        {
            written += 1;
        }
    }
    writer.sync().map_err(|e| CliError::stage(stage, "store-failure", e))?;
    let summary = format!(
        "{stage}: tasks = {}, written = {written}, aborted = {aborted}",
        tasks.len()
    );
    if generate {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(aborted == 0)
}

fn filter(common: &Common) -> Result<bool, CliError> {
    let (_, root) = load(common)?;
    let store = open_store(&root, "filter")?;
    let writer = store
        .trajectory_writer()
        .map_err(|e| CliError::stage("filter", "store-failure", e))?;
    let raw = store
        .scan_trajectories(&[Stage::Raw])
        .map_err(|e| CliError::stage("filter", "store-failure", e))?;
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut kept, mut written) = (0, 0);
    for record in &raw.records {
        if record.trajectory.status == SessionStatus::Aborted {
            *reasons.entry("aborted").or_default() += 1;
            continue;
        }
        // Sessions from `run` only score their best step.
        if record.trajectory.steps.iter().any(|s| s.scorer_score.is_none()) {
            *reasons.entry("unscored").or_default() += 1;
            continue;
        }
        match filter_trajectory(record).map_err(pipeline_err("filter"))? {
            FilterDecision::Kept { k } => {
                kept += 1;
                let t = truncate(record, k).map_err(pipeline_err("filter"))?;
                t.check().map_err(pipeline_err("filter"))?;
                if store
                    .append_trajectory(&writer, &t)
                    .map_err(|e| CliError::stage("filter", "store-failure", e))?
                {
                    written += 1;
                }
            }
            FilterDecision::Rejected { reason } => {
                let name = match reason {
                    RejectReason::SingleStep => "single_step",
                    RejectReason::NoImprovement => "no_improvement",
                };
                *reasons.entry(name).or_default() += 1;
            }
        }
    }
    writer
        .sync()
        .map_err(|e| CliError::stage("filter", "store-failure", e))?;
    let rejected: usize = reasons.values().sum();
    println!(
        "filter: in = {}, kept = {kept}, rejected = {rejected}, written = {written}",
        raw.records.len()
    );
    for (reason, n) in reasons {
        println!("  rejected {reason} = {n}");
    }
    Ok(true)
}

fn truncated_records(store: &Store, stage: &'static str) -> Result<Vec<TrajectoryRecord>, CliError> {
    Ok(store
        .scan_trajectories(&[Stage::Truncated])
        .map_err(|e| CliError::stage(stage, "store-failure", e))?
        .records)
}

fn unroll_cmd(common: &Common) -> Result<bool, CliError> {
    let (_, root) = load(common)?;
    let store = open_store(&root, "unroll")?;
    let records = truncated_records(&store, "unroll")?;
    let mut samples = Vec::new();
    for r in &records {
        samples.extend(unroll(r).map_err(pipeline_err("unroll"))?);
    }
    verify_lineage(&samples, &records).map_err(pipeline_err("unroll"))?;
    write_jsonl(store.path(SAMPLES_FILE), &samples).map_err(|e| CliError::stage("unroll", "store-failure", e))?;
    println!(
        "unroll: in = {} trajectories, out = {} samples",
        records.len(),
        samples.len()
    );
    Ok(true)
}

fn read_samples(path: &Path, stage: &'static str) -> Result<Vec<TrainingSample>, CliError> {
    if !path.exists() {
        return Err(CliError::stage(
            stage,
            "missing-input",
            format!("{} does not exist; run the previous stage first", path.display()),
        ));
    }
    let scan = read_jsonl(path).map_err(|e| CliError::stage(stage, "store-failure", e))?;
    if scan.corrupt > 0 {
        log::warn!("{}: skipped {} corrupt lines", path.display(), scan.corrupt);
    }
    Ok(scan.records)
}

fn balance_cmd(common: &Common, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<bool, CliError> {
    let (cfg, root) = load(common)?;
    let store = open_store(&root, "balance")?;
    let input = input.unwrap_or_else(|| store.path(SAMPLES_FILE));
    let out = out.unwrap_or_else(|| store.path(BALANCED_FILE));
    let samples = read_samples(&input, "balance")?;
    let balanced =
        balance(&samples, &cfg.balance).map_err(|e| CliError::stage("balance", "invalid-balance-spec", e))?;
    write_jsonl(&out, &balanced).map_err(|e| CliError::stage("balance", "store-failure", e))?;
    println!("balance: in = {}, out = {}", samples.len(), balanced.len());
    Ok(true)
}

fn split(common: &Common, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<bool, CliError> {
    let (cfg, root) = load(common)?;
    let store = open_store(&root, "split")?;
    let input = input.unwrap_or_else(|| store.path(BALANCED_FILE));
    let out = out.unwrap_or_else(|| store.root().to_path_buf());
    let samples = read_samples(&input, "split")?;
    let records = truncated_records(&store, "split")?;
    verify_lineage(&samples, &records).map_err(pipeline_err("split"))?;
    let halves = partition(records, &cfg.partition).map_err(pipeline_err("split"))?;
    let (sft, rl) = assign_samples(&samples, &halves).map_err(pipeline_err("split"))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::stage("split", "store-failure", e))?;
    write_jsonl(out.join(SFT_FILE), &sft).map_err(|e| CliError::stage("split", "store-failure", e))?;
    write_jsonl(out.join(RL_FILE), &rl).map_err(|e| CliError::stage("split", "store-failure", e))?;
    println!(
        "split: rl = {} trajectories / {} samples, sft = {} trajectories / {} samples",
        halves.rl.len(),
        rl.len(),
        halves.sft.len(),
        sft.len()
    );
    Ok(true)
}

fn report(
    common: &Common,
    budgets: &[u32],
    tasks: Option<PathBuf>,
    seed: Option<u64>,
    parallelism: Option<usize>,
    out: Option<PathBuf>,
) -> Result<bool, CliError> {
    let (cfg, root) = load(common)?;
    let seed = seed.unwrap_or(cfg.seed);
    let tasks = match tasks {
        Some(path) => read_tasks(&path)?,
        None => cfg.sim.world()?.generate_tasks(&cfg.sim.tasks, seed),
    };
    let backends = cfg.build_backends()?;
    let parallelism = parallelism.unwrap_or(cfg.parallelism).max(1);
    let reports = run_ablation(&tasks, &backends, budgets, &cfg.loop_cfg, parallelism, seed).map_err(|e| {
        let code = match e {
            BenchError::NoTasks => "empty-task-set",
            BenchError::NoBudgets | BenchError::ZeroBudget => "invalid-budgets",
        };
        CliError::stage("report", code, e)
    })?;
    let rendered = render_report(&reports);
    let table_path = out.unwrap_or_else(|| root.join("report.txt"));
    let summary_path = table_path.with_extension("json");
    if let Some(dir) = table_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::stage("report", "io", e))?;
    }
    std::fs::write(&table_path, &rendered.table).map_err(|e| CliError::stage("report", "io", e))?;
    std::fs::write(&summary_path, rendered.summary_json() + "\n").map_err(|e| CliError::stage("report", "io", e))?;
    let _ = write!(std::io::stdout(), "{}", rendered.table);
    eprintln!(
        "report: table {} summary {}",
        table_path.display(),
        summary_path.display()
    );
    Ok(true)
}

fn sim_tasks(config: &Path, out: &Path, seed: Option<u64>, count: Option<usize>) -> Result<bool, CliError> {
    let cfg = AppConfig::load(config)?;
    let mut spec = cfg.sim.tasks.clone();
    if let Some(n) = count {
        spec.count = n;
    }
    let tasks = cfg.sim.world()?.generate_tasks(&spec, seed.unwrap_or(cfg.seed));
    write_jsonl(out, &tasks).map_err(|e| CliError::stage("sim-tasks", "io", e))?;
    println!("sim-tasks: wrote {} tasks to {}", tasks.len(), out.display());
    Ok(true)
}
