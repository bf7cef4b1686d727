use std::path::{Path, PathBuf};
use std::sync::Arc;

use editrefine::backends::remote::{EndpointConfig, RemoteEditor, RemoteScorer, RemoteThinker};
use editrefine::backends::sim::{SimEditor, SimScorer, SimTaskSpec, SimThinker, SimWorld, SimWorldConfig};
use editrefine::backends::{Backends, Editor, Scorer, Thinker, ThinkerMode};
use editrefine::datapipe::{BalanceSpec, PartitionConfig};
use editrefine::rewards::RewardConfig;
use editrefine::LoopConfig;
use serde::Deserialize;

use crate::CliError;

/// Whole-run configuration, read from a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    pub backends: BackendsConfig,
    #[serde(default, rename = "loop")]
    pub loop_cfg: LoopConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub balance: BalanceSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub sim: SimSection,
}

fn default_store() -> PathBuf {
    PathBuf::from("store")
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub thinker_mode: ThinkerMode,
    pub editor: BackendDef,
    pub thinker: BackendDef,
    #[serde(default)]
    pub scorer: Option<BackendDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendDef {
    Sim,
    Remote(EndpointConfig),
}

/// Oracle world plus the task generator and simulated expert settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dimension: usize,
    pub goal: Option<Vec<f64>>,
    pub editor_fidelity: f64,
    pub noise_scale: f64,
    pub score_slope: f64,
    pub world_seed: u64,
    /// Score at which the simulated expert declares itself satisfied.
    pub satisfied_threshold: f64,
    pub tasks: SimTaskSpec,
}

impl Default for SimSection {
    fn default() -> Self {
        let w = SimWorldConfig::default();
        SimSection {
            dimension: w.dimension,
            goal: w.goal,
            editor_fidelity: w.editor_fidelity,
            noise_scale: w.noise_scale,
            score_slope: w.score_slope,
            world_seed: w.seed,
            satisfied_threshold: 9.0,
            tasks: SimTaskSpec::default(),
        }
    }
}

impl SimSection {
    pub fn world(&self) -> Result<SimWorld, CliError> {
        let cfg = SimWorldConfig {
            dimension: self.dimension,
            goal: self.goal.clone(),
            editor_fidelity: self.editor_fidelity,
            noise_scale: self.noise_scale,
            score_slope: self.score_slope,
            seed: self.world_seed,
        };
        cfg.build().map_err(|e| CliError::Config(format!("sim: {e}")))
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: AppConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            CliError::Config(if path == "." { msg } else { format!("{path}: {msg}") })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let err = |path: &str, e: &dyn std::fmt::Display| Err(CliError::Config(format!("{path}: {e}")));
        if self.parallelism == 0 {
            return err("parallelism", &"must be at least 1");
        }
        if let Err(e) = self.loop_cfg.validate() {
            return err("loop", &e);
        }
        if let Err(e) = self.reward.validate() {
            return err("reward", &e);
        }
        if let Err(e) = self.balance.validate() {
            return err("balance", &e);
        }
        let theta = self.partition.variance_threshold;
        if !theta.is_finite() || theta < 0.0 {
            return err(
                "partition.variance_threshold",
                &format!("{theta} must be finite and non-negative"),
            );
        }
        if !(0.0..=10.0).contains(&self.sim.satisfied_threshold) {
            return err("sim.satisfied_threshold", &"must lie in [0, 10]");
        }
        self.sim.world()?;
        Ok(())
    }

    /// Constructs every configured backend. Remote keys are read from the
    /// environment here, so a missing variable fails before any work starts.
    pub fn build_backends(&self) -> Result<Backends, CliError> {
        let uses_sim = matches!(self.backends.editor, BackendDef::Sim)
            || matches!(self.backends.thinker, BackendDef::Sim)
            || matches!(self.backends.scorer, Some(BackendDef::Sim));
        let world = if uses_sim {
            Some(Arc::new(self.sim.world()?))
        } else {
            None
        };
        let config_err = |role: &str, e: &dyn std::fmt::Display| CliError::Config(format!("backends.{role}: {e}"));

        let editor: Arc<dyn Editor> = match &self.backends.editor {
            BackendDef::Sim => Arc::new(SimEditor::new(world.clone().expect("world built"))),
            BackendDef::Remote(ep) => {
                Arc::new(RemoteEditor::new("remote-editor", ep).map_err(|e| config_err("editor", &e))?)
            }
        };
        let mode = self.backends.thinker_mode;
        let thinker: Arc<dyn Thinker> = match &self.backends.thinker {
            BackendDef::Sim => Arc::new(
                SimThinker::new(world.clone().expect("world built"), mode)
                    .with_satisfied_threshold(self.sim.satisfied_threshold),
            ),
            BackendDef::Remote(ep) => Arc::new(
                RemoteThinker::new(format!("remote-{}", ep.model), ep, mode).map_err(|e| config_err("thinker", &e))?,
            ),
        };
        let scorer: Option<Arc<dyn Scorer>> = match &self.backends.scorer {
            None => None,
            Some(BackendDef::Sim) => Some(Arc::new(SimScorer::new(world.expect("world built")))),
            Some(BackendDef::Remote(ep)) => Some(Arc::new(
                RemoteScorer::new(format!("remote-{}", ep.model), ep, self.loop_cfg.aggregate)
                    .map_err(|e| config_err("scorer", &e))?,
            )),
        };
        Ok(Backends::new(editor, thinker, scorer))
    }
}
