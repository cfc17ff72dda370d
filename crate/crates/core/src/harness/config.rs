//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every key has a default, so an empty file is a valid config.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::agent::{AgentConfig, DqnConfig, EpsilonSchedule, LearnerKind, Mode};
use crate::error::{Error, Result};
use crate::gridworld::{GridSpec, ObstacleKind};
use crate::latent::EncoderConfig;
use crate::priors::{PriorConfig, PriorNetConfig};
use crate::shield::ShieldConfig;

/// One generated layout: obstacle kind, size, crossings and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub obstacle: ObstacleKind,
    pub size: usize,
    pub crossings: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// File stem, e.g. `lava-S9N1-0`.
    pub fn name(&self) -> String {
        format!("{}-S{}N{}-{}", self.obstacle.name(), self.size, self.crossings, self.seed)
    }

    pub fn generate(&self) -> Result<GridSpec> {
        GridSpec::generate_crossing(self.size, self.crossings, self.obstacle, self.seed)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.obstacle.name(), self.size, self.crossings, self.seed)
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    /// `kind:size:crossings:seed`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 4 {
            return Err(Error::parse("task", format!("expected kind:size:crossings:seed, got `{s}`")));
        }
        Ok(TaskSpec {
            obstacle: parts[0].parse()?,
            size: parse_num("task size", parts[1])?,
            crossings: parse_num("task crossings", parts[2])?,
            seed: parse_num("task seed", parts[3])?,
        })
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| Error::parse(key, format!("`{v}`: {e}")))
}

fn parse_list<T: FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

/// How the prior Q-function is fitted from the selected transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFit {
    /// Fitted Q iteration on observations, tabulated on the target layout.
    Network,
    /// Direct tabular regression on state indices.
    Table,
}

impl FromStr for PriorFit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "network" => Ok(PriorFit::Network),
            "table" => Ok(PriorFit::Table),
            other => Err(Error::parse("prior.fit", format!("unknown fit `{other}`"))),
        }
    }
}

impl fmt::Display for PriorFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorFit::Network => "network",
            PriorFit::Table => "table",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: TaskSpec,
    pub prior_tasks: Vec<TaskSpec>,
    pub prior: PriorConfig,
    pub prior_fit: PriorFit,
    pub prior_net: PriorNetConfig,
    pub encoder: EncoderConfig,
    /// Layouts whose enumerated states fill the encoder's training buffer.
    pub encoder_tasks: Vec<TaskSpec>,
    pub encoder_steps: usize,
    pub encoder_seed: u64,
    /// Unseen layout for the encoder generalisation check.
    pub holdout: TaskSpec,
    pub shield: ShieldConfig,
    pub agent: AgentConfig,
    /// Fraction of the step budget over which ε decays.
    pub epsilon_decay_fraction: f64,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub vi_tolerance: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = |obstacle, crossings| TaskSpec {
            obstacle,
            size: 9,
            crossings,
            seed: 0,
        };
        Self {
            env: t(ObstacleKind::Lava, 1),
            prior_tasks: vec![
                t(ObstacleKind::Wall, 1),
                t(ObstacleKind::Wall, 2),
                t(ObstacleKind::Lava, 1),
                t(ObstacleKind::Lava, 2),
            ],
            prior: PriorConfig::default(),
            prior_fit: PriorFit::Network,
            prior_net: PriorNetConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_tasks: [
                t(ObstacleKind::Wall, 1),
                t(ObstacleKind::Wall, 2),
                t(ObstacleKind::Lava, 1),
                t(ObstacleKind::Lava, 2),
            ]
            .into_iter()
            .chain((2..10).map(|seed| TaskSpec {
                seed,
                ..t(ObstacleKind::Lava, 1)
            }))
            .chain((1..6).map(|seed| TaskSpec {
                seed,
                ..t(ObstacleKind::Lava, 2)
            }))
            .collect(),
            encoder_steps: 16000,
            encoder_seed: 0,
            holdout: TaskSpec {
                seed: 1,
                ..t(ObstacleKind::Lava, 1)
            },
            shield: ShieldConfig::default(),
            agent: AgentConfig::default(),
            epsilon_decay_fraction: 0.5,
            modes: Mode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            vi_tolerance: 1e-10,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key, in the order they are written out.
pub const KEYS: &[&str] = &[
    "env.task",
    "prior.tasks",
    "prior.threshold",
    "prior.gamma",
    "prior.fit",
    "prior.hidden",
    "prior.learning_rate",
    "prior.rounds",
    "prior.epochs",
    "prior.seed",
    "encoder.margin",
    "encoder.recon_weight",
    "encoder.recon_reduction",
    "encoder.contrast_weight",
    "encoder.learning_rate",
    "encoder.batch_size",
    "encoder.latent_dim",
    "encoder.hidden_dim",
    "encoder.replay_capacity",
    "encoder.tasks",
    "encoder.steps",
    "encoder.seed",
    "encoder.holdout_task",
    "shield.d_max",
    "shield.rho",
    "shield.sample_size",
    "shield.capacity",
    "agent.learner",
    "agent.epsilon_start",
    "agent.epsilon_end",
    "agent.epsilon_decay_fraction",
    "agent.learning_rate",
    "agent.gamma",
    "agent.q_init",
    "agent.total_steps",
    "agent.dqn_hidden",
    "agent.dqn_learning_rate",
    "agent.dqn_batch_size",
    "agent.dqn_replay_capacity",
    "agent.dqn_target_sync",
    "agent.dqn_warmup",
    "run.modes",
    "run.seeds",
    "solver.tolerance",
    "out_dir",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "env.task" => self.env = v.parse()?,
            "prior.tasks" => self.prior_tasks = parse_list(v)?,
            "prior.threshold" => self.prior.entropy_threshold = parse_num(key, v)?,
            "prior.gamma" => self.prior.gamma = parse_num(key, v)?,
            "prior.fit" => self.prior_fit = v.parse()?,
            "prior.hidden" => self.prior_net.hidden = parse_num(key, v)?,
            "prior.learning_rate" => self.prior_net.learning_rate = parse_num(key, v)?,
            "prior.rounds" => self.prior_net.rounds = parse_num(key, v)?,
            "prior.epochs" => self.prior_net.epochs = parse_num(key, v)?,
            "prior.seed" => self.prior_net.seed = parse_num(key, v)?,
            "encoder.margin" => self.encoder.margin = parse_num(key, v)?,
            "encoder.recon_weight" => self.encoder.recon_weight = parse_num(key, v)?,
            "encoder.recon_reduction" => self.encoder.recon_reduction = v.parse()?,
            "encoder.tasks" => self.encoder_tasks = parse_list(v)?,
            "encoder.contrast_weight" => self.encoder.contrast_weight = parse_num(key, v)?,
            "encoder.learning_rate" => self.encoder.learning_rate = parse_num(key, v)?,
            "encoder.batch_size" => self.encoder.batch_size = parse_num(key, v)?,
            "encoder.latent_dim" => self.encoder.latent_dim = parse_num(key, v)?,
            "encoder.hidden_dim" => self.encoder.hidden_dim = parse_num(key, v)?,
            "encoder.replay_capacity" => self.encoder.replay_capacity = parse_num(key, v)?,
            "encoder.steps" => self.encoder_steps = parse_num(key, v)?,
            "encoder.seed" => self.encoder_seed = parse_num(key, v)?,
            "encoder.holdout_task" => self.holdout = v.parse()?,
            "shield.d_max" => self.shield.d_max = parse_num(key, v)?,
            "shield.rho" => self.shield.rho = parse_num(key, v)?,
            "shield.sample_size" => self.shield.sample_size = parse_num(key, v)?,
            "shield.capacity" => self.shield.capacity = parse_num(key, v)?,
            "agent.learner" => self.agent.learner = v.parse()?,
            "agent.epsilon_start" => self.agent.epsilon.start = parse_num(key, v)?,
            "agent.epsilon_end" => self.agent.epsilon.end = parse_num(key, v)?,
            "agent.epsilon_decay_fraction" => self.epsilon_decay_fraction = parse_num(key, v)?,
            "agent.learning_rate" => self.agent.learning_rate = parse_num(key, v)?,
            "agent.gamma" => self.agent.gamma = parse_num(key, v)?,
            "agent.q_init" => self.agent.q_init = parse_num(key, v)?,
            "agent.total_steps" => self.agent.total_steps = parse_num(key, v)?,
            "agent.dqn_hidden" => self.agent.dqn.hidden = parse_num(key, v)?,
            "agent.dqn_learning_rate" => self.agent.dqn.learning_rate = parse_num(key, v)?,
            "agent.dqn_batch_size" => self.agent.dqn.batch_size = parse_num(key, v)?,
            "agent.dqn_replay_capacity" => self.agent.dqn.replay_capacity = parse_num(key, v)?,
            "agent.dqn_target_sync" => self.agent.dqn.target_sync = parse_num(key, v)?,
            "agent.dqn_warmup" => self.agent.dqn.warmup = parse_num(key, v)?,
            "run.modes" => self.modes = parse_list(v)?,
            "run.seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| parse_num(key, p))
                    .collect::<Result<_>>()?
            }
            "solver.tolerance" => self.vi_tolerance = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Keeps the derived ε decay horizon in step with the budget.
    fn sync(&mut self) {
        self.agent.epsilon.decay_steps = (self.agent.total_steps as f64 * self.epsilon_decay_fraction).round() as u64;
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "env.task" => self.env.to_string(),
            "prior.tasks" => join(&self.prior_tasks),
            "prior.threshold" => self.prior.entropy_threshold.to_string(),
            "prior.gamma" => self.prior.gamma.to_string(),
            "prior.fit" => self.prior_fit.to_string(),
            "prior.hidden" => self.prior_net.hidden.to_string(),
            "prior.learning_rate" => self.prior_net.learning_rate.to_string(),
            "prior.rounds" => self.prior_net.rounds.to_string(),
            "prior.epochs" => self.prior_net.epochs.to_string(),
            "prior.seed" => self.prior_net.seed.to_string(),
            "encoder.margin" => self.encoder.margin.to_string(),
            "encoder.recon_weight" => self.encoder.recon_weight.to_string(),
            "encoder.recon_reduction" => self.encoder.recon_reduction.name().to_string(),
            "encoder.tasks" => join(&self.encoder_tasks),
            "encoder.contrast_weight" => self.encoder.contrast_weight.to_string(),
            "encoder.learning_rate" => self.encoder.learning_rate.to_string(),
            "encoder.batch_size" => self.encoder.batch_size.to_string(),
            "encoder.latent_dim" => self.encoder.latent_dim.to_string(),
            "encoder.hidden_dim" => self.encoder.hidden_dim.to_string(),
            "encoder.replay_capacity" => self.encoder.replay_capacity.to_string(),
            "encoder.steps" => self.encoder_steps.to_string(),
            "encoder.seed" => self.encoder_seed.to_string(),
            "encoder.holdout_task" => self.holdout.to_string(),
            "shield.d_max" => self.shield.d_max.to_string(),
            "shield.rho" => self.shield.rho.to_string(),
            "shield.sample_size" => self.shield.sample_size.to_string(),
            "shield.capacity" => self.shield.capacity.to_string(),
            "agent.learner" => self.agent.learner.name().to_string(),
            "agent.epsilon_start" => self.agent.epsilon.start.to_string(),
            "agent.epsilon_end" => self.agent.epsilon.end.to_string(),
            "agent.epsilon_decay_fraction" => self.epsilon_decay_fraction.to_string(),
            "agent.learning_rate" => self.agent.learning_rate.to_string(),
            "agent.gamma" => self.agent.gamma.to_string(),
            "agent.q_init" => self.agent.q_init.to_string(),
            "agent.total_steps" => self.agent.total_steps.to_string(),
            "agent.dqn_hidden" => self.agent.dqn.hidden.to_string(),
            "agent.dqn_learning_rate" => self.agent.dqn.learning_rate.to_string(),
            "agent.dqn_batch_size" => self.agent.dqn.batch_size.to_string(),
            "agent.dqn_replay_capacity" => self.agent.dqn.replay_capacity.to_string(),
            "agent.dqn_target_sync" => self.agent.dqn.target_sync.to_string(),
            "agent.dqn_warmup" => self.agent.dqn.warmup.to_string(),
            "run.modes" => join(&self.modes),
            "run.seeds" => join(&self.seeds),
            "solver.tolerance" => self.vi_tolerance.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// All keys with their resolved values, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::parse("--set", format!("expected key=value, got `{}`", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.encoder.validate()?;
        self.shield.validate()?;
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("mode list is empty".into()));
        }
        if self.prior_tasks.len() < 2 {
            return Err(Error::Config("at least two prior tasks are required".into()));
        }
        if self.encoder_tasks.is_empty() {
            return Err(Error::Config("encoder task list is empty".into()));
        }
        let mut sized = self.prior_tasks.iter().chain(&self.encoder_tasks).chain([&self.holdout]);
        if let Some(t) = sized.find(|t| t.size != self.env.size) {
            return Err(Error::IncompatibleTasks(format!("prior task {t} differs in size from env {}", self.env)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(Error::Config("epsilon decay fraction must lie in [0, 1]".into()));
        }
        if self.agent.total_steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        if !(self.vi_tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        Ok(())
    }

    /// The agent config for one run.
    pub fn agent_for(&self, mode: Mode, seed: u64) -> AgentConfig {
        AgentConfig {
            mode,
            seed,
            epsilon: EpsilonSchedule {
                decay_steps: (self.agent.total_steps as f64 * self.epsilon_decay_fraction).round() as u64,
                ..self.agent.epsilon
            },
            ..self.agent
        }
    }

    pub fn dqn(&self) -> DqnConfig {
        self.agent.dqn
    }

    pub fn learner(&self) -> LearnerKind {
        self.agent.learner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("run.seeds", "4, 5").unwrap();
        cfg.set("shield.rho", "0.5").unwrap();
        cfg.set("prior.tasks", "lava:9:1:3, wall:9:2:1").unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.agent.epsilon.decay_steps, 25_000);
        assert_eq!(cfg.pairs().len(), KEYS.len());
    }

    #[test]
    fn budget_moves_decay_horizon() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("agent.total_steps", "1000").unwrap();
        assert_eq!(cfg.agent.epsilon.decay_steps, 500);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("shield.rho", "x").is_err());
        assert!(ExperimentConfig::from_text("just words").is_err());
        cfg.set("run.seeds", "").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn task_names() {
        let t: TaskSpec = "lava:9:2:7".parse().unwrap();
        assert_eq!(t.name(), "lava-S9N2-7");
        assert_eq!(t.to_string(), "lava:9:2:7");
        assert!("lava:9:2".parse::<TaskSpec>().is_err());
    }
}
