//! Learners and the shielded training loop.
//!
//! The base learner proposes an ε-greedy action; in the shielded modes that
//! proposal passes through [`crate::shield::shield_action`] before execution
//! and the learner is updated with the executed action.
//!
//! * `Vanilla` runs the learner alone.
//! * `PriorsOnly` arms the prior action check on every step.
//! * `StateCheckedPriors` arms it only when the latent distance gate fires.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{Action, AgentState, GridSpec, Transition, ACTION_COUNT};
use crate::latent::EncoderModel;
use crate::nn::{Adam, Network};
use crate::shield::{shield_action, Gate, ShieldConfig, UnsafeEmbeddingBuffer};
use crate::solver::{argmax, QFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Vanilla,
    PriorsOnly,
    StateCheckedPriors,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::PriorsOnly, Mode::StateCheckedPriors];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::PriorsOnly => "priors-only",
            Mode::StateCheckedPriors => "state-checked",
        }
    }

    pub fn gate(self) -> Option<Gate> {
        match self {
            Mode::Vanilla => None,
            Mode::PriorsOnly => Some(Gate::AlwaysOpen),
            Mode::StateCheckedPriors => Some(Gate::LatentDistance),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vanilla" => Ok(Mode::Vanilla),
            "priors-only" => Ok(Mode::PriorsOnly),
            "state-checked" => Ok(Mode::StateCheckedPriors),
            other => Err(Error::parse("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Tabular,
    Dqn,
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tabular" => Ok(LearnerKind::Tabular),
            "dqn" => Ok(LearnerKind::Dqn),
            other => Err(Error::parse("learner", format!("unknown learner `{other}`"))),
        }
    }
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Tabular => "tabular",
            LearnerKind::Dqn => "dqn",
        }
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.decay_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DqnConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: u64,
    pub warmup: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 500,
            warmup: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub epsilon: EpsilonSchedule,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Initial value of every tabular Q entry.
    pub q_init: f64,
    pub mode: Mode,
    pub total_steps: u64,
    pub seed: u64,
    pub learner: LearnerKind,
    pub dqn: DqnConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let total_steps = 50_000;
        Self {
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.05,
                decay_steps: total_steps / 2,
            },
            learning_rate: 0.5,
            gamma: 0.99,
            q_init: 1.0,
            mode: Mode::Vanilla,
            total_steps,
            seed: 0,
            learner: LearnerKind::Tabular,
            dqn: DqnConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) {
            return Err(Error::Config("epsilon must stay within [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning rate must lie in (0, 1], got {}", self.learning_rate)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// ε-greedy over one row of action values; greedy ties go to the lowest index.
pub fn select_action<R: Rng>(row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..row.len())
    } else {
        argmax(row)
    }
}

/// Two tables updated in alternation; each bootstraps from the other at its
/// own greedy successor action.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQ {
    pub first: QFunction,
    pub second: QFunction,
    updates: u64,
}

impl DoubleQ {
    pub fn new(state_count: usize, gamma: f64) -> Self {
        Self::filled(state_count, gamma, 0.0)
    }

    /// Both tables start at `init` everywhere.
    pub fn filled(state_count: usize, gamma: f64, init: f64) -> Self {
        let mut first = QFunction::zeros(state_count, gamma);
        first.values.iter_mut().for_each(|v| *v = init);
        Self {
            second: first.clone(),
            first,
            updates: 0,
        }
    }

    /// Sum of both tables; used for action selection.
    pub fn values(&self, state: usize) -> [f64; ACTION_COUNT] {
        let (a, b) = (self.first.row(state), self.second.row(state));
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    /// Average of both tables.
    pub fn mean_table(&self) -> QFunction {
        let mut q = self.first.clone();
        for (v, w) in q.values.iter_mut().zip(&self.second.values) {
            *v = 0.5 * (*v + w);
        }
        q
    }

    /// Which table the next update writes.
    pub fn next_is_first(&self) -> bool {
        self.updates.is_multiple_of(2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn update(&mut self, state: usize, action: usize, reward: f64, next_state: usize, terminal: bool, lr: f64, gamma: f64) {
        let (target_table, other) = if self.next_is_first() {
            (&mut self.first, &self.second)
        } else {
            (&mut self.second, &self.first)
        };
        let bootstrap = if terminal {
            0.0
        } else {
            other.get(next_state, target_table.argmax(next_state))
        };
        let current = target_table.get(state, action);
        target_table.set(state, action, current + lr * (reward + gamma * bootstrap - current));
        self.updates += 1;
    }
}

/// Tabular double Q-learning update on a gridworld transition. Truncation is
/// not terminal.
pub fn q_update(q: &mut DoubleQ, spec: &GridSpec, t: &Transition, lr: f64, gamma: f64) {
    q.update(spec.index_of(&t.state), t.action.index(), t.reward, spec.index_of(&t.next_state), t.terminated, lr, gamma);
}

pub trait Learner {
    fn action_values(&mut self, spec: &GridSpec, state: &AgentState) -> [f64; ACTION_COUNT];
    fn learn(&mut self, spec: &GridSpec, t: &Transition, rng: &mut ChaCha8Rng) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct TabularLearner {
    pub q: DoubleQ,
    pub lr: f64,
    pub gamma: f64,
}

impl TabularLearner {
    pub fn new(spec: &GridSpec, lr: f64, gamma: f64, q_init: f64) -> Self {
        Self {
            q: DoubleQ::filled(spec.state_count(), gamma, q_init),
            lr,
            gamma,
        }
    }
}

impl Learner for TabularLearner {
    fn action_values(&mut self, spec: &GridSpec, state: &AgentState) -> [f64; ACTION_COUNT] {
        self.q.values(spec.index_of(state))
    }

    fn learn(&mut self, spec: &GridSpec, t: &Transition, _rng: &mut ChaCha8Rng) -> Result<()> {
        q_update(&mut self.q, spec, t, self.lr, self.gamma);
        Ok(())
    }
}

/// Dense Q-network over observations with uniform replay and a periodically
/// synchronised target network.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub online: Network,
    target: Network,
    opt: Adam,
    replay: VecDeque<(usize, usize, f64, usize, bool)>,
    cfg: DqnConfig,
    gamma: f64,
    updates: u64,
}

impl DqnLearner {
    pub fn new(spec: &GridSpec, cfg: DqnConfig, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D09_u64);
        let online = Network::new(&[spec.observation_len(), cfg.hidden, ACTION_COUNT], &mut rng);
        Self {
            target: online.clone(),
            opt: Adam::new(online.param_count(), cfg.learning_rate),
            online,
            replay: VecDeque::with_capacity(cfg.replay_capacity),
            cfg,
            gamma,
            updates: 0,
        }
    }

    fn stack(spec: &GridSpec, states: impl Iterator<Item = usize>, n: usize) -> Array2<f64> {
        let mut x = Array2::zeros((n, spec.observation_len()));
        for (i, s) in states.enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&spec.observe(&spec.state_at(s)).data));
        }
        x
    }
}

impl Learner for DqnLearner {
    fn action_values(&mut self, spec: &GridSpec, state: &AgentState) -> [f64; ACTION_COUNT] {
        let out = self.online.forward_one(&spec.observe(state).data);
        [out[0], out[1], out[2]]
    }

    fn learn(&mut self, spec: &GridSpec, t: &Transition, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.replay.len() == self.cfg.replay_capacity {
            self.replay.pop_front();
        }
        self.replay
            .push_back((spec.index_of(&t.state), t.action.index(), t.reward, spec.index_of(&t.next_state), t.terminated));
        if self.replay.len() < self.cfg.warmup.max(self.cfg.batch_size) {
            return Ok(());
        }
        let idx = sample(rng, self.replay.len(), self.cfg.batch_size).into_vec();
        let batch: Vec<_> = idx.iter().map(|&i| self.replay[i]).collect();
        let n = batch.len();
        let x = Self::stack(spec, batch.iter().map(|b| b.0), n);
        let x_next = Self::stack(spec, batch.iter().map(|b| b.3), n);
        let next_q = self.target.forward(x_next.view());
        let trace = self.online.forward_trace(x.view());
        let out = trace.output();
        let mut grad = Array2::zeros((n, ACTION_COUNT));
        for (i, &(_, a, r, _, terminal)) in batch.iter().enumerate() {
            let boot = if terminal { 0.0 } else { next_q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max) };
            grad[[i, a]] = 2.0 * (out[[i, a]] - (r + self.gamma * boot)) / n as f64;
        }
        let (g, _) = self.online.backward(&trace, grad.view());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dqn gradient".into()));
        }
        self.opt.step(&mut self.online.params, &g);
        self.updates += 1;
        if self.updates.is_multiple_of(self.cfg.target_sync) {
            self.target = self.online.clone();
        }
        Ok(())
    }
}

/// Frozen encoder outputs for every live state of one layout. Lookups return
/// exactly what [`EncoderModel::encode`] returns for the state's observation.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: Vec<Option<Vec<f64>>>,
}

impl EmbeddingTable {
    pub fn build(spec: &GridSpec, encoder: &EncoderModel) -> Result<Self> {
        let mut rows = vec![None; spec.state_count()];
        for (s, row) in rows.iter_mut().enumerate() {
            if spec.is_live(s) {
                *row = Some(encoder.encode(&spec.observe(&spec.state_at(s)))?);
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, state: usize) -> Option<&[f64]> {
        self.rows.get(state).and_then(|r| r.as_deref())
    }
}

/// Everything the shielded modes carry through a run.
#[derive(Debug, Clone)]
pub struct ShieldState {
    pub q_p: QFunction,
    pub embeddings: Option<EmbeddingTable>,
    pub buffer: UnsafeEmbeddingBuffer,
    pub cfg: ShieldConfig,
    pub gate: Gate,
}

impl ShieldState {
    pub fn new(q_p: QFunction, embeddings: Option<EmbeddingTable>, cfg: ShieldConfig, gate: Gate) -> Self {
        Self {
            q_p,
            embeddings,
            buffer: UnsafeEmbeddingBuffer::new(cfg.capacity),
            cfg,
            gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub violated: bool,
    /// Global step count when the episode ended.
    pub end_step: u64,
    /// Decision-state visits per cell, summed over headings.
    pub visits: Vec<u32>,
}

/// One step on which the shield's action check was reachable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervention {
    pub step: u64,
    pub state: usize,
    pub proposed: usize,
    pub executed: usize,
    pub distance: Option<f64>,
    pub gate_open: bool,
    pub armed: bool,
    pub loop_draws: u32,
}

/// Mutable per-run context shared by consecutive episodes.
pub struct RunContext<'a> {
    pub spec: &'a GridSpec,
    pub cfg: &'a AgentConfig,
    pub shield: Option<&'a mut ShieldState>,
    pub rng: &'a mut ChaCha8Rng,
    pub step: u64,
    pub interventions: Vec<Intervention>,
    pub heatmap: Vec<u64>,
}

/// Runs one episode, stopping early if the run's step budget is exhausted.
/// Returns `None` for an episode cut short by the budget.
pub fn run_episode(ctx: &mut RunContext<'_>, learner: &mut dyn Learner, episode: usize) -> Result<Option<EpisodeRecord>> {
    let spec = ctx.spec;
    let mut state = spec.start_state();
    let mut visits = vec![0u32; spec.width * spec.height];
    let mut ret = 0.0;
    loop {
        if ctx.step >= ctx.cfg.total_steps {
            return Ok(None);
        }
        let cell = state.row * spec.width + state.col;
        visits[cell] += 1;
        ctx.heatmap[cell] += 1;
        let s = spec.index_of(&state);
        let row = learner.action_values(spec, &state);
        let epsilon = ctx.cfg.epsilon.value(ctx.step);
        let proposed = select_action(&row, epsilon, ctx.rng);
        let executed = match ctx.shield.as_deref_mut() {
            None => proposed,
            Some(sh) => {
                let z = sh.embeddings.as_ref().and_then(|e| e.get(s)).unwrap_or(&[]);
                let d = shield_action(s, z, proposed, &sh.q_p, &sh.buffer, &sh.cfg, sh.gate, ctx.rng);
                if d.gate_open {
                    ctx.interventions.push(Intervention {
                        step: ctx.step,
                        state: s,
                        proposed,
                        executed: d.action,
                        distance: d.distance,
                        gate_open: d.gate_open,
                        armed: d.armed,
                        loop_draws: d.loop_draws,
                    });
                }
                d.action
            }
        };
        let t = spec.step(&state, Action::ALL[executed])?;
        ctx.step += 1;
        ret += t.reward;
        if t.violated {
            if let Some(sh) = ctx.shield.as_deref_mut() {
                if let Some(z) = sh.embeddings.as_ref().and_then(|e| e.get(s)) {
                    sh.buffer.push(ctx.step, z.to_vec());
                }
            }
        }
        learner.learn(spec, &t, ctx.rng)?;
        if t.done() {
            return Ok(Some(EpisodeRecord {
                episode,
                ret,
                steps: t.next_state.steps_elapsed,
                violated: t.violated,
                end_step: ctx.step,
                visits,
            }));
        }
        state = t.next_state;
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub heatmap: Vec<u64>,
    pub interventions: Vec<Intervention>,
    pub buffer: Option<UnsafeEmbeddingBuffer>,
    pub total_steps: u64,
}

impl RunResult {
    pub fn violations(&self) -> usize {
        self.episodes.iter().filter(|e| e.violated).count()
    }

    /// Mean return of episodes ending in the last `fraction` of the budget.
    pub fn final_return(&self, fraction: f64) -> f64 {
        let cutoff = self.total_steps as f64 * (1.0 - fraction);
        let tail: Vec<f64> = self.episodes.iter().filter(|e| e.end_step as f64 > cutoff).map(|e| e.ret).collect();
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            0.0
        } else {
            self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
        }
    }
}

/// Fraction of the budget used for the final-return window.
pub const FINAL_WINDOW: f64 = 0.1;

/// Trains one agent for the configured budget. `shield` must be present for
/// the shielded modes and carry an embedding table for `StateCheckedPriors`.
pub fn train_agent(spec: &GridSpec, cfg: &AgentConfig, shield: Option<ShieldState>) -> Result<RunResult> {
    cfg.validate()?;
    let mut shield = match (cfg.mode, shield) {
        (Mode::Vanilla, _) => None,
        (mode, Some(mut sh)) => {
            sh.gate = mode.gate().expect("shielded mode");
            if mode == Mode::StateCheckedPriors && sh.embeddings.is_none() {
                return Err(Error::Config("state-checked mode needs encoder embeddings".into()));
            }
            if sh.q_p.state_count != spec.state_count() {
                return Err(Error::IncompatibleTasks("prior Q-table does not match the environment".into()));
            }
            Some(sh)
        }
        (mode, None) => return Err(Error::Config(format!("mode {mode} needs a prior Q-table"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner: Box<dyn Learner> = match cfg.learner {
        LearnerKind::Tabular => Box::new(TabularLearner::new(spec, cfg.learning_rate, cfg.gamma, cfg.q_init)),
        LearnerKind::Dqn => Box::new(DqnLearner::new(spec, cfg.dqn, cfg.gamma, cfg.seed)),
    };
    let mut ctx = RunContext {
        spec,
        cfg,
        shield: shield.as_mut(),
        rng: &mut rng,
        step: 0,
        interventions: Vec::new(),
        heatmap: vec![0; spec.width * spec.height],
    };
    let mut episodes = Vec::new();
    while ctx.step < cfg.total_steps {
        match run_episode(&mut ctx, learner.as_mut(), episodes.len())? {
            Some(rec) => episodes.push(rec),
            None => break,
        }
    }
    let RunContext { interventions, heatmap, .. } = ctx;
    Ok(RunResult {
        mode: cfg.mode,
        seed: cfg.seed,
        episodes,
        heatmap,
        interventions,
        buffer: shield.map(|s| s.buffer),
        total_steps: cfg.total_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[0.2, 0.9, 0.1], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[0.5, 0.5, 0.5], 0.0, &mut rng), 0);
    }

    #[test]
    fn goal_and_lava_updates() {
        let mut q = DoubleQ::new(4, 0.9);
        q.update(0, 2, 1.0, 3, true, 1.0, 0.9);
        assert_eq!(q.first.get(0, 2), 1.0);
        q.second.set(1, 0, 0.7);
        q.update(1, 2, 0.0, 2, true, 1.0, 0.9);
        assert_eq!(q.second.get(1, 2), 0.0);
    }

    #[test]
    fn tables_alternate() {
        let mut q = DoubleQ::new(2, 0.9);
        assert!(q.next_is_first());
        q.update(0, 0, 1.0, 1, true, 0.5, 0.9);
        assert!(!q.next_is_first());
        q.update(0, 0, 1.0, 1, true, 0.5, 0.9);
        assert_eq!(q.first.get(0, 0), 0.5);
        assert_eq!(q.second.get(0, 0), 0.5);
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let e = EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 100 };
        assert_eq!(e.value(0), 1.0);
        assert!((e.value(50) - 0.525).abs() < 1e-12);
        assert_eq!(e.value(100), 0.05);
        assert_eq!(e.value(10_000), 0.05);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("dqn+priors".parse::<Mode>().is_err());
    }
}
