//! Prior Q-function built from the optimal Q-tables of related tasks.
//!
//! For every state-action pair each task contributes a scaled undesirability
//! `w_i = |(Q_i(s,a) - max Q_i(s,·)) / max Q_i(s,·)|`. The pair is kept when
//! the mean of `w` times the normalised entropy of `softmax(w)` exceeds the
//! threshold. Kept pairs receive the reward
//!
//! ```text
//! r_p = Σ_i softmax(w)_i · (Q_i(s,a) - γ · max Q_i(s'_i, ·))
//! ```
//!
//! where `s'_i` is the successor in task `i` and the successor row is read from
//! the table without masking terminal cells. Value iteration fills rows of lava
//! cells with the value of acting from there, so a move into lava carries the
//! value it forfeits as a negative reward. The transition stored for fitting
//! uses the successor from the task that finds the pair most undesirable.
//!
//! Two fits are available: tabular sweeps over the fixed transition set
//! ([`train_prior_q`]) and a small observation-space network
//! ([`fit_prior_network`]) that is then tabulated for a target layout.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{Action, CellKind, GridSpec, ACTION_COUNT};
use crate::nn::{Adam, Network};
use crate::solver::QFunction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub entropy_threshold: f64,
    pub gamma: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            entropy_threshold: 0.1,
            gamma: 0.99,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_threshold > 0.0 && self.entropy_threshold <= 1.0) {
            return Err(Error::Config(format!("entropy threshold must lie in (0, 1], got {}", self.entropy_threshold)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("prior gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// A selected transition with its prior reward. `task` records which task
/// supplied the successor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTransition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    pub task: usize,
}

/// A task: its layout and optimal Q-table.
#[derive(Debug, Clone)]
pub struct PriorTask {
    pub spec: GridSpec,
    pub q: QFunction,
}

pub fn scaled_undesirability(q: &QFunction, state: usize, action: usize) -> f64 {
    let best = q.max(state);
    if best == 0.0 {
        return 0.0;
    }
    ((q.get(state, action) - best) / best).abs()
}

/// Softmax of the undesirability vector.
pub fn undesirability_distribution(w: &[f64]) -> Vec<f64> {
    let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = w.iter().map(|&v| (v - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `mean(w) · H(w') / ln n`, entropy in nats.
pub fn consistency_score(w: &[f64], w_prime: &[f64]) -> f64 {
    let n = w.len();
    assert!(n >= 2, "consistency needs at least two tasks");
    assert_eq!(n, w_prime.len());
    let mean = w.iter().sum::<f64>() / n as f64;
    let entropy: f64 = w_prime.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    mean * entropy / (n as f64).ln()
}

pub fn is_action_unsafe(q_p: &QFunction, state: usize, action: usize) -> bool {
    let mean = q_p.mean(state);
    // Slack absorbs rounding in the mean so that a flat row is all-safe.
    q_p.get(state, action) < mean - UNSAFE_SLACK * mean.abs().max(1.0)
}

const UNSAFE_SLACK: f64 = 1e-12;

fn check_tasks(tasks: &[PriorTask]) -> Result<()> {
    if tasks.len() < 2 {
        return Err(Error::IncompatibleTasks(format!("need at least two tasks, got {}", tasks.len())));
    }
    let first = &tasks[0].spec;
    for (i, t) in tasks.iter().enumerate() {
        if t.spec.width != first.width || t.spec.height != first.height {
            return Err(Error::IncompatibleTasks(format!(
                "task {i} is {}x{}, task 0 is {}x{}",
                t.spec.width, t.spec.height, first.width, first.height
            )));
        }
        if t.q.state_count != t.spec.state_count() {
            return Err(Error::IncompatibleTasks(format!("task {i} Q-table does not match its grid")));
        }
    }
    Ok(())
}

/// Prior-reward term of one task for `(s, a)`. A state on a wall cell does not
/// exist in that task and contributes nothing.
fn reward_term(task: &PriorTask, gamma: f64, state: usize, action: Action) -> f64 {
    let spec = &task.spec;
    if spec.cells[state / 4] == CellKind::Wall {
        return 0.0;
    }
    let s = spec.state_at(state);
    let (r, c, d) = spec.successor(s.row, s.col, s.direction, action);
    task.q.get(state, action.index()) - gamma * task.q.max(spec.state_index(r, c, d))
}

/// Per-pair statistics behind the selection, exposed for reporting and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub w: Vec<f64>,
    pub w_prime: Vec<f64>,
    pub score: f64,
}

pub fn score_pair(tasks: &[PriorTask], state: usize, action: usize) -> PairScore {
    let w: Vec<f64> = tasks.iter().map(|t| scaled_undesirability(&t.q, state, action)).collect();
    let w_prime = undesirability_distribution(&w);
    let score = consistency_score(&w, &w_prime);
    PairScore { w, w_prime, score }
}

/// Selected transitions in state-major, action-minor order.
pub fn select_prior_transitions(tasks: &[PriorTask], cfg: &PriorConfig) -> Result<Vec<PriorTransition>> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let state_count = tasks[0].spec.state_count();
    let mut out = Vec::new();
    for s in 0..state_count {
        for a in Action::ALL {
            let pair = score_pair(tasks, s, a.index());
            if pair.score <= cfg.entropy_threshold {
                continue;
            }
            let reward = tasks
                .iter()
                .zip(&pair.w_prime)
                .map(|(t, p)| p * reward_term(t, cfg.gamma, s, a))
                .sum();
            let source = crate::solver::argmax(&pair.w);
            let spec = &tasks[source].spec;
            let st = spec.state_at(s);
            let (r, c, d) = spec.successor(st.row, st.col, st.direction, a);
            out.push(PriorTransition {
                state: s,
                action: a.index(),
                next_state: spec.state_index(r, c, d),
                reward,
                task: source,
            });
        }
    }
    if out.is_empty() {
        log::warn!("no state-action pair passed the consistency threshold {}", cfg.entropy_threshold);
    }
    Ok(out)
}

const PRIOR_LR: f64 = 0.5;
const PRIOR_TOL: f64 = 1e-8;

/// Q-learning sweeps over a fixed transition set from a zero table, until the
/// largest update in a sweep is at most 1e-8.
pub fn train_prior_q(transitions: &[PriorTransition], state_count: usize, gamma: f64, max_sweeps: usize) -> Result<QFunction> {
    if transitions.is_empty() {
        return Err(Error::Config("no prior transitions to train on".into()));
    }
    let mut q = QFunction::zeros(state_count, gamma);
    let mut largest = f64::INFINITY;
    for _ in 0..max_sweeps {
        largest = 0.0;
        for t in transitions {
            let target = t.reward + gamma * q.max(t.next_state);
            let update = PRIOR_LR * (target - q.get(t.state, t.action));
            q.set(t.state, t.action, q.get(t.state, t.action) + update);
            largest = largest.max(update.abs());
        }
        if largest <= PRIOR_TOL {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        sweeps: max_sweeps,
        residual: largest,
    })
}

/// Settings for the observation-space prior network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorNetConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Target refreshes (fitted Q iterations).
    pub rounds: usize,
    /// Full-batch Adam steps per round.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PriorNetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 1e-3,
            rounds: 20,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Fits `Q_p` as a network over observations by fitted Q iteration on the
/// selected transitions. Each transition is rendered in the layout of the task
/// that supplied it. Only the taken action's output receives a loss.
pub fn fit_prior_network(tasks: &[PriorTask], transitions: &[PriorTransition], gamma: f64, cfg: &PriorNetConfig) -> Result<Network> {
    check_tasks(tasks)?;
    let obs_len = tasks[0].spec.observation_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(&[obs_len, cfg.hidden, ACTION_COUNT], &mut rng);
    if transitions.is_empty() {
        net.params.iter_mut().for_each(|p| *p = 0.0);
        return Ok(net);
    }
    let n = transitions.len();
    let render = |task: usize, state: usize| {
        let spec = &tasks[task].spec;
        spec.observe(&spec.state_at(state)).data
    };
    let mut x = Array2::zeros((n, obs_len));
    let mut x_next = Array2::zeros((n, obs_len));
    for (i, t) in transitions.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&render(t.task, t.state)));
        x_next.row_mut(i).assign(&ndarray::ArrayView1::from(&render(t.task, t.next_state)));
    }
    let mut opt = Adam::new(net.param_count(), cfg.learning_rate);
    for _ in 0..cfg.rounds {
        let next_values = net.forward(x_next.view());
        let targets: Vec<f64> = transitions
            .iter()
            .enumerate()
            .map(|(i, t)| t.reward + gamma * next_values.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for _ in 0..cfg.epochs {
            let trace = net.forward_trace(x.view());
            let out = trace.output();
            let mut grad = Array2::zeros((n, ACTION_COUNT));
            for (i, t) in transitions.iter().enumerate() {
                grad[[i, t.action]] = 2.0 * (out[[i, t.action]] - targets[i]) / n as f64;
            }
            let (g, _) = net.backward(&trace, grad.view());
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("prior network gradient".into()));
            }
            opt.step(&mut net.params, &g);
        }
    }
    Ok(net)
}

/// Evaluates a prior network on every live state of `target`; other rows are 0.
pub fn tabulate_prior(net: &Network, target: &GridSpec, gamma: f64) -> Result<QFunction> {
    if net.input_dim() != target.observation_len() {
        return Err(Error::Shape {
            expected: net.input_dim(),
            actual: target.observation_len(),
        });
    }
    let mut q = QFunction::zeros(target.state_count(), gamma);
    for s in (0..target.state_count()).filter(|&s| target.is_live(s)) {
        let out = net.forward_one(&target.observe(&target.state_at(s)).data);
        q.row_mut(s).copy_from_slice(&out);
    }
    Ok(q)
}

/// One `s a s' r_p` line per transition; a `# task = k` comment precedes each
/// run of transitions from the same source task.
pub fn transitions_to_text(transitions: &[PriorTransition], provenance: &[(String, String)]) -> String {
    let mut out = String::from("# prior transitions: s a s' r_p\n");
    for (k, v) in provenance {
        let _ = writeln!(out, "# {k} = {v}");
    }
    let mut task = None;
    for t in transitions {
        if task != Some(t.task) {
            let _ = writeln!(out, "# task = {}", t.task);
            task = Some(t.task);
        }
        let _ = writeln!(out, "{} {} {} {}", t.state, t.action, t.next_state, t.reward);
    }
    out
}

pub fn transitions_from_text(text: &str) -> Result<Vec<PriorTransition>> {
    let ctx = "prior transitions";
    let mut task = 0;
    let mut out = Vec::new();
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(("task", v)) = meta.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                task = v.parse().map_err(|_| Error::parse(ctx, format!("bad task `{v}`")))?;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::parse(ctx, format!("expected 4 fields, got `{line}`")));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad index `{s}`")));
        let action = idx(f[1])?;
        if action >= ACTION_COUNT {
            return Err(Error::parse(ctx, format!("action {action} out of range")));
        }
        out.push(PriorTransition {
            state: idx(f[0])?,
            action,
            next_state: idx(f[2])?,
            reward: f[3].parse().map_err(|_| Error::parse(ctx, format!("bad reward `{}`", f[3])))?,
            task,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: [f64; 3]) -> QFunction {
        let mut q = QFunction::zeros(1, 0.99);
        q.row_mut(0).copy_from_slice(&values);
        q
    }

    #[test]
    fn argmax_has_zero_undesirability() {
        let q = row([0.9, 0.5, 0.0]);
        assert_eq!(scaled_undesirability(&q, 0, 0), 0.0);
    }

    #[test]
    fn zero_row_has_zero_weight() {
        let q = row([0.0, 0.0, 0.0]);
        for a in 0..3 {
            assert_eq!(scaled_undesirability(&q, 0, a), 0.0);
        }
    }

    #[test]
    fn uniform_softmax() {
        let p = undesirability_distribution(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_score_zero() {
        let w = [0.0, 0.0, 0.0];
        assert_eq!(consistency_score(&w, &undesirability_distribution(&w)), 0.0);
    }

    #[test]
    fn unsafe_when_below_mean() {
        let q = row([0.0, 0.0, -1.0]);
        assert!(!is_action_unsafe(&q, 0, 0));
        assert!(!is_action_unsafe(&q, 0, 1));
        assert!(is_action_unsafe(&q, 0, 2));
        let flat = row([0.4, 0.4, 0.4]);
        assert!((0..3).all(|a| !is_action_unsafe(&flat, 0, a)));
    }

    #[test]
    fn untouched_pairs_stay_zero() {
        let t = PriorTransition {
            state: 0,
            action: 2,
            next_state: 1,
            reward: -1.0,
            task: 0,
        };
        let q = train_prior_q(&[t], 3, 0.9, 1000).unwrap();
        assert!((q.get(0, 2) + 1.0).abs() < 1e-7);
        assert_eq!(q.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(q.get(0, 0), 0.0);
    }

    #[test]
    fn sweep_cap_reports_residual() {
        let t = PriorTransition {
            state: 0,
            action: 0,
            next_state: 1,
            reward: -1.0,
            task: 0,
        };
        match train_prior_q(&[t], 2, 0.9, 2) {
            Err(Error::NoConvergence { sweeps: 2, residual }) => assert!(residual > 1e-8),
            other => panic!("unexpected {other:?}"),
        }
        assert!(train_prior_q(&[], 2, 0.9, 10).is_err());
    }

    #[test]
    fn transitions_text_round_trip() {
        let ts = vec![
            PriorTransition { state: 4, action: 2, next_state: 8, reward: -0.25, task: 2 },
            PriorTransition { state: 9, action: 0, next_state: 11, reward: -1e-3, task: 2 },
            PriorTransition { state: 17, action: 2, next_state: 21, reward: -0.5, task: 3 },
        ];
        let text = transitions_to_text(&ts, &[("threshold".into(), "0.1".into())]);
        assert_eq!(transitions_from_text(&text).unwrap(), ts);
    }
}
