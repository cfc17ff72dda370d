//! Exact optimal Q-tables by synchronous value iteration.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gridworld::{Action, CellKind, GridSpec, ACTION_COUNT};

const MAX_SWEEPS: usize = 100_000;

/// Dense `state × action` value table with its discount.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub values: Vec<f64>,
    pub gamma: f64,
    pub state_count: usize,
}

impl QFunction {
    pub fn zeros(state_count: usize, gamma: f64) -> Self {
        Self {
            values: vec![0.0; state_count * ACTION_COUNT],
            gamma,
            state_count,
        }
    }

    pub fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * ACTION_COUNT + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * ACTION_COUNT + action] = value;
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * ACTION_COUNT..(state + 1) * ACTION_COUNT]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.values[state * ACTION_COUNT..(state + 1) * ACTION_COUNT]
    }

    pub fn max(&self, state: usize) -> f64 {
        self.row(state).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self, state: usize) -> f64 {
        self.row(state).iter().sum::<f64>() / ACTION_COUNT as f64
    }

    /// Lowest-index maximiser.
    pub fn argmax(&self, state: usize) -> usize {
        argmax(self.row(state))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Text table: `# key = value` header lines, then one row of three values
    /// per state. Values use Rust's shortest round-trip float formatting.
    pub fn to_text(&self, grid_hash: &str, provenance: &[(String, String)]) -> String {
        let mut out = String::new();
        out.push_str("# qtable\n");
        let _ = writeln!(out, "# gamma = {}", self.gamma);
        let _ = writeln!(out, "# grid = {grid_hash}");
        let _ = writeln!(out, "# states = {}", self.state_count);
        let _ = writeln!(out, "# actions = {ACTION_COUNT}");
        for (k, v) in provenance {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for s in 0..self.state_count {
            let r = self.row(s);
            let _ = writeln!(out, "{} {} {}", r[0], r[1], r[2]);
        }
        out
    }

    /// Parses [`QFunction::to_text`] output, returning the table and grid hash.
    pub fn from_text(text: &str) -> Result<(QFunction, String)> {
        let ctx = "qtable";
        let mut gamma = None;
        let mut grid = String::new();
        let mut states = None;
        let mut values = Vec::new();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    let v = v.trim();
                    match k.trim() {
                        "gamma" => gamma = Some(v.parse::<f64>().map_err(|_| Error::parse(ctx, format!("bad gamma `{v}`")))?),
                        "grid" => grid = v.to_string(),
                        "states" => states = Some(v.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad state count `{v}`")))?),
                        "actions" if v != "3" => return Err(Error::parse(ctx, format!("expected 3 actions, found {v}"))),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(ctx, format!("bad value `{t}`"))))
                .collect::<Result<_>>()?;
            if row.len() != ACTION_COUNT {
                return Err(Error::parse(ctx, format!("row with {} values", row.len())));
            }
            values.extend(row);
        }
        let gamma = gamma.ok_or_else(|| Error::parse(ctx, "missing gamma"))?;
        let state_count = states.ok_or_else(|| Error::parse(ctx, "missing state count"))?;
        if values.len() != state_count * ACTION_COUNT {
            return Err(Error::parse(ctx, format!("expected {state_count} rows, found {}", values.len() / ACTION_COUNT)));
        }
        Ok((
            QFunction {
                values,
                gamma,
                state_count,
            },
            grid,
        ))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-step reward and continuation value of taking `action` from a pose.
fn backup(spec: &GridSpec, q: &QFunction, state: usize, action: Action) -> f64 {
    let s = spec.state_at(state);
    let (r, c, d) = spec.successor(s.row, s.col, s.direction, action);
    match spec.cell(r, c) {
        CellKind::Goal => crate::gridworld::GOAL_REWARD,
        CellKind::Lava => 0.0,
        _ => q.gamma * q.max(spec.state_index(r, c, d)),
    }
}

/// States that receive backups: every non-wall cell. Rows for lava and goal
/// cells hold the value of acting from there; entering either cell ends the
/// episode, so those rows never feed another backup.
fn backed_up(spec: &GridSpec, state: usize) -> bool {
    spec.cells[state / 4] != CellKind::Wall
}

pub fn value_iteration(spec: &GridSpec, gamma: f64, tol: f64) -> Result<QFunction> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let n = spec.state_count();
    let mut q = QFunction::zeros(n, gamma);
    let mut next = q.clone();
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        delta = 0.0;
        for s in (0..n).filter(|&s| backed_up(spec, s)) {
            for a in Action::ALL {
                let v = backup(spec, &q, s, a);
                delta = f64::max(delta, (v - q.get(s, a.index())).abs());
                next.set(s, a.index(), v);
            }
        }
        std::mem::swap(&mut q, &mut next);
        // Residual of the new table is at most gamma * delta.
        if delta <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        sweeps: MAX_SWEEPS,
        residual: delta,
    })
}

/// Largest Bellman optimality error over all backed-up state-action pairs.
pub fn bellman_residual(spec: &GridSpec, q: &QFunction) -> f64 {
    let mut worst: f64 = 0.0;
    for s in (0..spec.state_count()).filter(|&s| backed_up(spec, s)) {
        for a in Action::ALL {
            worst = worst.max((q.get(s, a.index()) - backup(spec, q, s, a)).abs());
        }
    }
    worst
}

pub fn greedy_policy(q: &QFunction) -> Vec<Action> {
    (0..q.state_count)
        .map(|s| Action::ALL[q.argmax(s)])
        .collect()
}
