//! Python bindings for the gridworld, solver, priors, encoder, shield and agent.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shieldlab::agent::{self, AgentConfig, EmbeddingTable, EpsilonSchedule, Mode, ShieldState};
use shieldlab::gridworld::{Action, Direction, GridSpec, ObstacleKind, SafetyLabel};
use shieldlab::latent::{
    enumerate_labeled, EncoderConfig, EncoderModel, EncoderTrainer, LabeledReplayBuffer, ReconReduction,
};
use shieldlab::priors::{self, PriorConfig, PriorTask, PriorTransition};
use shieldlab::shield::{self, Gate, ShieldConfig, UnsafeEmbeddingBuffer};
use shieldlab::solver::{self, QFunction};

fn err(e: shieldlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = shieldlab::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "Grid", module = "shieldlab_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: GridSpec,
}

impl PyGrid {
    fn live(&self, state: usize) -> PyResult<()> {
        if state >= self.inner.state_count() {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        Ok(())
    }
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    #[pyo3(signature = (size, crossings, obstacle = "lava", seed = 0))]
    fn generate(size: usize, crossings: usize, obstacle: &str, seed: u64) -> PyResult<Self> {
        let kind: ObstacleKind = parse(obstacle)?;
        let inner = GridSpec::generate_crossing(size, crossings, kind, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: GridSpec::parse_map(text).map_err(err)?,
        })
    }

    fn to_map(&self) -> String {
        self.inner.to_map_string()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.max_steps
    }

    #[getter]
    fn state_count(&self) -> usize {
        self.inner.state_count()
    }

    #[getter]
    fn start(&self) -> usize {
        self.inner.index_of(&self.inner.start_state())
    }

    #[getter]
    fn goal(&self) -> (usize, usize) {
        self.inner.goal
    }

    fn cell(&self, row: usize, col: usize) -> PyResult<&'static str> {
        if row >= self.inner.height || col >= self.inner.width {
            return Err(PyValueError::new_err("cell out of range"));
        }
        Ok(match self.inner.cell(row, col) {
            shieldlab::CellKind::Empty => "empty",
            shieldlab::CellKind::Wall => "wall",
            shieldlab::CellKind::Lava => "lava",
            shieldlab::CellKind::Goal => "goal",
        })
    }

    /// `direction` is 0..4 for east, south, west, north.
    fn state_index(&self, row: usize, col: usize, direction: usize) -> usize {
        self.inner.state_index(row, col, Direction::from_index(direction % 4))
    }

    fn pose(&self, state: usize) -> PyResult<(usize, usize, usize)> {
        self.live(state)?;
        let s = self.inner.state_at(state);
        Ok((s.row, s.col, s.direction.index()))
    }

    /// One step from `state` with `action` (0 left, 1 right, 2 forward). Returns
    /// `(next_state, reward, terminated, violated)`. The episode step counter is
    /// not tracked here.
    fn step(&self, state: usize, action: usize) -> PyResult<(usize, f64, bool, bool)> {
        self.live(state)?;
        let a = Action::from_index(action).ok_or_else(|| PyValueError::new_err(format!("bad action {action}")))?;
        let t = self.inner.step(&self.inner.state_at(state), a).map_err(err)?;
        Ok((self.inner.index_of(&t.next_state), t.reward, t.terminated, t.violated))
    }

    fn observe(&self, state: usize) -> PyResult<Vec<f64>> {
        self.live(state)?;
        Ok(self.inner.observe(&self.inner.state_at(state)).data)
    }

    fn classify(&self, state: usize) -> PyResult<&'static str> {
        self.live(state)?;
        Ok(match self.inner.classify_state(&self.inner.state_at(state)) {
            SafetyLabel::Violation => "violation",
            SafetyLabel::Undesirable => "undesirable",
            SafetyLabel::Safe => "safe",
        })
    }

    fn reachable(&self) -> Vec<usize> {
        self.inner.reachable_states().iter().map(|s| self.inner.index_of(s)).collect()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({}x{}, {} {}, seed {})",
            self.inner.width,
            self.inner.height,
            self.inner.num_crossings,
            self.inner.obstacle_kind.name(),
            self.inner.seed
        )
    }
}

#[pyclass(name = "QTable", module = "shieldlab_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyQTable {
    inner: QFunction,
}

#[pymethods]
impl PyQTable {
    #[new]
    #[pyo3(signature = (rows, gamma = 0.99))]
    fn new(rows: Vec<[f64; 3]>, gamma: f64) -> Self {
        let mut inner = QFunction::zeros(rows.len(), gamma);
        for (s, r) in rows.iter().enumerate() {
            inner.row_mut(s).copy_from_slice(r);
        }
        Self { inner }
    }

    #[getter]
    fn state_count(&self) -> usize {
        self.inner.state_count
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    fn row(&self, state: usize) -> PyResult<Vec<f64>> {
        if state >= self.inner.state_count {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        Ok(self.inner.row(state).to_vec())
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.values.chunks(3).map(|c| c.to_vec()).collect()
    }

    fn argmax(&self, state: usize) -> PyResult<usize> {
        self.row(state)?;
        Ok(self.inner.argmax(state))
    }

    fn is_unsafe(&self, state: usize, action: usize) -> PyResult<bool> {
        self.row(state)?;
        Ok(priors::is_action_unsafe(&self.inner, state, action))
    }

    fn bellman_residual(&self, grid: &PyGrid) -> PyResult<f64> {
        if grid.inner.state_count() != self.inner.state_count {
            return Err(PyValueError::new_err("table does not match grid"));
        }
        Ok(solver::bellman_residual(&grid.inner, &self.inner))
    }
}

#[pyfunction]
#[pyo3(signature = (grid, gamma = 0.99, tol = 1e-10))]
fn value_iteration(grid: &PyGrid, gamma: f64, tol: f64) -> PyResult<PyQTable> {
    Ok(PyQTable {
        inner: solver::value_iteration(&grid.inner, gamma, tol).map_err(err)?,
    })
}

#[pyfunction]
fn scaled_undesirability(row: [f64; 3], action: usize) -> f64 {
    let mut q = QFunction::zeros(1, 0.99);
    q.row_mut(0).copy_from_slice(&row);
    priors::scaled_undesirability(&q, 0, action.min(2))
}

#[pyfunction]
fn undesirability_distribution(w: Vec<f64>) -> Vec<f64> {
    priors::undesirability_distribution(&w)
}

#[pyfunction]
fn consistency_score(w: Vec<f64>) -> PyResult<f64> {
    if w.len() < 2 {
        return Err(PyValueError::new_err("need at least two weights"));
    }
    Ok(priors::consistency_score(&w, &priors::undesirability_distribution(&w)))
}

/// `(state, action, next_state, reward, task)`.
type TransitionTuple = (usize, usize, usize, f64, usize);

/// Selected prior transitions.
#[pyfunction]
#[pyo3(signature = (tasks, threshold = 0.1, gamma = 0.99))]
fn select_prior_transitions(tasks: Vec<(PyGrid, PyQTable)>, threshold: f64, gamma: f64) -> PyResult<Vec<TransitionTuple>> {
    let tasks: Vec<PriorTask> = tasks.into_iter().map(|(g, q)| PriorTask { spec: g.inner, q: q.inner }).collect();
    let cfg = PriorConfig {
        entropy_threshold: threshold,
        gamma,
    };
    let picked = priors::select_prior_transitions(&tasks, &cfg).map_err(err)?;
    Ok(picked.iter().map(|t| (t.state, t.action, t.next_state, t.reward, t.task)).collect())
}

#[pyfunction]
#[pyo3(signature = (transitions, state_count, gamma = 0.99))]
fn train_prior_q(transitions: Vec<TransitionTuple>, state_count: usize, gamma: f64) -> PyResult<PyQTable> {
    let ts: Vec<PriorTransition> = transitions
        .into_iter()
        .map(|(state, action, next_state, reward, task)| PriorTransition {
            state,
            action,
            next_state,
            reward,
            task,
        })
        .collect();
    Ok(PyQTable {
        inner: priors::train_prior_q(&ts, state_count, gamma, 100_000).map_err(err)?,
    })
}

#[pyclass(name = "Encoder", module = "shieldlab_py")]
struct PyEncoder {
    cfg: EncoderConfig,
    trainer: EncoderTrainer,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (grid, seed = 0, hidden_dim = 256, latent_dim = 50, recon_reduction = "mean"))]
    fn new(grid: &PyGrid, seed: u64, hidden_dim: usize, latent_dim: usize, recon_reduction: &str) -> PyResult<Self> {
        let cfg = EncoderConfig {
            hidden_dim,
            latent_dim,
            recon_reduction: parse::<ReconReduction>(recon_reduction)?,
            ..EncoderConfig::default()
        };
        cfg.validate().map_err(err)?;
        let model = EncoderModel::for_grid(&grid.inner, &cfg, seed);
        Ok(Self {
            cfg,
            trainer: EncoderTrainer::new(model, cfg, seed),
        })
    }

    /// Trains on the enumerated states of `grids`; returns the loss curve.
    fn train(&mut self, py: Python<'_>, grids: Vec<PyGrid>, steps: usize) -> PyResult<Vec<f64>> {
        let mut buffer = LabeledReplayBuffer::new(self.cfg.replay_capacity);
        for g in &grids {
            buffer.extend(enumerate_labeled(&g.inner));
        }
        let trainer = &mut self.trainer;
        py.detach(|| (0..steps).map(|_| trainer.train_step(&buffer)).collect::<shieldlab::Result<Vec<f64>>>())
            .map_err(err)
    }

    fn encode(&self, grid: &PyGrid, state: usize) -> PyResult<Vec<f64>> {
        grid.live(state)?;
        self.trainer.model.encode(&grid.inner.observe(&grid.inner.state_at(state))).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.trainer.model.to_checkpoint(&self.cfg, &[]))
    }

    #[staticmethod]
    #[pyo3(signature = (data, seed = 0))]
    fn from_bytes(data: &[u8], seed: u64) -> PyResult<Self> {
        let model = EncoderModel::from_checkpoint(data).map_err(err)?;
        let cfg = EncoderConfig {
            hidden_dim: model.hidden_dim(),
            latent_dim: model.latent_dim(),
            ..EncoderConfig::default()
        };
        Ok(Self {
            cfg,
            trainer: EncoderTrainer::new(model, cfg, seed),
        })
    }
}

#[pyclass(name = "Shield", module = "shieldlab_py")]
struct PyShield {
    cfg: ShieldConfig,
    buffer: UnsafeEmbeddingBuffer,
    rng: ChaCha8Rng,
    pushed: u64,
}

#[pymethods]
impl PyShield {
    #[new]
    #[pyo3(signature = (d_max = 2.5, rho = 0.95, sample_size = 10, capacity = 100, seed = 0))]
    fn new(d_max: f64, rho: f64, sample_size: usize, capacity: usize, seed: u64) -> PyResult<Self> {
        let cfg = ShieldConfig {
            d_max,
            rho,
            sample_size,
            capacity,
        };
        cfg.validate().map_err(err)?;
        Ok(Self {
            cfg,
            buffer: UnsafeEmbeddingBuffer::new(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pushed: 0,
        })
    }

    fn push(&mut self, z: Vec<f64>) {
        self.buffer.push(self.pushed, z);
        self.pushed += 1;
    }

    fn __len__(&self) -> usize {
        self.buffer.len()
    }

    /// Mean distance from `z` to every stored embedding.
    fn distance(&self, z: Vec<f64>) -> PyResult<f64> {
        let all: Vec<&[f64]> = self.buffer.embeddings().collect();
        if all.is_empty() {
            return Err(PyValueError::new_err("buffer is empty"));
        }
        Ok(shield::state_distance(&z, &all))
    }

    /// Returns `(action, gate_open, distance)`.
    #[pyo3(signature = (state, z, proposed, prior, gated = true))]
    fn decide(&mut self, state: usize, z: Vec<f64>, proposed: usize, prior: &PyQTable, gated: bool) -> PyResult<(usize, bool, Option<f64>)> {
        if state >= prior.inner.state_count || proposed >= 3 {
            return Err(PyValueError::new_err("state or action out of range"));
        }
        let gate = if gated { Gate::LatentDistance } else { Gate::AlwaysOpen };
        let d = shield::shield_action(state, &z, proposed, &prior.inner, &self.buffer, &self.cfg, gate, &mut self.rng);
        Ok((d.action, d.gate_open, d.distance))
    }
}

/// Trains one agent and returns a dict with per-episode returns, violation
/// flags, the final-window return and the visit heatmap.
#[pyfunction]
#[pyo3(signature = (grid, mode = "vanilla", total_steps = 50_000, seed = 0, prior = None, encoder = None))]
fn train_agent<'py>(
    py: Python<'py>,
    grid: &PyGrid,
    mode: &str,
    total_steps: u64,
    seed: u64,
    prior: Option<&PyQTable>,
    encoder: Option<&PyEncoder>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: Mode = parse(mode)?;
    let cfg = AgentConfig {
        mode,
        seed,
        total_steps,
        epsilon: EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            decay_steps: total_steps / 2,
        },
        ..AgentConfig::default()
    };
    let shield = match prior {
        Some(q) => {
            let embeddings = match encoder {
                Some(e) => Some(EmbeddingTable::build(&grid.inner, &e.trainer.model).map_err(err)?),
                None => None,
            };
            Some(ShieldState::new(q.inner.clone(), embeddings, ShieldConfig::default(), Gate::LatentDistance))
        }
        None => None,
    };
    let spec = &grid.inner;
    let run = py.detach(|| agent::train_agent(spec, &cfg, shield)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("returns", run.episodes.iter().map(|e| e.ret).collect::<Vec<_>>())?;
    out.set_item("violated", run.episodes.iter().map(|e| e.violated).collect::<Vec<_>>())?;
    out.set_item("violations", run.violations())?;
    out.set_item("final_return", run.final_return(agent::FINAL_WINDOW))?;
    out.set_item("heatmap", run.heatmap.clone())?;
    out.set_item("interventions", run.interventions.iter().filter(|i| i.executed != i.proposed).count())?;
    Ok(out)
}

#[pymodule]
fn shieldlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyQTable>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyShield>()?;
    m.add_function(wrap_pyfunction!(value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_undesirability, m)?)?;
    m.add_function(wrap_pyfunction!(undesirability_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_score, m)?)?;
    m.add_function(wrap_pyfunction!(select_prior_transitions, m)?)?;
    m.add_function(wrap_pyfunction!(train_prior_q, m)?)?;
    m.add_function(wrap_pyfunction!(train_agent, m)?)?;
    Ok(())
}
