//! Two-stage shield: a latent distance gate in front of the prior action check.
//!
//! The agent keeps a bounded buffer of embeddings of states from which it has
//! stepped into a violation. For a proposed action `a0` in state `s`:
//!
//! 1. Sample up to `sample_size` stored embeddings without replacement and take
//!    the mean L2 distance `d` from the embedding of `s`.
//! 2. If `d < d_max`, with probability `rho` replace `a0` by uniform draws from
//!    the action set until `Q_p(s, a) >= mean_a' Q_p(s, a')`. `a0` itself is
//!    tested first.
//!
//! With an empty buffer the gate stays closed. The rho coin is flipped once
//! per invocation, and only when the gate is open.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gridworld::{Observation, ACTION_COUNT};
use crate::latent::EncoderModel;
use crate::priors::is_action_unsafe;
use crate::solver::QFunction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldConfig {
    pub d_max: f64,
    pub rho: f64,
    pub sample_size: usize,
    pub capacity: usize,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            d_max: 2.5,
            rho: 0.95,
            sample_size: 10,
            capacity: 100,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.d_max.is_nan() || self.d_max < 0.0 {
            return Err(Error::Config(format!("d_max must be non-negative, got {}", self.d_max)));
        }
        if self.sample_size == 0 || self.capacity == 0 {
            return Err(Error::Config("shield sample size and capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Whether the action check is gated by latent distance or always armed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    LatentDistance,
    AlwaysOpen,
}

/// Ring of unsafe-state embeddings with the step at which each was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsafeEmbeddingBuffer {
    items: VecDeque<(u64, Vec<f64>)>,
    capacity: usize,
}

impl UnsafeEmbeddingBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, step: u64, z: Vec<f64>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((step, z));
    }

    /// Stores the embedding of the observation a violating move was taken from.
    pub fn record_violation(&mut self, encoder: &EncoderModel, prev_obs: &Observation, step: u64) -> Result<()> {
        let z = encoder.encode(prev_obs)?;
        self.push(step, z);
        Ok(())
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &[f64]> {
        self.items.iter().map(|(_, z)| z.as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.items.iter().map(|(s, z)| (*s, z.as_slice()))
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&[f64]> {
        sample(rng, self.items.len(), n.min(self.items.len()))
            .into_iter()
            .map(|i| self.items[i].1.as_slice())
            .collect()
    }

    /// TSV dump: `step z_1 … z_k` per stored embedding, oldest first.
    pub fn to_tsv(&self, provenance: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in provenance {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for (step, z) in &self.items {
            let _ = write!(out, "{step}");
            for v in z {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn state_distance(z: &[f64], sample: &[&[f64]]) -> f64 {
    assert!(!sample.is_empty(), "distance to an empty sample is undefined");
    let total: f64 = sample
        .iter()
        .map(|t| z.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    total / sample.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldDecision {
    pub proposed: usize,
    pub action: usize,
    /// Mean latent distance, when it was computed.
    pub distance: Option<f64>,
    pub gate_open: bool,
    /// The rho coin came up and the replacement loop ran.
    pub armed: bool,
    /// Random draws made inside the replacement loop.
    pub loop_draws: u32,
}

impl ShieldDecision {
    pub fn replaced(&self) -> bool {
        self.action != self.proposed
    }
}

/// Shields `proposed` in tabular state `state` whose embedding is `z`.
#[allow(clippy::too_many_arguments)]
pub fn shield_action<R: Rng>(
    state: usize,
    z: &[f64],
    proposed: usize,
    q_p: &QFunction,
    buffer: &UnsafeEmbeddingBuffer,
    cfg: &ShieldConfig,
    gate: Gate,
    rng: &mut R,
) -> ShieldDecision {
    let mut decision = ShieldDecision {
        proposed,
        action: proposed,
        distance: None,
        gate_open: false,
        armed: false,
        loop_draws: 0,
    };
    match gate {
        Gate::AlwaysOpen => decision.gate_open = true,
        Gate::LatentDistance => {
            if buffer.is_empty() {
                return decision;
            }
            let batch = buffer.sample(cfg.sample_size, rng);
            let d = state_distance(z, &batch);
            decision.distance = Some(d);
            decision.gate_open = d < cfg.d_max;
        }
    }
    if !decision.gate_open || rng.random::<f64>() >= cfg.rho {
        return decision;
    }
    decision.armed = true;
    let mut a = proposed;
    while is_action_unsafe(q_p, state, a) {
        a = rng.random_range(0..ACTION_COUNT);
        decision.loop_draws += 1;
    }
    decision.action = a;
    decision
}

/// [`shield_action`] on a raw observation.
#[allow(clippy::too_many_arguments)]
pub fn shield_observation<R: Rng>(
    state: usize,
    obs: &Observation,
    proposed: usize,
    q_p: &QFunction,
    encoder: &EncoderModel,
    buffer: &UnsafeEmbeddingBuffer,
    cfg: &ShieldConfig,
    gate: Gate,
    rng: &mut R,
) -> Result<ShieldDecision> {
    let z = encoder.encode(obs)?;
    Ok(shield_action(state, &z, proposed, q_p, buffer, cfg, gate, rng))
}

/// Fraction of `queries` whose gate decision matches their label: the gate
/// should open (`d < d_max`) exactly for unsafe states. Distances use the same
/// sampled estimate as [`shield_action`].
pub fn gate_accuracy<R: Rng>(buffer: &UnsafeEmbeddingBuffer, queries: &[(Vec<f64>, bool)], cfg: &ShieldConfig, rng: &mut R) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let correct = queries
        .iter()
        .filter(|(z, safe)| {
            let open = !buffer.is_empty() && state_distance(z, &buffer.sample(cfg.sample_size, rng)) < cfg.d_max;
            open != *safe
        })
        .count();
    correct as f64 / queries.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior_row(values: [f64; 3]) -> QFunction {
        let mut q = QFunction::zeros(1, 0.99);
        q.row_mut(0).copy_from_slice(&values);
        q
    }

    #[test]
    fn distance_examples() {
        let z = [0.0, 0.0];
        let a = [0.0, 0.0];
        let b = [2.0, 0.0];
        assert_eq!(state_distance(&z, &[&a, &b]), 1.0);
        assert_eq!(state_distance(&z, &[&b, &a]), 1.0);
        assert_eq!(state_distance(&z, &[&a, &a]), 0.0);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut buf = UnsafeEmbeddingBuffer::new(100);
        for i in 0..101 {
            buf.push(i, vec![i as f64]);
        }
        assert_eq!(buf.len(), 100);
        assert_eq!(buf.entries().next().unwrap().0, 1);
    }

    #[test]
    fn empty_buffer_is_identity() {
        let q = prior_row([0.0, 0.0, -1.0]);
        let buf = UnsafeEmbeddingBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in 0..3 {
            let d = shield_action(0, &[0.0], a, &q, &buf, &ShieldConfig::default(), Gate::LatentDistance, &mut rng);
            assert_eq!(d.action, a);
            assert!(!d.gate_open);
        }
    }

    #[test]
    fn far_state_keeps_action() {
        let q = prior_row([0.0, 0.0, -1.0]);
        let mut buf = UnsafeEmbeddingBuffer::new(10);
        buf.push(0, vec![3.0, 0.0]);
        let cfg = ShieldConfig { rho: 1.0, ..ShieldConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = shield_action(0, &[0.0, 0.0], 2, &q, &buf, &cfg, Gate::LatentDistance, &mut rng);
        assert_eq!(d.distance, Some(3.0));
        assert_eq!(d.action, 2);
    }

    #[test]
    fn near_state_replaces_unsafe_action() {
        let q = prior_row([0.0, 0.0, -1.0]);
        let mut buf = UnsafeEmbeddingBuffer::new(10);
        buf.push(0, vec![0.5, 0.0]);
        let cfg = ShieldConfig { rho: 1.0, ..ShieldConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let d = shield_action(0, &[0.0, 0.0], 2, &q, &buf, &cfg, Gate::LatentDistance, &mut rng);
            assert!(d.action < 2);
            assert!(d.armed && d.loop_draws >= 1);
        }
        // A safe proposal passes unchanged.
        let d = shield_action(0, &[0.0, 0.0], 1, &q, &buf, &cfg, Gate::LatentDistance, &mut rng);
        assert_eq!((d.action, d.loop_draws), (1, 0));
    }

    #[test]
    fn rho_zero_never_replaces() {
        let q = prior_row([0.0, 0.0, -1.0]);
        let cfg = ShieldConfig { rho: 0.0, ..ShieldConfig::default() };
        let buf = UnsafeEmbeddingBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert_eq!(shield_action(0, &[0.0], 2, &q, &buf, &cfg, Gate::AlwaysOpen, &mut rng).action, 2);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ShieldConfig::default().validate().is_ok());
        assert!(ShieldConfig { rho: 1.5, ..ShieldConfig::default() }.validate().is_err());
        assert!(ShieldConfig { sample_size: 0, ..ShieldConfig::default() }.validate().is_err());
    }
}
