use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shieldlab::agent::{q_update, select_action, train_agent, AgentConfig, DoubleQ, EmbeddingTable, EpsilonSchedule, Mode, ShieldState};
use shieldlab::gridworld::{Action, GridSpec, ObstacleKind};
use shieldlab::latent::{EncoderConfig, EncoderModel};
use shieldlab::shield::{Gate, ShieldConfig};
use shieldlab::solver::{value_iteration, QFunction};

const CHAIN: &str = "# obstacle = wall\n# start_dir = east\n5 3 60 0\n#####\n#S.G#\n#####\n";

#[test]
fn chain_sweeps_converge_to_value_iteration() {
    let spec = GridSpec::parse_map(CHAIN).unwrap();
    let gamma = 0.9;
    let oracle = value_iteration(&spec, gamma, 1e-12).unwrap();
    let mut q = DoubleQ::new(spec.state_count(), gamma);
    let live: Vec<usize> = (0..spec.state_count()).filter(|&s| spec.is_live(s)).collect();
    assert_eq!(live.len(), 8);
    for _ in 0..500 {
        for &s in &live {
            for a in Action::ALL {
                let t = spec.step(&spec.state_at(s), a).unwrap();
                // Twice, so that both alternating tables see every pair.
                q_update(&mut q, &spec, &t, 0.5, gamma);
                q_update(&mut q, &spec, &t, 0.5, gamma);
            }
        }
    }
    for table in [&q.first, &q.second] {
        for &s in &live {
            for a in 0..3 {
                assert!((table.get(s, a) - oracle.get(s, a)).abs() <= 1e-6, "state {s} action {a}: {} vs {}", table.get(s, a), oracle.get(s, a));
            }
        }
    }
}

#[test]
fn full_exploration_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[select_action(&[5.0, 0.0, -1.0], 1.0, &mut rng)] += 1;
    }
    let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 3.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
    assert_eq!(select_action(&[1.0, 1.0, 0.0], 0.0, &mut rng), 0);
}

fn short_cfg(mode: Mode, seed: u64) -> AgentConfig {
    let total_steps = 4000;
    AgentConfig {
        mode,
        seed,
        total_steps,
        epsilon: EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            decay_steps: total_steps / 2,
        },
        ..AgentConfig::default()
    }
}

fn shield_for(spec: &GridSpec) -> ShieldState {
    let q_p = value_iteration(spec, 0.99, 1e-10).unwrap();
    let encoder = EncoderModel::for_grid(spec, &EncoderConfig::default(), 5);
    ShieldState::new(q_p, Some(EmbeddingTable::build(spec, &encoder).unwrap()), ShieldConfig::default(), Gate::LatentDistance)
}

#[test]
fn runs_are_deterministic() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    for mode in [Mode::Vanilla, Mode::PriorsOnly, Mode::StateCheckedPriors] {
        let a = train_agent(&spec, &short_cfg(mode, 3), Some(shield_for(&spec))).unwrap();
        let b = train_agent(&spec, &short_cfg(mode, 3), Some(shield_for(&spec))).unwrap();
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.interventions, b.interventions);
        assert_eq!(a.heatmap, b.heatmap);
        let c = train_agent(&spec, &short_cfg(mode, 4), Some(shield_for(&spec))).unwrap();
        assert_ne!(a.heatmap, c.heatmap);
    }
}

#[test]
fn state_checked_interventions_need_an_open_gate() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    let run = train_agent(&spec, &short_cfg(Mode::StateCheckedPriors, 1), Some(shield_for(&spec))).unwrap();
    assert!(run.violations() > 0, "the buffer never filled");
    assert!(run.interventions.iter().any(|i| i.gate_open));
    for i in &run.interventions {
        assert!(i.distance.is_some());
        if i.executed != i.proposed {
            assert!(i.gate_open && i.armed, "{i:?}");
        }
    }
    let vanilla = train_agent(&spec, &short_cfg(Mode::Vanilla, 1), None).unwrap();
    assert!(vanilla.interventions.is_empty());
    assert!(vanilla.buffer.is_none());
}

#[test]
fn budget_is_respected() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    let run = train_agent(&spec, &short_cfg(Mode::Vanilla, 0), None).unwrap();
    let used: usize = run.episodes.iter().map(|e| e.steps).sum();
    assert!(used as u64 <= run.total_steps);
    assert_eq!(run.heatmap.iter().sum::<u64>(), run.total_steps);
    assert!(run.episodes.windows(2).all(|w| w[0].end_step < w[1].end_step));
}

#[test]
fn shielded_modes_need_a_prior() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    assert!(train_agent(&spec, &short_cfg(Mode::PriorsOnly, 0), None).is_err());
    let no_embed = ShieldState::new(QFunction::zeros(spec.state_count(), 0.99), None, ShieldConfig::default(), Gate::AlwaysOpen);
    assert!(train_agent(&spec, &short_cfg(Mode::StateCheckedPriors, 0), Some(no_embed)).is_err());
}
