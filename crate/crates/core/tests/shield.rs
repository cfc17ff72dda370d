use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shieldlab::gridworld::{Action, GridSpec, ObstacleKind, SafetyLabel};
use shieldlab::priors::{is_action_unsafe, select_prior_transitions, train_prior_q, PriorConfig, PriorTask};
use shieldlab::shield::{shield_action, state_distance, Gate, ShieldConfig, UnsafeEmbeddingBuffer};
use shieldlab::solver::{value_iteration, QFunction};

fn exact_prior(target: &GridSpec) -> QFunction {
    let tasks: Vec<PriorTask> = [(ObstacleKind::Wall, 1), (ObstacleKind::Wall, 2), (ObstacleKind::Lava, 1), (ObstacleKind::Lava, 2)]
        .into_iter()
        .map(|(kind, n)| {
            let spec = GridSpec::generate_crossing(9, n, kind, 0).unwrap();
            let q = value_iteration(&spec, 0.99, 1e-10).unwrap();
            PriorTask { spec, q }
        })
        .collect();
    let picked = select_prior_transitions(&tasks, &PriorConfig::default()).unwrap();
    train_prior_q(&picked, target.state_count(), 0.99, 100_000).unwrap()
}

#[test]
fn forced_open_shield_never_keeps_an_unsafe_action() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    let q_p = exact_prior(&spec);
    let cfg = ShieldConfig {
        rho: 1.0,
        ..ShieldConfig::default()
    };
    let buffer = UnsafeEmbeddingBuffer::new(cfg.capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut flagged_lava_moves = 0;
    let mut undesirable = 0;
    for s in spec.reachable_states() {
        if spec.classify_state(&s) != SafetyLabel::Undesirable {
            continue;
        }
        undesirable += 1;
        let idx = spec.index_of(&s);
        let lava_move = spec.step(&s, Action::Forward).unwrap().violated;
        if lava_move && is_action_unsafe(&q_p, idx, Action::Forward.index()) {
            flagged_lava_moves += 1;
        }
        for proposed in 0..3 {
            for _ in 0..50 {
                let d = shield_action(idx, &[0.0], proposed, &q_p, &buffer, &cfg, Gate::AlwaysOpen, &mut rng);
                assert!(d.gate_open && d.armed);
                assert!(!is_action_unsafe(&q_p, idx, d.action));
                assert!(q_p.get(idx, d.action) >= q_p.mean(idx) - 1e-12);
                if !is_action_unsafe(&q_p, idx, proposed) {
                    assert_eq!(d.action, proposed);
                    assert_eq!(d.loop_draws, 0);
                }
            }
        }
    }
    assert!(undesirable > 0);
    assert!(flagged_lava_moves > 0, "prior never flags a lava move");
}

#[test]
fn distance_gate_opens_only_below_threshold() {
    let mut q_p = QFunction::zeros(1, 0.99);
    q_p.row_mut(0).copy_from_slice(&[0.0, 0.0, -1.0]);
    let cfg = ShieldConfig {
        rho: 1.0,
        sample_size: 3,
        ..ShieldConfig::default()
    };
    let mut buffer = UnsafeEmbeddingBuffer::new(cfg.capacity);
    for (k, z) in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]].into_iter().enumerate() {
        buffer.push(k as u64, z.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for z in [[0.1, 0.1], [2.0, 2.0], [10.0, 0.0]] {
        let sample: Vec<&[f64]> = buffer.embeddings().collect();
        let expected = state_distance(&z, &sample);
        let d = shield_action(0, &z, 2, &q_p, &buffer, &cfg, Gate::LatentDistance, &mut rng);
        assert!((d.distance.unwrap() - expected).abs() < 1e-12);
        assert_eq!(d.gate_open, expected < cfg.d_max);
        assert_eq!(d.replaced(), d.gate_open);
    }
}
