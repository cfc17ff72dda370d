use proptest::prelude::*;
use shieldlab::gridworld::{GridSpec, ObstacleKind};
use shieldlab::latent::contrastive_from_latents;
use shieldlab::priors::{
    consistency_score, is_action_unsafe, scaled_undesirability, select_prior_transitions, train_prior_q, undesirability_distribution,
    PriorConfig, PriorTask,
};
use shieldlab::solver::{value_iteration, QFunction};

fn row_table(row: &[f64]) -> QFunction {
    let mut q = QFunction::zeros(1, 0.99);
    q.row_mut(0).copy_from_slice(row);
    q
}

fn finite() -> impl Strategy<Value = f64> {
    -1e3f64..1e3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn argmax_has_zero_undesirability(row in prop::array::uniform3(finite())) {
        let q = row_table(&row);
        prop_assert_eq!(scaled_undesirability(&q, 0, q.argmax(0)), 0.0);
        for a in 0..3 {
            prop_assert!(scaled_undesirability(&q, 0, a) >= 0.0);
        }
    }

    #[test]
    fn softmax_is_normalised_and_shift_invariant(w in prop::collection::vec(-50f64..50.0, 2..12), shift in -100f64..100.0) {
        let p = undesirability_distribution(&w);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let moved: Vec<f64> = w.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(undesirability_distribution(&moved)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_weights_score_their_value(c in 0f64..10.0, n in 2usize..16) {
        let w = vec![c; n];
        let score = consistency_score(&w, &undesirability_distribution(&w));
        prop_assert!((score - c).abs() <= 1e-12 * c.max(1.0));
    }

    #[test]
    fn score_is_bounded_by_mean_weight(w in prop::collection::vec(0f64..5.0, 2..10)) {
        let score = consistency_score(&w, &undesirability_distribution(&w));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!(score >= 0.0 && score <= mean * (1.0 + 1e-12));
    }

    #[test]
    fn hinge_saturates_beyond_margin(z in prop::collection::vec(-3f64..3.0, 1..8), margin in 0.01f64..20.0, scale in 1f64..4.0) {
        let origin = vec![0.0; z.len()];
        let d2: f64 = z.iter().map(|v| v * v).sum();
        let far: Vec<f64> = z.iter().map(|v| v * scale * (margin / d2.max(1e-9)).sqrt().max(1.0)).collect();
        let far_d2: f64 = far.iter().map(|v| v * v).sum();
        prop_assume!(far_d2 >= margin);
        prop_assert_eq!(contrastive_from_latents(&far, &origin, false, margin), 0.0);
        let near = contrastive_from_latents(&z, &origin, false, margin);
        prop_assert!((near - (margin - d2).max(0.0)).abs() < 1e-12);
        prop_assert!((contrastive_from_latents(&z, &origin, true, margin) - d2).abs() < 1e-12);
    }

    #[test]
    fn some_action_is_always_safe(row in prop::array::uniform3(finite())) {
        let q = row_table(&row);
        prop_assert!((0..3).any(|a| !is_action_unsafe(&q, 0, a)));
        prop_assert!(!is_action_unsafe(&q, 0, q.argmax(0)));
    }
}

fn default_tasks() -> Vec<PriorTask> {
    [(ObstacleKind::Wall, 1), (ObstacleKind::Wall, 2), (ObstacleKind::Lava, 1), (ObstacleKind::Lava, 2)]
        .into_iter()
        .map(|(kind, n)| {
            let spec = GridSpec::generate_crossing(9, n, kind, 0).unwrap();
            let q = value_iteration(&spec, 0.99, 1e-10).unwrap();
            PriorTask { spec, q }
        })
        .collect()
}

#[test]
fn selection_is_nonempty_and_threshold_one_is_empty() {
    let tasks = default_tasks();
    let picked = select_prior_transitions(&tasks, &PriorConfig::default()).unwrap();
    assert!(!picked.is_empty());
    assert!(picked.iter().any(|t| t.reward < 0.0), "entering lava should carry a negative prior reward");
    let none = select_prior_transitions(
        &tasks,
        &PriorConfig {
            entropy_threshold: 1.0,
            ..PriorConfig::default()
        },
    )
    .unwrap();
    assert!(none.is_empty());
}

#[test]
fn prior_q_is_a_fixed_point_of_its_transitions() {
    let tasks = default_tasks();
    let picked = select_prior_transitions(&tasks, &PriorConfig::default()).unwrap();
    let n = tasks[0].spec.state_count();
    let q = train_prior_q(&picked, n, 0.99, 100_000).unwrap();
    for t in &picked {
        let target = t.reward + 0.99 * q.max(t.next_state);
        assert!((q.get(t.state, t.action) - target).abs() <= 1e-6);
    }
}
