use std::collections::VecDeque;

use proptest::prelude::*;
use shieldlab::gridworld::{Action, AgentState, CellKind, Direction, GridSpec, ObstacleKind, SafetyLabel};

fn oracle_label(spec: &GridSpec, s: &AgentState) -> SafetyLabel {
    if spec.cell(s.row, s.col) == CellKind::Lava {
        return SafetyLabel::Violation;
    }
    let any_violation = Action::ALL.iter().any(|&a| spec.step(s, a).map(|t| t.violated).unwrap_or(false));
    if any_violation {
        SafetyLabel::Undesirable
    } else {
        SafetyLabel::Safe
    }
}

/// Cells reachable from the start over non-wall, non-lava cells (4-neighbour).
fn bfs_cells(spec: &GridSpec) -> Vec<bool> {
    let mut seen = vec![false; spec.width * spec.height];
    let mut queue = VecDeque::from([(spec.start.0, spec.start.1)]);
    seen[spec.start.0 * spec.width + spec.start.1] = true;
    while let Some((r, c)) = queue.pop_front() {
        if spec.cell(r, c) == CellKind::Goal {
            continue;
        }
        for (dr, dc) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)] {
            let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
            let i = nr * spec.width + nc;
            if !seen[i] && matches!(spec.cell(nr, nc), CellKind::Empty | CellKind::Goal) {
                seen[i] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    seen
}

#[test]
fn labels_match_lookahead_oracle_on_s9n1() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 0).unwrap();
    let mut undesirable = 0;
    for s in spec.reachable_states() {
        let label = spec.classify_state(&s);
        assert_eq!(label, oracle_label(&spec, &s), "state {:?}", s.pose());
        undesirable += (label == SafetyLabel::Undesirable) as usize;
    }
    assert!(undesirable > 0);
}

#[test]
fn reachable_states_agree_with_bfs() {
    for seed in 0..10 {
        let spec = GridSpec::generate_crossing(9, 2, ObstacleKind::Lava, seed).unwrap();
        let cells = bfs_cells(&spec);
        let mut from_spec = vec![false; cells.len()];
        for s in spec.reachable_states() {
            from_spec[s.row * spec.width + s.col] = true;
        }
        for (i, (&a, &b)) in cells.iter().zip(&from_spec).enumerate() {
            if spec.cells[i] == CellKind::Empty {
                assert_eq!(a, b, "seed {seed} cell {i}");
            }
        }
    }
}

#[test]
fn observation_is_nine_planes_of_the_grid() {
    let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, 3).unwrap();
    let obs = spec.observe(&spec.start_state());
    assert_eq!(obs.len(), 9 * 9 * 9);
    assert_eq!(obs.len(), spec.observation_len());
    assert!(obs.data.iter().all(|&v| v == 0.0 || v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_deterministic_and_solvable(size in 5usize..=13, crossings in 1usize..=3, seed in 0u64..10_000, lava in any::<bool>()) {
        let kind = if lava { ObstacleKind::Lava } else { ObstacleKind::Wall };
        let spec = match GridSpec::generate_crossing(size, crossings, kind, seed) {
            Ok(spec) => spec,
            Err(_) => {
                prop_assert!(size < 7 && crossings == 3);
                return Ok(());
            }
        };
        let again = GridSpec::generate_crossing(size, crossings, kind, seed).unwrap();
        prop_assert_eq!(&spec, &again);
        prop_assert_eq!(spec.max_steps, 4 * size * size);
        for i in 0..size {
            for (r, c) in [(0, i), (size - 1, i), (i, 0), (i, size - 1)] {
                prop_assert_eq!(spec.cell(r, c), CellKind::Wall);
            }
        }
        let cells = bfs_cells(&spec);
        prop_assert!(cells[spec.goal.0 * size + spec.goal.1], "goal unreachable");
        let text = spec.to_map_string();
        prop_assert_eq!(GridSpec::parse_map(&text).unwrap(), spec);
    }

    #[test]
    fn step_respects_dynamics(seed in 0u64..500, pick in any::<prop::sample::Index>(), a in 0usize..3) {
        let spec = GridSpec::generate_crossing(9, 1, ObstacleKind::Lava, seed).unwrap();
        let states = spec.reachable_states();
        let s = states[pick.index(states.len())];
        let action = Action::from_index(a).unwrap();
        let t = spec.step(&s, action).unwrap();
        match action {
            Action::TurnLeft => prop_assert_eq!(t.next_state.pose(), (s.row, s.col, s.direction.turn_left())),
            Action::TurnRight => prop_assert_eq!(t.next_state.pose(), (s.row, s.col, s.direction.turn_right())),
            Action::Forward => {
                let (dr, dc) = s.direction.delta();
                let (r, c) = ((s.row as isize + dr) as usize, (s.col as isize + dc) as usize);
                if spec.cell(r, c) == CellKind::Wall {
                    prop_assert_eq!(t.next_state.pose(), s.pose());
                } else {
                    prop_assert_eq!(t.next_state.pose(), (r, c, s.direction));
                }
            }
        }
        let cell = spec.cell(t.next_state.row, t.next_state.col);
        prop_assert_eq!(t.violated, cell == CellKind::Lava);
        prop_assert_eq!(t.terminated, cell == CellKind::Lava || cell == CellKind::Goal);
        prop_assert_eq!(t.reward, if cell == CellKind::Goal { 1.0 } else { 0.0 });
        prop_assert_eq!(spec.index_of(&s), spec.state_index(s.row, s.col, s.direction));
        prop_assert_eq!(spec.state_at(spec.index_of(&s)), s);
        for d in Direction::ALL {
            prop_assert_eq!(d.turn_left().turn_right(), d);
        }
    }
}
