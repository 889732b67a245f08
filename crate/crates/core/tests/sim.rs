use level2_core::mcp::SolveStatus;
use level2_core::observation::ObservationModel;
use level2_core::scenario::{lane_params, make_lane_change_game, LaneChangeConfig};
use level2_core::sim::{
    instance_seed, lane_change_time, observe, run_fictitious_play, settle_time, FailurePolicy,
    SimRecord, SimSettings, WindowStateEstimator,
};
use level2_core::{McpEquilibriumSolver, ParameterizedGame, TrajectoryBundle};
use nalgebra::DVector;

fn lane_game() -> ParameterizedGame {
    make_lane_change_game(&LaneChangeConfig::default()).unwrap()
}

fn short_settings() -> SimSettings {
    SimSettings {
        sim_steps: 30,
        ..SimSettings::default()
    }
}

fn run(est_1_of_2: f64, est_2_of_1: f64, settings: &SimSettings) -> SimRecord {
    let truth = lane_params([1.0, 1.0], est_1_of_2, est_2_of_1).unwrap();
    run_fictitious_play(
        &lane_game(),
        &truth,
        settings,
        &McpEquilibriumSolver::default(),
    )
    .unwrap()
}

/// A record holding the given states, for metric tests.
fn record_of(values: &[f64]) -> SimRecord {
    let states: Vec<_> = values
        .iter()
        .map(|&v| DVector::from_element(1, v))
        .collect();
    let controls = vec![DVector::zeros(1); values.len()];
    SimRecord {
        executed: TrajectoryBundle::new(states, controls),
        replans: Vec::new(),
        solver_stats: Vec::new(),
        failure: None,
    }
}

#[test]
fn reruns_are_identical() {
    let a = run(2.0, 2.0, &short_settings());
    let b = run(2.0, 2.0, &short_settings());
    assert_eq!(a.executed, b.executed);
    assert_eq!(a.solver_stats, b.solver_stats);
}

#[test]
fn executed_states_follow_the_dynamics() {
    let game = lane_game();
    let rec = run(3.0, 3.0, &short_settings());
    assert!(rec.completed());
    let ex = &rec.executed;
    assert_eq!(ex.len(), 30);
    assert_eq!(ex.states[0], *game.x_init());
    for t in 0..ex.len() - 1 {
        let next = game.step_dynamics(&ex.states[t], &ex.controls[t]).unwrap();
        assert!((next - &ex.states[t + 1]).amax() < 1e-12);
    }
}

#[test]
fn replans_follow_the_schedule_and_execute_own_controls() {
    let game = lane_game();
    let rec = run(1.5, 1.0, &short_settings());
    assert!(rec.completed());
    let times: Vec<_> = rec.replans.iter().map(|r| r.t).collect();
    assert_eq!(times, (0..30).step_by(3).collect::<Vec<_>>());
    assert_eq!(rec.solver_stats.len(), 2 * times.len());
    for r in &rec.replans {
        for i in 0..2 {
            let b = game.control_block(i);
            let planned = r.plans[i].controls[0].rows(b.start, b.len());
            let executed = rec.executed.controls[r.t].rows(b.start, b.len());
            assert!((planned - executed).amax() < 1e-15);
        }
    }
}

#[test]
fn homogeneous_beliefs_give_identical_plans() {
    let rec = run(1.0, 1.0, &short_settings());
    for r in &rec.replans {
        let (a, b) = (&r.plans[0], &r.plans[1]);
        for t in 0..a.len() {
            assert!((&a.states[t] - &b.states[t]).amax() < 1e-6);
        }
    }
}

#[test]
fn aligned_beliefs_change_lanes_early() {
    let game = lane_game();
    let rec = run(1.0, 1.0, &SimSettings::default());
    assert!(rec.completed());
    let t = lane_change_time(
        &rec,
        &game,
        1,
        LaneChangeConfig::default().top_lane_center(),
        0.25,
    );
    assert!(matches!(t, Some(t) if t < 75), "{t:?}");
    assert!(rec
        .solver_stats
        .iter()
        .all(|s| s.stats.status == SolveStatus::Converged));
}

#[test]
fn best_effort_policy_completes_the_run() {
    let settings = SimSettings {
        on_solver_failure: FailurePolicy::BestEffort,
        ..short_settings()
    };
    let rec = run(3.5, 3.5, &settings);
    assert!(rec.completed());
    assert_eq!(rec.executed.len(), 30);
}

#[test]
fn observation_noise_has_the_configured_scale() {
    let n = 10_000;
    let game = lane_game().with_horizon(2).unwrap();
    let rec = record_of_game(&game, n);
    let model = ObservationModel::own_state_entries(&game, &[0, 1]);
    let clean = observe(&rec, &model, 0.0, 7, None).unwrap();
    let noisy = observe(&rec, &model, 0.1, 7, None).unwrap();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0.0;
    for t in 0..n {
        for i in 0..2 {
            let d = noisy.get(t, i).unwrap() - clean.get(t, i).unwrap();
            sum += d.sum();
            sq += d.norm_squared();
            count += d.len() as f64;
        }
        assert_eq!(
            clean.get(t, 0).unwrap().as_slice(),
            &game.x_init().as_slice()[0..2]
        );
    }
    let mean = sum / count;
    let std = (sq / count - mean * mean).sqrt();
    assert!((std - 0.1).abs() < 0.005, "{std}");
    assert!(mean.abs() < 0.005, "{mean}");
}

/// `n` copies of the game's initial state.
fn record_of_game(game: &ParameterizedGame, n: usize) -> SimRecord {
    SimRecord {
        executed: TrajectoryBundle::new(
            vec![game.x_init().clone(); n],
            vec![DVector::zeros(game.control_dim()); n],
        ),
        replans: Vec::new(),
        solver_stats: Vec::new(),
        failure: None,
    }
}

#[test]
fn missing_observations_leave_the_rest_unchanged() {
    let game = lane_game();
    let rec = record_of_game(&game, 4);
    let model = ObservationModel::own_state_entries(&game, &[0, 1]);
    let mut mask = vec![vec![true, true]; 4];
    mask[1][0] = false;
    let full = observe(&rec, &model, 0.1, 3, None).unwrap();
    let partial = observe(&rec, &model, 0.1, 3, Some(&mask)).unwrap();
    assert!(partial.get(1, 0).is_none());
    assert_eq!(partial.get(3, 1), full.get(3, 1));
}

#[test]
fn settle_time_finds_the_last_entry_into_the_band() {
    assert_eq!(
        settle_time(&record_of(&[3.0, 2.0, 1.1, 1.0, 1.0]), 0, 1.0, 0.25),
        Some(3)
    );
    assert_eq!(
        settle_time(&record_of(&[1.0, 3.0, 1.0, 1.0]), 0, 1.0, 0.25),
        Some(3)
    );
    assert_eq!(
        settle_time(&record_of(&[1.0, 1.0, 3.0]), 0, 1.0, 0.25),
        None
    );
    assert_eq!(settle_time(&record_of(&[1.0, 1.0]), 0, 1.0, 0.25), Some(1));
}

#[test]
fn instance_seeds_are_stable_and_distinct() {
    let seeds: Vec<_> = (0..64).map(|k| instance_seed(42, k)).collect();
    assert_eq!(
        seeds,
        (0..64).map(|k| instance_seed(42, k)).collect::<Vec<_>>()
    );
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 64);
    assert_ne!(instance_seed(42, 0), instance_seed(43, 0));
}

#[test]
fn window_estimator_recovers_constant_acceleration_motion() {
    let game = lane_game();
    let dt = 0.1;
    let n = 10;
    // p(t) = p0 + v0 t + a t² / 2 per coordinate.
    let (p0, v0, a) = (
        [1.0, 2.0, 3.0, 4.0],
        [0.5, -1.0, 0.0, 2.0],
        [0.3, 0.0, -0.2, 0.1],
    );
    let states: Vec<_> = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let p = |c: usize| p0[c] + v0[c] * t + 0.5 * a[c] * t * t;
            DVector::from_vec(vec![p(0), p(1), 0.0, 0.0, p(2), p(3), 0.0, 0.0])
        })
        .collect();
    let rec = SimRecord {
        executed: TrajectoryBundle::new(states, vec![DVector::zeros(4); n]),
        replans: Vec::new(),
        solver_stats: Vec::new(),
        failure: None,
    };
    let model = ObservationModel::own_state_entries(&game, &[0, 1]);
    let window = observe(&rec, &model, 0.0, 0, None).unwrap();
    let x = WindowStateEstimator::for_game(&game, dt)
        .estimate(&window)
        .unwrap();
    let expected = DVector::from_vec(vec![p0[0], p0[1], v0[0], v0[1], p0[2], p0[3], v0[2], v0[3]]);
    assert!((x - expected).amax() < 1e-9);
}
