use std::sync::Arc;

use level2_core::constraints::{BoxConstraint, BoxTarget, ConstraintSet, StageConstraint};
use level2_core::cost::{QuadraticCost, StageCost};
use level2_core::dynamics::DynamicsModel;
use level2_core::lq::{assemble_kkt, lq_sensitivity, solve_lq_equilibrium};
use level2_core::mcp::{
    check_strict_complementarity, sensitivity, solve_mcp, transcribe, warm_start_shift,
    SolveStatus, SolverSettings,
};
use level2_core::scenario::{
    counterexample_game, counterexample_truth, lane_params, make_lane_change_game, LaneChangeConfig,
};
use level2_core::{AgentParams, Error, ParameterizedGame};
use nalgebra::{DMatrix, DVector};

fn tight() -> SolverSettings {
    SolverSettings {
        tol: 1e-12,
        ..Default::default()
    }
}

#[test]
fn unconstrained_lq_matches_closed_form() {
    let game = counterexample_game().unwrap();
    let truth = counterexample_truth();
    for i in 0..2 {
        let problem = transcribe(&game, truth.row(i)).unwrap();
        let kkt = assemble_kkt(&game, truth.row(i), game.x_init()).unwrap();
        let lin = problem.linearize(&DVector::zeros(problem.dim())).unwrap();
        assert!((lin.dense_jacobian(problem.layout()) - &kkt.m).amax() < 1e-15);
        assert!(lin.f_ineq.is_empty());

        let sol = solve_mcp(
            &problem,
            &DVector::zeros(problem.dim()),
            &SolverSettings::default(),
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert_eq!(sol.iterations, 1);
        let eq = solve_lq_equilibrium(&kkt).unwrap();
        assert!((&sol.z - &eq.z).amax() < 1e-10);

        let s_mcp = sensitivity(&problem, &sol, 1e-5).unwrap();
        let s_lq = lq_sensitivity(&game, &kkt, &eq).unwrap();
        assert!((s_mcp - s_lq).amax() < 1e-9);
    }
}

/// One scalar state, `x_1 = x_0 + u_0`, cost `½u²`, constraint `x ≥ 1`
/// from `x_0 = 0`: the optimum is `u_0 = 1` with multiplier `γ = 1`.
fn scalar_bound_game() -> ParameterizedGame {
    let one = DMatrix::identity(1, 1);
    let dynamics = DynamicsModel::shared_linear(one.clone(), vec![one.clone()]).unwrap();
    let cost: Arc<dyn StageCost> = Arc::new(QuadraticCost::new(1, one).unwrap());
    let bound: Arc<dyn StageConstraint> = Arc::new(
        BoxConstraint::new(BoxTarget::State, &[0], &[1.0], &[f64::INFINITY], 1, 1).unwrap(),
    );
    let constraints = ConstraintSet {
        equality: vec![vec![]],
        inequality: vec![vec![bound]],
        shared_inequality: vec![],
    };
    ParameterizedGame::new(dynamics, vec![cost], constraints, 2, DVector::zeros(1)).unwrap()
}

#[test]
fn scalar_bound_has_unit_multiplier() {
    let game = scalar_bound_game();
    let row = vec![AgentParams::scalar(0.0).unwrap()];
    let problem = transcribe(&game, &row).unwrap();
    assert_eq!(problem.layout().n_gamma, 1);
    let sol = solve_mcp(&problem, &problem.cold_start(), &SolverSettings::default()).unwrap();
    assert!(sol.converged());
    assert!((sol.gamma[0] - 1.0).abs() < 1e-6);
    assert!(sol.f_ineq[0].abs() < 1e-6);
    let partition = check_strict_complementarity(&sol, 1e-5);
    assert_eq!(partition.active, vec![0]);
    assert!(partition.degenerate.is_empty());
}

#[test]
fn interior_solution_is_all_inactive() {
    let game = scalar_bound_game()
        .with_initial_state(DVector::from_element(1, 3.0))
        .unwrap();
    let row = vec![AgentParams::scalar(0.0).unwrap()];
    let problem = transcribe(&game, &row).unwrap();
    let sol = solve_mcp(&problem, &problem.cold_start(), &SolverSettings::default()).unwrap();
    assert!(sol.converged());
    let partition = check_strict_complementarity(&sol, 1e-5);
    assert_eq!(partition.inactive, vec![0]);
}

#[test]
fn degenerate_bound_blocks_sensitivity() {
    // Starting exactly on the bound with no incentive to move: γ = F = 0.
    let game = scalar_bound_game()
        .with_initial_state(DVector::from_element(1, 1.0))
        .unwrap();
    let row = vec![AgentParams::scalar(0.0).unwrap()];
    let problem = transcribe(&game, &row).unwrap();
    let sol = solve_mcp(&problem, &problem.cold_start(), &SolverSettings::default()).unwrap();
    assert!(sol.converged());
    assert_eq!(check_strict_complementarity(&sol, 1e-5).degenerate, vec![0]);
    assert!(matches!(
        sensitivity(&problem, &sol, 1e-5),
        Err(Error::Degenerate { .. })
    ));
}

#[test]
fn lane_change_dimensions() {
    let game = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
    let row = lane_params([1.0, 1.0], 1.0, 1.0).unwrap();
    let problem = transcribe(&game, lane_row(&row, 0)).unwrap();
    let l = problem.layout();
    // Positions at the second step are fixed by the initial state, so the
    // shared collision row starts at the third step. Per agent: 8 state
    // bounds from the second step on and 4 control bounds at every step.
    assert_eq!(l.n_gamma, 13 + 2 * (14 * 8 + 15 * 4));
    assert_eq!(l.n_w(), 120 + 60 + 112 + 8);
}

fn lane_row(set: &level2_core::Level2ParamSet, i: usize) -> &[AgentParams] {
    set.row(i)
}

#[test]
fn lane_change_solution_quality_and_warm_start() {
    let game = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
    let set = lane_params([1.0, 1.0], 1.0, 1.0).unwrap();
    let problem = transcribe(&game, set.row(1)).unwrap();
    let settings = SolverSettings::default();
    let sol = solve_mcp(&problem, &problem.cold_start(), &settings).unwrap();
    assert!(
        sol.converged(),
        "{:?} residual {}",
        sol.status,
        sol.residual_norm
    );
    assert!(sol.equality_residual() <= 1e-6);
    assert!(sol.complementarity_residual() <= 1e-2);
    assert!(sol.sign_violation() <= 1e-6);

    // Re-solving from the shifted solution after three executed steps.
    let states = problem.layout().states(&sol.z);
    let shifted_game = game.with_initial_state(states[3].clone()).unwrap();
    let next = transcribe(&shifted_game, set.row(1)).unwrap();
    let warm = warm_start_shift(&next, Some(&sol.z), 3);
    let warm_sol = solve_mcp(&next, &warm, &settings).unwrap();
    let cold_sol = solve_mcp(&next, &next.cold_start(), &settings).unwrap();
    assert!(warm_sol.converged() && cold_sol.converged());
    assert!(warm_sol.residual_norm <= 1e-6);

    let full_shift = warm_start_shift(&next, Some(&sol.z), 15);
    assert_eq!(full_shift, next.cold_start());
}

#[test]
fn cold_start_drifts_at_constant_velocity() {
    let game = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
    let set = lane_params([1.0, 1.0], 1.0, 1.0).unwrap();
    let problem = transcribe(&game, set.row(0)).unwrap();
    let states = problem.layout().states(&problem.cold_start());
    assert!((states[10][1] - 2.0).abs() < 1e-12);
    assert!((states[10][5] - 1.9).abs() < 1e-12);
    assert_eq!(states[10][0], 1.0);
}

fn central_difference(
    game: &ParameterizedGame,
    row: &[AgentParams],
    z0: &DVector<f64>,
    k: usize,
    h: f64,
) -> DVector<f64> {
    let mut flat = level2_core::params::flatten_row(row);
    let dims: Vec<usize> = row.iter().map(|p| p.dim()).collect();
    let mut solve = |delta: f64| {
        flat[k] += delta;
        let r = level2_core::params::unflatten_row(&flat, &dims).unwrap();
        flat[k] -= delta;
        let problem = transcribe(game, &r).unwrap();
        solve_mcp(&problem, z0, &tight())
            .unwrap()
            .into_converged()
            .unwrap()
            .z
    };
    (solve(h) - solve(-h)) / (2.0 * h)
}

#[test]
fn lane_change_sensitivity_matches_finite_differences() {
    let game = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
    // Agent 2 believes agent 1 keeps the top lane and wants it too, so the
    // collision constraint binds along the plan.
    let set = lane_params([1.0, 1.0], 1.0, 1.0).unwrap();
    let row = set.row(1);
    let problem = transcribe(&game, row).unwrap();
    let sol = solve_mcp(&problem, &problem.cold_start(), &tight())
        .unwrap()
        .into_converged()
        .unwrap();
    let partition = check_strict_complementarity(&sol, 1e-5);
    let collision_active = partition.active.iter().any(|&k| {
        problem
            .layout()
            .inequalities
            .iter()
            .any(|e| e.agent.is_none() && e.offset == k)
    });
    assert!(
        collision_active,
        "scenario should exercise the collision constraint"
    );
    let s = sensitivity(&problem, &sol, 1e-5).unwrap();
    let traj = problem.layout().trajectory_dim();
    for k in 0..2 {
        let fd = central_difference(&game, row, &sol.z, k, 1e-5);
        let analytic = s.column(k).rows(0, traj).into_owned();
        let fd = fd.rows(0, traj).into_owned();
        let err = (&analytic - &fd).norm() / fd.norm().max(1e-8);
        assert!(err <= 1e-4, "parameter {k}: relative error {err:e}");
    }
}

#[test]
fn decoupled_costs_give_zero_cross_sensitivity() {
    // Vehicles far apart longitudinally: the collision constraint never
    // binds and each agent's plan ignores the other's parameter.
    let config = LaneChangeConfig {
        initial_states: [[1.0, 20.0, 0.0, 1.0], [3.2, 0.9, 0.0, 1.0]],
        ..Default::default()
    };
    let game = make_lane_change_game(&config).unwrap();
    let set = lane_params([1.0, 3.0], 3.0, 1.0).unwrap();
    let problem = transcribe(&game, set.row(0)).unwrap();
    let sol = solve_mcp(&problem, &problem.cold_start(), &tight()).unwrap();
    let s = sensitivity(&problem, &sol, 1e-5).unwrap();
    let l = problem.layout();
    for t in 0..l.horizon {
        for r in 0..4 {
            assert!(s[(l.x(t) + r, 1)].abs() < 1e-12);
        }
        for r in 0..2 {
            assert!(s[(l.u(t) + r, 1)].abs() < 1e-12);
        }
    }
}
