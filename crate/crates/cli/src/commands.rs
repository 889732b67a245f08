//! The four experiments. Each `compute_*` function returns its results and
//! each `run_*` function also writes them under the output directory.

use std::path::Path;

use level2_core::inverse::{
    online_infer, solve_inverse, solve_inverse_level1, InferenceMode, InverseResult, OnlineEstimate,
};
use level2_core::linalg::{central_difference, relative_error};
use level2_core::lq::{
    heterogeneity, level1_bounds, lq_level2_loss, lq_loss_gradient, lq_observations,
};
use level2_core::mcp::SolveStatus;
use level2_core::observation::ObservationModel;
use level2_core::scenario::{
    counterexample_candidate, counterexample_truth, identity_lq_game, identity_q_params,
    lane_params, lq_sweep_truth, make_lane_change_game,
};
use level2_core::sim::{
    instance_seed, lane_change_time, observe, run_fictitious_play, SimFailure, SimRecord,
    WindowStateEstimator,
};
use level2_core::{Level2ParamSet, LqSolver, McpEquilibriumSolver};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{
    Command, ConfigFile, CounterexampleSettings, LaneSweepSettings, LqSweepSettings, OnlineSettings,
};
use crate::error::{CliError, Result};
use crate::output::{float, opt, opt_float, provenance, write_table};

/// Published losses at the two candidates and their midpoint.
pub const PUBLISHED_LOSSES: [f64; 3] = [0.0612, 0.6025, 0.4041];
/// Allowed absolute deviation from [`PUBLISHED_LOSSES`].
pub const PUBLISHED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CounterexampleReport {
    /// Losses at the two candidates and at their midpoint.
    pub losses: [f64; 3],
    /// `½(L(Θ̂₁) + L(Θ̂₂))`.
    pub chord: f64,
    /// Whether the chord lies strictly below the midpoint loss.
    pub non_convex: bool,
    /// Largest deviation from the published losses, on the published
    /// instance only.
    pub published_deviation: Option<f64>,
    /// Relative error between analytic and finite-difference gradients at
    /// the two candidates and their midpoint.
    pub gradient_errors: Option<[f64; 3]>,
}

impl CounterexampleReport {
    pub fn verdict(&self) -> &'static str {
        if self.non_convex {
            "non-convex"
        } else {
            "not-witnessed"
        }
    }

    pub fn matches_published(&self) -> Option<bool> {
        self.published_deviation.map(|d| d <= PUBLISHED_TOLERANCE)
    }
}

pub fn compute_lq_counterexample(s: &CounterexampleSettings) -> Result<CounterexampleReport> {
    s.validate()?;
    let game = identity_lq_game(2, s.x_init)?;
    let data = lq_observations(&game, &counterexample_truth())?;
    let a = counterexample_candidate(s.couplings[0]);
    let b = counterexample_candidate(s.couplings[1]);
    let mid_flat: Vec<f64> = a
        .to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let points = [a, b.clone(), b.with_flat(&mid_flat)?];
    let mut losses = [0.0; 3];
    for (l, p) in losses.iter_mut().zip(&points) {
        *l = lq_level2_loss(&game, p, &data)?;
    }
    let chord = 0.5 * (losses[0] + losses[1]);
    let published_deviation = s.is_reference().then(|| {
        losses
            .iter()
            .zip(PUBLISHED_LOSSES)
            .map(|(l, p)| (l - p).abs())
            .fold(0.0, f64::max)
    });
    let gradient_errors = if s.gradient_check {
        let mut errs = [0.0; 3];
        for (e, p) in errs.iter_mut().zip(&points) {
            let analytic = lq_loss_gradient(&game, p, &data)?;
            let fd = central_difference(
                |v| lq_level2_loss(&game, &p.with_flat(v)?, &data),
                &p.to_flat(),
                s.fd_step,
            )?;
            *e = relative_error(&analytic, &fd);
        }
        Some(errs)
    } else {
        None
    };
    Ok(CounterexampleReport {
        losses,
        chord,
        non_convex: chord < losses[2],
        published_deviation,
        gradient_errors,
    })
}

/// Writes `lq_counterexample.csv`; a mismatch with the published losses
/// is reported as an error after the file is written.
pub fn run_lq_counterexample(
    cfg: &ConfigFile<CounterexampleSettings>,
    out: &Path,
) -> Result<CounterexampleReport> {
    let report = compute_lq_counterexample(&cfg.settings)?;
    let published = report.published_deviation.is_some();
    let pub_value = |k: usize| {
        if published {
            float(PUBLISHED_LOSSES[k])
        } else {
            String::new()
        }
    };
    let mut rows = vec![
        vec!["loss_theta1".into(), float(report.losses[0]), pub_value(0)],
        vec!["loss_theta2".into(), float(report.losses[1]), pub_value(1)],
        vec![
            "loss_midpoint".into(),
            float(report.losses[2]),
            pub_value(2),
        ],
        vec!["chord_midpoint".into(), float(report.chord), String::new()],
        vec![
            "verdict".into(),
            report.verdict().into(),
            if published {
                "non-convex".into()
            } else {
                String::new()
            },
        ],
    ];
    if let Some(dev) = report.published_deviation {
        rows.push(vec![
            "max_published_deviation".into(),
            float(dev),
            float(PUBLISHED_TOLERANCE),
        ]);
    }
    if let Some(errs) = report.gradient_errors {
        for (name, e) in ["theta1", "theta2", "midpoint"].iter().zip(errs) {
            rows.push(vec![
                format!("gradient_relative_error_{name}"),
                float(e),
                String::new(),
            ]);
        }
    }
    let header = provenance(Command::LqCounterexample.name(), cfg)?;
    write_table(
        &out.join("lq_counterexample.csv"),
        &header,
        &["quantity", "value", "published"],
        &rows,
    )?;
    match report.matches_published() {
        Some(false) => Err(CliError::PaperMismatch(format!(
            "losses {:?} vs {:?} (largest deviation {:.4})",
            report.losses,
            PUBLISHED_LOSSES,
            report.published_deviation.unwrap_or_default()
        ))),
        _ => Ok(report),
    }
}

#[derive(Clone, Debug)]
pub struct LqSweepRow {
    pub s: f64,
    pub outcome: std::result::Result<LqSweepResult, String>,
}

#[derive(Clone, Debug)]
pub struct LqSweepResult {
    pub heterogeneity: f64,
    pub level1: InverseSummary,
    pub level2: InverseSummary,
    pub bound_lower: f64,
    pub bound_upper: f64,
}

#[derive(Clone, Debug)]
pub struct InverseSummary {
    pub loss: f64,
    pub iterations: usize,
    pub status: String,
}

impl From<&InverseResult> for InverseSummary {
    fn from(r: &InverseResult) -> Self {
        Self {
            loss: r.final_loss(),
            iterations: r.iterations(),
            status: format!("{:?}", r.status),
        }
    }
}

fn lq_sweep_instance(s: f64, settings: &LqSweepSettings) -> level2_core::Result<LqSweepResult> {
    let game = identity_lq_game(settings.horizon, settings.x_init)?;
    let truth = lq_sweep_truth(s);
    let data = lq_observations(&game, &truth)?;
    let bounds = level1_bounds(&game, &truth)?;
    let theta0 = identity_q_params();
    let l2 = solve_inverse(&game, &data, &theta0, &settings.inverse, &LqSolver)?;
    let l1 = solve_inverse_level1(&game, &data, theta0.row(0), &settings.inverse, &LqSolver)?;
    Ok(LqSweepResult {
        heterogeneity: heterogeneity(&game, &truth)?,
        level1: (&l1).into(),
        level2: (&l2).into(),
        bound_lower: bounds.lower,
        bound_upper: bounds.upper,
    })
}

/// One row per `s`, in input order; a failed instance keeps its error.
pub fn compute_lq_sweep(settings: &LqSweepSettings) -> Result<Vec<LqSweepRow>> {
    settings.validate()?;
    Ok(settings
        .s_values
        .par_iter()
        .map(|&s| {
            let outcome = lq_sweep_instance(s, settings).map_err(|e| {
                warn!("lq sweep instance s = {s} failed: {e}");
                e.to_string()
            });
            LqSweepRow { s, outcome }
        })
        .collect())
}

pub fn run_lq_sweep(cfg: &ConfigFile<LqSweepSettings>, out: &Path) -> Result<Vec<LqSweepRow>> {
    let rows = compute_lq_sweep(&cfg.settings)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok(v) => vec![
                float(r.s),
                float(v.heterogeneity),
                float(v.level1.loss),
                float(v.level2.loss),
                float(v.bound_lower),
                float(v.bound_upper),
                v.level1.iterations.to_string(),
                v.level2.iterations.to_string(),
                v.level1.status.clone(),
                v.level2.status.clone(),
                String::new(),
            ],
            Err(e) => {
                let mut row = vec![float(r.s)];
                row.extend(std::iter::repeat_n(String::new(), 9));
                row.push(e.clone());
                row
            }
        })
        .collect();
    let header = provenance(Command::LqSweep.name(), cfg)?;
    write_table(
        &out.join("lq_sweep.csv"),
        &header,
        &[
            "s",
            "heterogeneity",
            "level1_loss",
            "level2_loss",
            "bound_lower",
            "bound_upper",
            "level1_iterations",
            "level2_iterations",
            "level1_status",
            "level2_status",
            "error",
        ],
        &table,
    )?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct LaneSweepRow {
    pub index: usize,
    /// Vehicle 1's estimate of vehicle 2's target.
    pub theta_12: f64,
    /// Vehicle 2's estimate of vehicle 1's target.
    pub theta_21: f64,
    pub seed: u64,
    /// Step at which vehicle 2 settled at its target; `None` when it did
    /// not or the run aborted.
    pub lane_change_time: Option<usize>,
    pub failure: Option<SimFailure>,
    pub quality: SolveQuality,
    pub record: SimRecord,
}

impl LaneSweepRow {
    pub fn outcome(&self) -> &'static str {
        match (&self.failure, self.lane_change_time) {
            (Some(_), _) => "solver-failure",
            (None, Some(_)) => "success",
            (None, None) => "no-lane-change",
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.lane_change_time.is_some()
    }
}

/// Worst residuals over a run's converged solves.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveQuality {
    pub solves: usize,
    pub unconverged: usize,
    pub equality_residual: f64,
    pub complementarity_residual: f64,
    pub sign_violation: f64,
}

impl SolveQuality {
    pub fn of(record: &SimRecord) -> Self {
        let mut q = Self {
            solves: record.solver_stats.len(),
            ..Self::default()
        };
        for s in record.solver_stats.iter().map(|r| &r.stats) {
            if s.status != SolveStatus::Converged {
                q.unconverged += 1;
                continue;
            }
            q.equality_residual = q.equality_residual.max(s.equality_residual);
            q.complementarity_residual = q.complementarity_residual.max(s.complementarity_residual);
            q.sign_violation = q.sign_violation.max(s.sign_violation);
        }
        q
    }
}

/// The `(θ^{1,2}, θ^{2,1})` grid in row-major order over `estimates`.
pub fn lane_grid(estimates: &[f64]) -> Vec<(f64, f64)> {
    estimates
        .iter()
        .flat_map(|&a| estimates.iter().map(move |&b| (a, b)))
        .collect()
}

pub fn compute_lane_forward_sweep(
    settings: &LaneSweepSettings,
    seed: u64,
) -> Result<Vec<LaneSweepRow>> {
    settings.validate()?;
    let game = make_lane_change_game(&settings.scenario)?;
    let solver = McpEquilibriumSolver::new(settings.solver.clone())?;
    let cells = lane_grid(&settings.estimates);
    cells
        .par_iter()
        .enumerate()
        .map(|(index, &(theta_12, theta_21))| {
            let truth = lane_params(settings.own, theta_12, theta_21)?;
            let seed = instance_seed(seed, index as u64);
            let sim = level2_core::sim::SimSettings {
                seed,
                ..settings.sim.clone()
            };
            let record = run_fictitious_play(&game, &truth, &sim, &solver)?;
            let lane_change_time = match record.failure {
                Some(_) => None,
                None => lane_change_time(&record, &game, 1, settings.own[1], settings.lane_tol),
            };
            info!("lane sweep instance {index} ({theta_12}, {theta_21}): {lane_change_time:?}");
            Ok(LaneSweepRow {
                index,
                theta_12,
                theta_21,
                seed,
                lane_change_time,
                failure: record.failure.clone(),
                quality: SolveQuality::of(&record),
                record,
            })
        })
        .collect()
}

pub fn run_lane_forward_sweep(
    cfg: &ConfigFile<LaneSweepSettings>,
    out: &Path,
) -> Result<Vec<LaneSweepRow>> {
    let rows = compute_lane_forward_sweep(&cfg.settings, cfg.seed)?;
    let header = provenance(Command::LaneForwardSweep.name(), cfg)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                float(r.theta_12),
                float(r.theta_21),
                r.seed.to_string(),
                r.outcome().into(),
                opt(r.lane_change_time),
                opt(r.failure.as_ref().map(|f| f.t)),
                opt(r.failure.as_ref().map(|f| f.agent + 1)),
                r.quality.solves.to_string(),
                r.quality.unconverged.to_string(),
                float(r.quality.equality_residual),
                float(r.quality.complementarity_residual),
                float(r.quality.sign_violation),
                r.failure
                    .as_ref()
                    .map(|f| f.message.clone())
                    .unwrap_or_default(),
            ]
        })
        .collect();
    write_table(
        &out.join("lane_forward_sweep.csv"),
        &header,
        &[
            "index",
            "theta_12",
            "theta_21",
            "seed",
            "outcome",
            "lane_change_time",
            "failure_t",
            "failure_agent",
            "solves",
            "unconverged_solves",
            "max_equality_residual",
            "max_complementarity_residual",
            "max_sign_violation",
            "failure_message",
        ],
        &table,
    )?;
    if cfg.settings.write_trajectories {
        for r in &rows {
            let header = format!(
                "{header}# instance {}: theta_12 = {}, theta_21 = {}\n",
                r.index, r.theta_12, r.theta_21
            );
            let path = out
                .join("trajectories")
                .join(format!("instance_{:03}.csv", r.index));
            write_trajectory(&path, &header, &r.record)?;
        }
    }
    Ok(rows)
}

const TRAJECTORY_COLUMNS: [&str; 8] = [
    "t", "agent", "p_lat", "p_lon", "v_lat", "v_lon", "F_lat", "F_lon",
];

/// One row per step and vehicle of the executed trajectory.
fn write_trajectory(path: &Path, header: &str, record: &SimRecord) -> Result<()> {
    let ex = &record.executed;
    let mut rows = Vec::with_capacity(2 * ex.len());
    for t in 0..ex.len() {
        for agent in 0..2 {
            let mut row = vec![t.to_string(), (agent + 1).to_string()];
            row.extend(ex.states[t].rows(4 * agent, 4).iter().map(|&v| float(v)));
            row.extend(ex.controls[t].rows(2 * agent, 2).iter().map(|&v| float(v)));
            rows.push(row);
        }
    }
    write_table(path, header, &TRAJECTORY_COLUMNS, &rows)
}

#[derive(Clone, Debug)]
pub struct OnlineReport {
    pub record: SimRecord,
    pub estimates: Vec<OnlineEstimate>,
    /// Vehicle 2's lane-change time in the simulated scenario.
    pub lane_change_time: Option<usize>,
}

pub fn online_truth(truth: [f64; 4]) -> level2_core::Result<Level2ParamSet> {
    lane_params([truth[0], truth[3]], truth[1], truth[2])
}

pub fn compute_lane_infer_online(settings: &OnlineSettings, seed: u64) -> Result<OnlineReport> {
    settings.validate()?;
    let game = make_lane_change_game(&settings.scenario)?;
    let solver = McpEquilibriumSolver::new(settings.solver.clone())?;
    let sim = level2_core::sim::SimSettings {
        seed,
        ..settings.sim.clone()
    };
    let record = run_fictitious_play(&game, &online_truth(settings.truth)?, &sim, &solver)?;
    if let Some(f) = &record.failure {
        return Err(CliError::SimulationAborted(f.clone()));
    }
    let model = ObservationModel::own_state_entries(&game, &[0, 1]);
    let stream = observe(&record, &model, sim.noise_c, seed, None)?;
    let window_game = game.with_horizon(settings.window)?;
    let estimator = WindowStateEstimator::for_game(&window_game, settings.scenario.dt);
    let theta0 = Level2ParamSet::from_values(&[
        vec![vec![settings.theta0], vec![settings.theta0]],
        vec![vec![settings.theta0], vec![settings.theta0]],
    ])?;
    let estimates = online_infer(
        &window_game,
        &stream,
        settings.mode,
        &settings.inverse,
        &theta0,
        &solver,
        &|w| estimator.estimate(w),
    )?;
    let lane_change_time =
        lane_change_time(&record, &game, 1, settings.truth[3], settings.lane_tol);
    Ok(OnlineReport {
        record,
        estimates,
        lane_change_time,
    })
}

pub fn run_lane_infer_online(cfg: &ConfigFile<OnlineSettings>, out: &Path) -> Result<OnlineReport> {
    let report = compute_lane_infer_online(&cfg.settings, cfg.seed)?;
    let header = provenance(Command::LaneInferOnline.name(), cfg)?;
    let level2 = cfg.settings.mode == InferenceMode::Level2;
    let mut columns = vec!["t"];
    if level2 {
        columns.extend(["theta_11", "theta_12", "theta_21", "theta_22"]);
    } else {
        columns.extend(["theta_1", "theta_2"]);
    }
    columns.extend(["loss", "iterations", "status", "failure"]);
    let table: Vec<Vec<String>> = report
        .estimates
        .iter()
        .map(|e| {
            let values = if level2 {
                e.theta.to_flat()
            } else {
                e.theta.flat_row(0)
            };
            let mut row = vec![e.end.to_string()];
            row.extend(values.iter().map(|&v| float(v)));
            row.push(opt_float(e.failure.is_none().then_some(e.loss)));
            row.push(e.iterations.to_string());
            row.push(opt(e.status.map(|s| format!("{s:?}"))));
            row.push(e.failure.clone().unwrap_or_default());
            row
        })
        .collect();
    write_table(
        &out.join("lane_infer_online.csv"),
        &header,
        &columns,
        &table,
    )?;
    write_trajectory(
        &out.join("lane_infer_online_trajectory.csv"),
        &header,
        &report.record,
    )?;
    Ok(report)
}
