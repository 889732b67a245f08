//! Closed-form machinery for unconstrained shared-linear quadratic games.
//!
//! The open-loop Nash equilibrium of `Γ(Θ̂ⁱ)` solves the linear system
//! `M(Θ̂ⁱ) z̄ + S x_init = 0` with `z̄ = [X, U, λ, η]`. Every agent carries
//! its own dynamics multipliers `λ^j_t` and initial-state multiplier `η^j`.
//!
//! Variable layout (`n` state dim, `m` joint control dim, `N` agents):
//! `X` time-major, `U` time-major with agents concatenated, `λ` ordered by
//! `(t, j)`, `η` by `j`. Equation rows: state stationarity `(t, j)`,
//! control stationarity `(t, j)`, dynamics `t`, initial state.

use nalgebra::{DMatrix, DVector};

use crate::cost::QuadraticCost;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::game::{ParameterizedGame, TrajectoryBundle};
use crate::linalg::{check_conditioning, sigma_max, sigma_min};
use crate::observation::{ObservationModel, ObservationSequence};
use crate::params::{AgentParams, Level2ParamSet};

/// Index map of `z̄` and of the KKT equation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KktLayout {
    pub n: usize,
    pub control_dims: Vec<usize>,
    pub horizon: usize,
}

impl KktLayout {
    pub fn from_game(game: &ParameterizedGame) -> Self {
        Self {
            n: game.state_dim(),
            control_dims: game.control_dims(),
            horizon: game.horizon(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.control_dims.len()
    }

    pub fn m(&self) -> usize {
        self.control_dims.iter().sum()
    }

    fn control_offset(&self, agent: usize) -> usize {
        self.control_dims[..agent].iter().sum()
    }

    pub fn dim(&self) -> usize {
        let (n, t, nn) = (self.n, self.horizon, self.n_agents());
        t * n + t * self.m() + nn * (t - 1) * n + nn * n
    }

    pub fn x(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn u(&self, t: usize, agent: usize) -> usize {
        self.horizon * self.n + t * self.m() + self.control_offset(agent)
    }

    pub fn lambda(&self, t: usize, agent: usize) -> usize {
        self.horizon * (self.n + self.m()) + (t * self.n_agents() + agent) * self.n
    }

    pub fn eta(&self, agent: usize) -> usize {
        self.horizon * (self.n + self.m())
            + self.n_agents() * (self.horizon - 1) * self.n
            + agent * self.n
    }

    pub fn row_state_stationarity(&self, t: usize, agent: usize) -> usize {
        (t * self.n_agents() + agent) * self.n
    }

    pub fn row_control_stationarity(&self, t: usize, agent: usize) -> usize {
        self.horizon * self.n_agents() * self.n + t * self.m() + self.control_offset(agent)
    }

    pub fn row_dynamics(&self, t: usize) -> usize {
        self.horizon * (self.n_agents() * self.n + self.m()) + t * self.n
    }

    pub fn row_initial(&self) -> usize {
        self.row_dynamics(self.horizon - 1)
    }
}

/// `M(Θ̂ⁱ)`, `S` and the initial state they were built for.
#[derive(Clone, Debug)]
pub struct KktSystem {
    pub m: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub x_init: DVector<f64>,
    pub layout: KktLayout,
    q: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct LqEquilibrium {
    pub z: DVector<f64>,
    pub layout: KktLayout,
}

impl LqEquilibrium {
    pub fn states(&self) -> Vec<DVector<f64>> {
        let l = &self.layout;
        (0..l.horizon)
            .map(|t| self.z.rows(l.x(t), l.n).into_owned())
            .collect()
    }

    pub fn controls(&self) -> Vec<DVector<f64>> {
        let l = &self.layout;
        (0..l.horizon)
            .map(|t| self.z.rows(l.u(t, 0), l.m()).into_owned())
            .collect()
    }

    pub fn trajectory(&self) -> TrajectoryBundle {
        TrajectoryBundle::new(self.states(), self.controls())
    }
}

/// Rows of `z̄` holding one agent's controls, `E^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMatrix {
    pub rows: Vec<usize>,
    dim: usize,
}

impl SelectorMatrix {
    pub fn for_agent(layout: &KktLayout, agent: usize) -> Self {
        let rows = (0..layout.horizon)
            .flat_map(|t| {
                let start = layout.u(t, agent);
                start..start + layout.control_dims[agent]
            })
            .collect();
        Self {
            rows,
            dim: layout.dim(),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.rows.len(), self.dim);
        for (r, &c) in self.rows.iter().enumerate() {
            e[(r, c)] = 1.0;
        }
        e
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| z[r]))
    }
}

/// Shared `A`, per-agent `B^i` and per-agent costs.
type LqParts<'a> = (&'a DMatrix<f64>, &'a [DMatrix<f64>], Vec<&'a QuadraticCost>);

fn lq_parts(game: &ParameterizedGame) -> Result<LqParts<'_>> {
    let DynamicsModel::SharedLinear { a, b } = game.dynamics() else {
        return Err(Error::UnsupportedGame(
            "LQ machinery needs shared-linear dynamics",
        ));
    };
    if !game.constraints().is_empty() {
        return Err(Error::UnsupportedGame(
            "LQ machinery needs an unconstrained game",
        ));
    }
    let costs = (0..game.n_agents())
        .map(|j| {
            game.cost(j)
                .as_quadratic()
                .ok_or(Error::UnsupportedGame("LQ machinery needs quadratic costs"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((a, b.as_slice(), costs))
}

pub fn assemble_kkt(
    game: &ParameterizedGame,
    row: &[AgentParams],
    x_init: &DVector<f64>,
) -> Result<KktSystem> {
    let (a, b, costs) = lq_parts(game)?;
    game.check_row(row)?;
    let layout = KktLayout::from_game(game);
    if x_init.len() != layout.n {
        return Err(Error::dims("initial state", layout.n, x_init.len()));
    }
    let (n, horizon, nn) = (layout.n, layout.horizon, layout.n_agents());
    let q: Vec<DMatrix<f64>> = costs
        .iter()
        .zip(row)
        .map(|(c, p)| c.q.matrix(p.values()))
        .collect();
    let dim = layout.dim();
    let mut m = DMatrix::zeros(dim, dim);
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    for t in 0..horizon {
        for j in 0..nn {
            let r = layout.row_state_stationarity(t, j);
            m.view_mut((r, layout.x(t)), (n, n)).copy_from(&q[j]);
            if t == 0 {
                m.view_mut((r, layout.eta(j)), (n, n)).copy_from(&eye);
            } else {
                m.view_mut((r, layout.lambda(t - 1, j)), (n, n))
                    .copy_from(&eye);
            }
            if t + 1 < horizon {
                m.view_mut((r, layout.lambda(t, j)), (n, n))
                    .copy_from(&(-&at));
            }
            let mj = layout.control_dims[j];
            let r = layout.row_control_stationarity(t, j);
            m.view_mut((r, layout.u(t, j)), (mj, mj))
                .copy_from(&costs[j].r);
            if t + 1 < horizon {
                m.view_mut((r, layout.lambda(t, j)), (mj, n))
                    .copy_from(&(-b[j].transpose()));
            }
        }
        if t + 1 < horizon {
            let r = layout.row_dynamics(t);
            m.view_mut((r, layout.x(t + 1)), (n, n)).copy_from(&eye);
            m.view_mut((r, layout.x(t)), (n, n)).copy_from(&(-a));
            for j in 0..nn {
                m.view_mut((r, layout.u(t, j)), (n, layout.control_dims[j]))
                    .copy_from(&(-&b[j]));
            }
        }
    }
    let r0 = layout.row_initial();
    m.view_mut((r0, layout.x(0)), (n, n)).copy_from(&eye);
    let mut s = DMatrix::zeros(dim, n);
    s.view_mut((r0, 0), (n, n)).copy_from(&(-&eye));
    Ok(KktSystem {
        m,
        s,
        x_init: x_init.clone(),
        layout,
        q,
    })
}

pub fn solve_lq_equilibrium(kkt: &KktSystem) -> Result<LqEquilibrium> {
    check_conditioning(&kkt.m)?;
    let rhs = -(&kkt.s * &kkt.x_init);
    let z = kkt.m.clone().lu().solve(&rhs).ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    Ok(LqEquilibrium {
        z,
        layout: kkt.layout.clone(),
    })
}

/// Agent `i`'s controls, one vector per step.
pub fn extract_controls(eq: &LqEquilibrium, selector: &SelectorMatrix) -> Vec<DVector<f64>> {
    let flat = selector.apply(&eq.z);
    let per_step = flat.len() / eq.layout.horizon;
    flat.as_slice()
        .chunks(per_step)
        .map(DVector::from_column_slice)
        .collect()
}

/// `(∂M/∂θ_k) z̄` for every entry `k` of the flattened row, as columns.
fn param_rhs(kkt: &KktSystem, game: &ParameterizedGame, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (_, _, costs) = lq_parts(game)?;
    let layout = &kkt.layout;
    let k_total: usize = costs.iter().map(|c| c.q.param_dim()).sum();
    let mut out = DMatrix::zeros(layout.dim(), k_total);
    let mut col = 0;
    for (j, c) in costs.iter().enumerate() {
        for k in 0..c.q.param_dim() {
            let basis = c.q.basis(k);
            for t in 0..layout.horizon {
                let x = z.rows(layout.x(t), layout.n);
                let v = &basis * x;
                out.view_mut((layout.row_state_stationarity(t, j), col), (layout.n, 1))
                    .copy_from(&v);
            }
            col += 1;
        }
    }
    Ok(out)
}

/// `∂z̄/∂θ` for the flattened parameter row: `−M⁻¹ (∂M/∂θ_k) z̄`.
pub fn lq_sensitivity(
    game: &ParameterizedGame,
    kkt: &KktSystem,
    eq: &LqEquilibrium,
) -> Result<DMatrix<f64>> {
    let rhs = param_rhs(kkt, game, &eq.z)?;
    let lu = kkt.m.clone().lu();
    let sol = lu.solve(&rhs).ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    Ok(-sol)
}

/// `∂ℓ/∂y_t` pairs for one agent's misfit, indexed by step.
fn misfit(
    model: &ObservationModel,
    observations: &ObservationSequence,
    agent: usize,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> (f64, Vec<Option<DVector<f64>>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(states.len());
    for t in 0..states.len() {
        match observations.get(t, agent) {
            Some(o) => {
                let r = model.observe(agent, &states[t], &controls[t]) - o;
                loss += 0.5 * r.norm_squared();
                grads.push(Some(model.maps[agent].transpose() * r));
            }
            None => grads.push(None),
        }
    }
    (loss, grads)
}

fn check_observations(game: &ParameterizedGame, observations: &ObservationSequence) -> Result<()> {
    if observations.len() != game.horizon() {
        return Err(Error::dims(
            "observed steps",
            game.horizon(),
            observations.len(),
        ));
    }
    if observations.model().n_agents() != game.n_agents() {
        return Err(Error::dims(
            "observation maps",
            game.n_agents(),
            observations.model().n_agents(),
        ));
    }
    Ok(())
}

/// `Σ_i Σ_t ½‖G^i y_t(Θ̂ⁱ) − o^i_t‖²` with each term evaluated on agent
/// `i`'s hypothesized equilibrium.
pub fn lq_level2_loss(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    observations: &ObservationSequence,
) -> Result<f64> {
    check_observations(game, observations)?;
    let mut total = 0.0;
    for i in 0..theta.n_agents() {
        let kkt = assemble_kkt(game, theta.row(i), game.x_init()).map_err(|e| e.for_agent(i))?;
        let eq = solve_lq_equilibrium(&kkt).map_err(|e| e.for_agent(i))?;
        let (loss, _) = misfit(
            observations.model(),
            observations,
            i,
            &eq.states(),
            &eq.controls(),
        );
        total += loss;
    }
    Ok(total)
}

/// Exact gradient of [`lq_level2_loss`] over the flattened parameter set,
/// computed with one adjoint solve per agent.
pub fn lq_loss_gradient(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    observations: &ObservationSequence,
) -> Result<DVector<f64>> {
    check_observations(game, observations)?;
    let row_dim = theta.row_dim();
    let mut grad = DVector::zeros(theta.dim());
    for i in 0..theta.n_agents() {
        let kkt = assemble_kkt(game, theta.row(i), game.x_init()).map_err(|e| e.for_agent(i))?;
        let eq = solve_lq_equilibrium(&kkt).map_err(|e| e.for_agent(i))?;
        let layout = &kkt.layout;
        let (_, grads) = misfit(
            observations.model(),
            observations,
            i,
            &eq.states(),
            &eq.controls(),
        );
        let mut dl_dz = DVector::zeros(layout.dim());
        for (t, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let (start, len) = match observations.model().quantity {
                    crate::observation::ObservedQuantity::State => (layout.x(t), layout.n),
                    crate::observation::ObservedQuantity::Control => (layout.u(t, 0), layout.m()),
                };
                let mut seg = dl_dz.rows_mut(start, len);
                seg += g;
            }
        }
        let adjoint = kkt
            .m
            .transpose()
            .lu()
            .solve(&dl_dz)
            .ok_or(Error::Singular {
                condition: f64::INFINITY,
            })
            .map_err(|e| e.for_agent(i))?;
        let rhs = param_rhs(&kkt, game, &eq.z)?;
        let row_grad = -(rhs.transpose() * adjoint);
        grad.rows_mut(i * row_dim, row_dim).copy_from(&row_grad);
    }
    Ok(grad)
}

/// Each agent's own controls on its hypothesized equilibrium under `truth`:
/// the noise-free data a level-2 population emits.
pub fn lq_observations(
    game: &ParameterizedGame,
    truth: &Level2ParamSet,
) -> Result<ObservationSequence> {
    let per_agent = (0..truth.n_agents())
        .map(|i| {
            let kkt = assemble_kkt(game, truth.row(i), game.x_init())?;
            Ok(solve_lq_equilibrium(&kkt)?.trajectory())
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationSequence::from_hypothesized(ObservationModel::own_controls(game), &per_agent)
}

/// The homogeneous set whose shared row holds each agent's own true
/// parameter.
pub fn own_parameter_homogeneous(truth: &Level2ParamSet) -> Result<Level2ParamSet> {
    Level2ParamSet::homogeneous(truth.diagonal())
}

/// `M̌ = (Σ_i (1/N) M(Θ^{i*})⁻¹)⁻¹`.
fn harmonic_mean(ms: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let dim = ms[0].nrows();
    let mut acc = DMatrix::zeros(dim, dim);
    for m in ms {
        check_conditioning(m)?;
        let inv = m.clone().try_inverse().ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
        acc += inv / ms.len() as f64;
    }
    check_conditioning(&acc)?;
    acc.try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })
}

fn truth_systems(game: &ParameterizedGame, truth: &Level2ParamSet) -> Result<Vec<KktSystem>> {
    (0..truth.n_agents())
        .map(|i| assemble_kkt(game, truth.row(i), game.x_init()).map_err(|e| e.for_agent(i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level1Bounds {
    pub lower: f64,
    pub upper: f64,
}

/// Lower and upper bounds on the best loss any homogeneous (level-1)
/// parameter set can reach on data generated by `truth`.
pub fn level1_bounds(game: &ParameterizedGame, truth: &Level2ParamSet) -> Result<Level1Bounds> {
    let systems = truth_systems(game, truth)?;
    let check = own_parameter_homogeneous(truth)?;
    let m_check = assemble_kkt(game, check.row(0), game.x_init())?.m;
    let ms: Vec<DMatrix<f64>> = systems.iter().map(|k| k.m.clone()).collect();
    let m_mean = harmonic_mean(&ms)?;
    check_conditioning(&m_check)?;
    let smin_check = sigma_min(&m_check);
    let smax_mean = sigma_max(&m_mean);
    let mut lower = 0.0;
    let mut upper = 0.0;
    for (i, kkt) in systems.iter().enumerate() {
        let z = solve_lq_equilibrium(kkt).map_err(|e| e.for_agent(i))?.z;
        let u = sigma_max(&(&kkt.m - &m_check)) / smin_check * z.norm();
        upper += 0.5 * u * u;
        let e = SelectorMatrix::for_agent(&kkt.layout, i);
        let l = e.apply(&((&kkt.m - &m_mean) * &z)).norm() / smax_mean;
        lower += 0.5 * l * l;
    }
    Ok(Level1Bounds { lower, upper })
}

/// `Σ_i σ_max(M(Θ^{i*}) − M̌)`.
pub fn heterogeneity(game: &ParameterizedGame, truth: &Level2ParamSet) -> Result<f64> {
    let ms: Vec<DMatrix<f64>> = truth_systems(game, truth)?
        .into_iter()
        .map(|k| k.m)
        .collect();
    let m_mean = harmonic_mean(&ms)?;
    Ok(ms.iter().map(|m| sigma_max(&(m - &m_mean))).sum())
}

impl KktSystem {
    /// Cost matrices `Q(θ̂^{i,j})` used in the assembly, by agent.
    pub fn cost_matrices(&self) -> &[DMatrix<f64>] {
        &self.q
    }

    pub fn residual(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.m * z + &self.s * &self.x_init
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{counterexample_game, counterexample_truth, make_lq_game};

    fn scalar_game(q: f64) -> (ParameterizedGame, Vec<AgentParams>) {
        let one = DMatrix::identity(1, 1);
        let g = make_lq_game(
            one.clone(),
            vec![one.clone()],
            vec![one],
            2,
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        (g, vec![AgentParams::scalar(q).unwrap()])
    }

    #[test]
    fn scalar_kkt_matches_hand_expansion() {
        let (g, row) = scalar_game(1.0);
        let kkt = assemble_kkt(&g, &row, g.x_init()).unwrap();
        // Columns: x0 x1 u0 u1 λ0 η. Rows: stat x0, stat x1, stat u0,
        // stat u1, dynamics, initial state.
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(6, 6, &[
            1.0, 0.0, 0.0, 0.0, -1.0, 1.0,
            0.0, 1.0, 0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 1.0, 0.0, -1.0, 0.0,
            0.0, 0.0, 0.0, 1.0, 0.0, 0.0,
            -1.0, 1.0, -1.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        assert_eq!(kkt.m, expected);
        assert_eq!(kkt.layout.dim(), 6);
    }

    #[test]
    fn counterexample_dimension_and_first_control() {
        let g = counterexample_game().unwrap();
        let truth = counterexample_truth();
        let kkt = assemble_kkt(&g, truth.row(0), g.x_init()).unwrap();
        assert_eq!(kkt.layout.dim(), 20);
        let eq = solve_lq_equilibrium(&kkt).unwrap();
        let u = extract_controls(&eq, &SelectorMatrix::for_agent(&kkt.layout, 0));
        // Independent first-order system (I + Q^j) u^j + Q^j u^{-j} = −Q^j x0.
        let q1 = DMatrix::<f64>::identity(2, 2) * 0.1;
        let q2 = DMatrix::<f64>::identity(2, 2);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let mut big = DMatrix::zeros(4, 4);
        big.view_mut((0, 0), (2, 2)).copy_from(&(&i2 + &q1));
        big.view_mut((0, 2), (2, 2)).copy_from(&q1);
        big.view_mut((2, 0), (2, 2)).copy_from(&q2);
        big.view_mut((2, 2), (2, 2)).copy_from(&(&i2 + &q2));
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let mut rhs = DVector::zeros(4);
        rhs.rows_mut(0, 2).copy_from(&(-(&q1 * &x0)));
        rhs.rows_mut(2, 2).copy_from(&(-(&q2 * &x0)));
        let oracle = big.lu().solve(&rhs).unwrap();
        assert!((&u[0] - oracle.rows(0, 2)).amax() < 1e-12);
        assert!((u[0][0] + 1.0 / 21.0).abs() < 1e-12);
        assert!(u[1].amax() < 1e-14);
        assert!(kkt.residual(&eq.z).norm() <= 1e-10 * (1.0 + eq.z.norm()));
    }

    #[test]
    fn zero_state_cost_gives_zero_controls() {
        let g = counterexample_game().unwrap();
        let row = vec![AgentParams::new(vec![0.0; 3]).unwrap(); 2];
        let eq = solve_lq_equilibrium(&assemble_kkt(&g, &row, g.x_init()).unwrap()).unwrap();
        assert!(eq.controls().iter().all(|u| u.amax() < 1e-14));
    }

    #[test]
    fn zero_initial_state_gives_zero_solution() {
        let g = counterexample_game().unwrap();
        let truth = counterexample_truth();
        let kkt = assemble_kkt(&g, truth.row(1), &DVector::zeros(2)).unwrap();
        assert_eq!(solve_lq_equilibrium(&kkt).unwrap().z.amax(), 0.0);
    }

    #[test]
    fn selectors_partition_controls() {
        let g = counterexample_game().unwrap();
        let layout = KktLayout::from_game(&g);
        let e1 = SelectorMatrix::for_agent(&layout, 0);
        let e2 = SelectorMatrix::for_agent(&layout, 1);
        assert_eq!(e1.rows.len(), 4);
        assert!(e1.rows.iter().all(|r| !e2.rows.contains(r)));
        let z = DVector::zeros(layout.dim());
        let eq = LqEquilibrium { z, layout };
        assert!(extract_controls(&eq, &e1).iter().all(|u| u.amax() == 0.0));
    }

    #[test]
    fn singular_system_is_reported() {
        // Scalar game: u0 (1 + q) = −q x0, so q = −1 makes M singular.
        let (g, row) = scalar_game(-1.0);
        let kkt = assemble_kkt(&g, &row, g.x_init()).unwrap();
        assert!(matches!(
            solve_lq_equilibrium(&kkt),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn rejects_non_lq_games() {
        let g = crate::scenario::make_lane_change_game(&Default::default()).unwrap();
        let row = vec![AgentParams::scalar(1.0).unwrap(); 2];
        assert!(matches!(
            assemble_kkt(&g, &row, g.x_init()),
            Err(Error::UnsupportedGame(_))
        ));
    }
}
