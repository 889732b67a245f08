//! Transcription of `Γ(Θ̂ⁱ)` into a mixed complementarity problem.
//!
//! Agent `j`'s Lagrangian is
//! `L^j = Σ_t ℓ^j_t + Σ_t λ^{jᵀ}_t (x_{t+1} − f(x_t, u_t)) + η^{jᵀ}(x_0 − x_init)
//!        − μ^{jᵀ} h^j − γ^{jᵀ} g^j`,
//! with one `λ^{j,b}_t` and `η^{j,b}` for each state block `b` the agent
//! controls. The MCP stacks the stationarity of every `L^j` with respect to
//! the agent's state blocks and own controls, the equality constraints,
//! the dynamics and the initial condition into `F_eq`, and pairs each
//! inequality `g_k ≥ 0` with its multiplier `γ_k ≥ 0`.
//!
//! `z = [X, U, λ, η, μ, γ]` with `X`, `U` time-major, `λ` ordered by
//! `(t, j, b)`, `η` by `(j, b)`, and `μ`, `γ` by `(t, j, constraint)`.
//! Rows of `F_eq`: state stationarity `(t, j, b)`, control stationarity
//! `(t, j)`, dynamics `t`, initial state, equality constraints.

use nalgebra::{DMatrix, DVector};

use crate::constraints::StageConstraint;
use crate::dynamics::StateBlock;
use crate::error::{Error, Result};
use crate::game::{ParameterizedGame, TrajectoryBundle};
use crate::params::AgentParams;

/// One stage constraint instance at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintEntry {
    /// Owning agent, or `None` for a shared constraint.
    pub agent: Option<usize>,
    pub t: usize,
    /// Index into the owner's constraint list (or the shared list).
    pub constraint: usize,
    /// Offset within the stacked multipliers of this kind.
    pub offset: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct McpLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub control_dims: Vec<usize>,
    control_offsets: Vec<usize>,
    pub blocks: Vec<StateBlock>,
    /// Blocks controlled by each agent, in block order.
    pub agent_blocks: Vec<Vec<usize>>,
    /// Offset of `(j, b)` within one time step's multipliers.
    multiplier_offsets: Vec<Vec<usize>>,
    /// Multiplier entries per time step (`Σ_j Σ_{b ∈ j} n_b`).
    pub per_step: usize,
    pub equalities: Vec<ConstraintEntry>,
    pub inequalities: Vec<ConstraintEntry>,
    pub n_mu: usize,
    pub n_gamma: usize,
    pub(crate) var_keys: Vec<(usize, u8)>,
    pub(crate) eq_keys: Vec<(usize, u8)>,
    /// Time step of each inequality row.
    pub(crate) gamma_time: Vec<usize>,
}

impl ConstraintEntry {
    /// Whether the constraint enters agent `j`'s Lagrangian.
    pub fn binds(&self, agent: usize) -> bool {
        self.agent.is_none_or(|j| j == agent)
    }
}

/// States of the zero-control rollout from the initial state and, for each
/// step `t`, the Jacobian of `x_t` with respect to `(u_0, …, u_{t-1})`.
struct ControlReach {
    states: Vec<DVector<f64>>,
    sensitivities: Vec<DMatrix<f64>>,
}

fn control_reach(game: &ParameterizedGame) -> ControlReach {
    let dynamics = game.dynamics();
    let (n, m) = (game.state_dim(), game.control_dim());
    let blocks = dynamics.blocks();
    let u = DVector::zeros(m);
    let mut x = game.x_init().clone();
    let mut states = vec![x.clone()];
    let mut sensitivities = vec![DMatrix::zeros(n, 0)];
    for t in 1..game.horizon() {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for (k, block) in blocks.iter().enumerate() {
            let j = dynamics.block_jacobians(k, &x, &u);
            a.rows_mut(block.range.start, block.range.len())
                .copy_from(&j.dx);
            b.rows_mut(block.range.start, block.range.len())
                .copy_from(&j.du);
        }
        let mut s = DMatrix::zeros(n, t * m);
        s.columns_mut(0, (t - 1) * m)
            .copy_from(&(&a * &sensitivities[t - 1]));
        s.columns_mut((t - 1) * m, m).copy_from(&b);
        x = dynamics.step(&x, &u);
        states.push(x.clone());
        sensitivities.push(s);
    }
    ControlReach {
        states,
        sensitivities,
    }
}

/// First step at which a constraint can be influenced by the controls.
/// Earlier instances of a state-only constraint are fixed by the initial
/// state: they either hold or make the game infeasible, so they are left
/// out.
fn first_controllable_step(
    game: &ParameterizedGame,
    con: &dyn StageConstraint,
    reach: &ControlReach,
) -> usize {
    if !con.state_only() {
        return 0;
    }
    let u = DVector::zeros(game.control_dim());
    (1..game.horizon())
        .find(|&t| {
            let (jx, _) = con.jacobian(&reach.states[t], &u);
            (jx * &reach.sensitivities[t]).amax() > 0.0
        })
        .unwrap_or(game.horizon())
}

impl McpLayout {
    pub fn new(game: &ParameterizedGame) -> Self {
        let n_agents = game.n_agents();
        let blocks = game.dynamics().blocks();
        let agent_blocks: Vec<Vec<usize>> = (0..n_agents)
            .map(|j| {
                (0..blocks.len())
                    .filter(|&b| blocks[b].controllers.contains(&j))
                    .collect()
            })
            .collect();
        let mut per_step = 0;
        let multiplier_offsets = agent_blocks
            .iter()
            .map(|bs| {
                bs.iter()
                    .map(|&b| {
                        let o = per_step;
                        per_step += blocks[b].range.len();
                        o
                    })
                    .collect()
            })
            .collect();
        let control_dims = game.control_dims();
        let control_offsets = (0..n_agents).map(|j| game.control_block(j).start).collect();
        let horizon = game.horizon();
        type List<'a> = (Option<usize>, &'a [std::sync::Arc<dyn StageConstraint>]);
        let reach = control_reach(game);
        let collect = |lists: &[List]| {
            let first: Vec<Vec<usize>> = lists
                .iter()
                .map(|(_, list)| {
                    list.iter()
                        .map(|con| first_controllable_step(game, con.as_ref(), &reach))
                        .collect()
                })
                .collect();
            let mut entries = Vec::new();
            let mut offset = 0;
            for t in 0..horizon {
                for (l, &(j, list)) in lists.iter().enumerate() {
                    for (c, con) in list.iter().enumerate() {
                        if t < first[l][c] {
                            continue;
                        }
                        entries.push(ConstraintEntry {
                            agent: j,
                            t,
                            constraint: c,
                            offset,
                            dim: con.dim(),
                        });
                        offset += con.dim();
                    }
                }
            }
            (entries, offset)
        };
        let cs = game.constraints();
        let eq_lists: Vec<List> = cs
            .equality
            .iter()
            .enumerate()
            .map(|(j, l)| (Some(j), l.as_slice()))
            .collect();
        let mut ineq_lists: Vec<List> = vec![(None, cs.shared_inequality.as_slice())];
        ineq_lists.extend(
            cs.inequality
                .iter()
                .enumerate()
                .map(|(j, l)| (Some(j), l.as_slice())),
        );
        let (equalities, n_mu) = collect(&eq_lists);
        let (inequalities, n_gamma) = collect(&ineq_lists);
        let mut gamma_time = vec![0; n_gamma];
        for e in &inequalities {
            gamma_time[e.offset..e.offset + e.dim].fill(e.t);
        }
        let mut layout = Self {
            n: game.state_dim(),
            m: game.control_dim(),
            horizon,
            n_agents,
            control_dims,
            control_offsets,
            blocks,
            agent_blocks,
            multiplier_offsets,
            per_step,
            equalities,
            inequalities,
            n_mu,
            n_gamma,
            var_keys: Vec::new(),
            eq_keys: Vec::new(),
            gamma_time,
        };
        layout.var_keys = layout.variable_keys();
        layout.eq_keys = layout.equation_keys();
        layout
    }

    pub fn control_offset(&self, agent: usize) -> usize {
        self.control_offsets[agent]
    }

    pub fn x(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn u(&self, t: usize) -> usize {
        self.horizon * self.n + t * self.m
    }

    /// Start of `λ^{j,b}_t`, where `b` indexes the agent's own block list.
    pub fn lambda(&self, t: usize, agent: usize, own_block: usize) -> usize {
        self.horizon * (self.n + self.m)
            + t * self.per_step
            + self.multiplier_offsets[agent][own_block]
    }

    pub fn eta(&self, agent: usize, own_block: usize) -> usize {
        self.horizon * (self.n + self.m)
            + (self.horizon - 1) * self.per_step
            + self.multiplier_offsets[agent][own_block]
    }

    pub fn mu_start(&self) -> usize {
        self.horizon * (self.n + self.m + self.per_step)
    }

    pub fn gamma_start(&self) -> usize {
        self.mu_start() + self.n_mu
    }

    /// Number of non-`γ` variables, equal to the number of `F_eq` rows.
    pub fn n_w(&self) -> usize {
        self.gamma_start()
    }

    pub fn dim(&self) -> usize {
        self.n_w() + self.n_gamma
    }

    pub fn row_state_stationarity(&self, t: usize, agent: usize, own_block: usize) -> usize {
        t * self.per_step + self.multiplier_offsets[agent][own_block]
    }

    pub fn row_control_stationarity(&self, t: usize, agent: usize) -> usize {
        self.horizon * self.per_step + t * self.m + self.control_offsets[agent]
    }

    pub fn row_dynamics(&self, t: usize) -> usize {
        self.horizon * (self.per_step + self.m) + t * self.n
    }

    pub fn row_initial(&self) -> usize {
        self.row_dynamics(self.horizon - 1)
    }

    pub fn row_equality_start(&self) -> usize {
        self.row_initial() + self.n
    }

    /// Time-stage ordering key of each non-`γ` variable, used to expose the
    /// banded structure of the Newton system.
    fn variable_keys(&self) -> Vec<(usize, u8)> {
        let mut keys = vec![(0, 0); self.n_w()];
        for t in 0..self.horizon {
            for k in 0..self.n {
                keys[self.x(t) + k] = (t, 1);
            }
            for k in 0..self.m {
                keys[self.u(t) + k] = (t, 2);
            }
        }
        let lam = self.horizon * (self.n + self.m);
        for t in 0..self.horizon - 1 {
            for k in 0..self.per_step {
                keys[lam + t * self.per_step + k] = (t, 5);
            }
        }
        for e in &self.equalities {
            for k in 0..e.dim {
                keys[self.mu_start() + e.offset + k] = (e.t, 3);
            }
        }
        keys
    }

    fn equation_keys(&self) -> Vec<(usize, u8)> {
        let mut keys = vec![(0, 0); self.n_w()];
        for t in 0..self.horizon {
            for k in 0..self.per_step {
                keys[t * self.per_step + k] = (t, 1);
            }
            for k in 0..self.m {
                keys[self.row_control_stationarity(t, 0) + k] = (t, 2);
            }
        }
        for t in 0..self.horizon - 1 {
            for k in 0..self.n {
                keys[self.row_dynamics(t) + k] = (t, 5);
            }
        }
        for e in &self.equalities {
            for k in 0..e.dim {
                keys[self.row_equality_start() + e.offset + k] = (e.t, 3);
            }
        }
        keys
    }

    pub fn states(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.horizon)
            .map(|t| z.rows(self.x(t), self.n).into_owned())
            .collect()
    }

    pub fn controls(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.horizon)
            .map(|t| z.rows(self.u(t), self.m).into_owned())
            .collect()
    }

    pub fn trajectory(&self, z: &DVector<f64>) -> TrajectoryBundle {
        TrajectoryBundle::new(self.states(z), self.controls(z))
    }

    /// Length of the trajectory prefix `[X, U]` of `z`.
    pub fn trajectory_dim(&self) -> usize {
        self.horizon * (self.n + self.m)
    }
}

/// Residuals and, on request, first derivatives of the MCP at one point.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub f_eq: DVector<f64>,
    pub f_ineq: DVector<f64>,
    /// `∂F_eq/∂w` as `(row, column, value)` triplets over non-`γ` columns;
    /// repeated coordinates add up.
    pub eq_w: Vec<(usize, usize, f64)>,
    /// For each inequality `k`, the nonzeros of `∂F_eq/∂γ_k` as `(row, value)`.
    pub eq_gamma: Vec<Vec<(usize, f64)>>,
    /// For each inequality `k`, the nonzeros of `∂F_ineq,k/∂w` as `(column, value)`.
    pub ineq_w: Vec<Vec<(usize, f64)>>,
}

/// `Γ(Θ̂ⁱ)` as a mixed complementarity problem.
#[derive(Clone, Debug)]
pub struct McpProblem {
    game: ParameterizedGame,
    theta: Vec<Vec<f64>>,
    layout: McpLayout,
}

/// Builds the MCP for one parameter row, at the game's horizon and initial
/// state.
pub fn transcribe(game: &ParameterizedGame, row: &[AgentParams]) -> Result<McpProblem> {
    McpProblem::new(game, row)
}

struct Triplets<'a>(&'a mut Vec<(usize, usize, f64)>);

impl Triplets<'_> {
    /// Adds `scale · block` (or its transpose) at `(r0, c0)`, skipping zeros.
    fn add(&mut self, r0: usize, c0: usize, block: &DMatrix<f64>, transpose: bool, scale: f64) {
        for c in 0..block.ncols() {
            for r in 0..block.nrows() {
                let v = block[(r, c)];
                if v != 0.0 {
                    let (rr, cc) = if transpose { (c, r) } else { (r, c) };
                    self.0.push((r0 + rr, c0 + cc, scale * v));
                }
            }
        }
    }
}

impl McpProblem {
    pub fn new(game: &ParameterizedGame, row: &[AgentParams]) -> Result<Self> {
        game.check_row(row)?;
        Ok(Self {
            game: game.clone(),
            theta: row.iter().map(|p| p.values().to_vec()).collect(),
            layout: McpLayout::new(game),
        })
    }

    pub fn layout(&self) -> &McpLayout {
        &self.layout
    }

    pub fn game(&self) -> &ParameterizedGame {
        &self.game
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        self.layout.gamma_start()..self.layout.dim()
    }

    /// Length of the flattened parameter row.
    pub fn param_dim(&self) -> usize {
        self.theta.iter().map(|t| t.len()).sum()
    }

    pub fn residual(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let lin = self.evaluate(z, false)?;
        Ok((lin.f_eq, lin.f_ineq))
    }

    pub fn linearize(&self, z: &DVector<f64>) -> Result<Linearization> {
        self.evaluate(z, true)
    }

    /// All-zero multipliers and the zero-control rollout from the initial
    /// state.
    pub fn cold_start(&self) -> DVector<f64> {
        let l = &self.layout;
        let mut z = DVector::zeros(l.dim());
        let mut x = self.game.x_init().clone();
        let u = DVector::zeros(l.m);
        for t in 0..l.horizon {
            z.rows_mut(l.x(t), l.n).copy_from(&x);
            x = self.game.dynamics().step(&x, &u);
        }
        z
    }

    /// `∂F_eq/∂θ` over the flattened parameter row; `F_ineq` does not
    /// depend on `θ`.
    pub fn param_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let l = &self.layout;
        self.check_dim(z)?;
        let mut out = DMatrix::zeros(l.n_w(), self.param_dim());
        let offsets: Vec<usize> = self
            .theta
            .iter()
            .scan(0, |acc, t| {
                let o = *acc;
                *acc += t.len();
                Some(o)
            })
            .collect();
        for t in 0..l.horizon {
            let x = z.rows(l.x(t), l.n).into_owned();
            for j in 0..l.n_agents {
                let uj = z
                    .rows(l.u(t) + l.control_offset(j), l.control_dims[j])
                    .into_owned();
                let (px, pu) = self
                    .game
                    .cost(j)
                    .gradient_param_jacobian(&x, &uj, &self.theta[j]);
                let k = self.theta[j].len();
                for (ob, &b) in l.agent_blocks[j].iter().enumerate() {
                    let range = l.blocks[b].range.clone();
                    let r = l.row_state_stationarity(t, j, ob);
                    out.view_mut((r, offsets[j]), (range.len(), k))
                        .copy_from(&px.rows(range.start, range.len()));
                }
                let r = l.row_control_stationarity(t, j);
                out.view_mut((r, offsets[j]), (l.control_dims[j], k))
                    .copy_from(&pu);
            }
        }
        Ok(out)
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.layout.dim() {
            return Err(Error::dims(
                "MCP variable vector",
                self.layout.dim(),
                z.len(),
            ));
        }
        Ok(())
    }

    fn evaluate(&self, z: &DVector<f64>, jacobian: bool) -> Result<Linearization> {
        self.check_dim(z)?;
        let l = &self.layout;
        let game = &self.game;
        let (n, m, horizon) = (l.n, l.m, l.horizon);
        let mut f_eq = DVector::zeros(l.n_w());
        let mut f_ineq = DVector::zeros(l.n_gamma);
        let mut eq_w = Vec::new();
        let mut eq_gamma = vec![Vec::new(); if jacobian { l.n_gamma } else { 0 }];
        let mut ineq_w = vec![Vec::new(); if jacobian { l.n_gamma } else { 0 }];
        let mut trip = Triplets(&mut eq_w);
        let eye = DMatrix::<f64>::identity(n, n);

        let mut eq_iter = l.equalities.iter().peekable();
        let mut ineq_iter = l.inequalities.iter().peekable();
        for t in 0..horizon {
            let x = z.rows(l.x(t), n).into_owned();
            let u = z.rows(l.u(t), m).into_owned();
            let has_next = t + 1 < horizon;

            // Constraint values and Jacobians at this step.
            let mut step_eq = Vec::new();
            while let Some(e) = eq_iter.next_if(|e| e.t == t) {
                let con = game.constraints().equality[e.agent.expect("equalities are private")]
                    [e.constraint]
                    .clone();
                let (jx, ju) = con.jacobian(&x, &u);
                f_eq.rows_mut(l.row_equality_start() + e.offset, e.dim)
                    .copy_from(&con.value(&x, &u));
                step_eq.push((e, con, jx, ju));
            }
            let mut step_ineq = Vec::new();
            while let Some(e) = ineq_iter.next_if(|e| e.t == t) {
                let con = match e.agent {
                    Some(j) => game.constraints().inequality[j][e.constraint].clone(),
                    None => game.constraints().shared_inequality[e.constraint].clone(),
                };
                let (jx, ju) = con.jacobian(&x, &u);
                f_ineq
                    .rows_mut(e.offset, e.dim)
                    .copy_from(&con.value(&x, &u));
                step_ineq.push((e, con, jx, ju));
            }

            let block_jac: Vec<_> = if has_next {
                (0..l.blocks.len())
                    .map(|b| game.dynamics().block_jacobians(b, &x, &u))
                    .collect()
            } else {
                Vec::new()
            };

            for j in 0..l.n_agents {
                let cj = l.control_offset(j);
                let mj = l.control_dims[j];
                let uj = u.rows(cj, mj).into_owned();
                let cost = game.cost(j);
                let (gx, gu) = cost.gradient(&x, &uj, &self.theta[j]);

                // Stationarity with respect to the agent's state blocks.
                let mut grad_x = gx;
                let mut grad_u = gu;
                let mut lam_terms: Vec<(usize, DVector<f64>)> = Vec::new();
                for (ob, &b) in l.agent_blocks[j].iter().enumerate() {
                    if has_next {
                        let nb = l.blocks[b].range.len();
                        let lam = z.rows(l.lambda(t, j, ob), nb).into_owned();
                        grad_x -= block_jac[b].dx.transpose() * &lam;
                        grad_u -= block_jac[b].du.columns(cj, mj).transpose() * &lam;
                        lam_terms.push((b, lam));
                    }
                }
                for (e, _, jx, ju) in step_eq.iter().filter(|s| s.0.binds(j)) {
                    let mu = z.rows(l.mu_start() + e.offset, e.dim);
                    grad_x -= jx.transpose() * mu;
                    grad_u -= ju.columns(cj, mj).transpose() * mu;
                }
                for (e, _, jx, ju) in step_ineq.iter().filter(|s| s.0.binds(j)) {
                    let gamma = z.rows(l.gamma_start() + e.offset, e.dim);
                    grad_x -= jx.transpose() * gamma;
                    grad_u -= ju.columns(cj, mj).transpose() * gamma;
                }
                for (ob, &b) in l.agent_blocks[j].iter().enumerate() {
                    let range = l.blocks[b].range.clone();
                    let r = l.row_state_stationarity(t, j, ob);
                    let mut row = grad_x.rows(range.start, range.len()).into_owned();
                    if t == 0 {
                        row += z.rows(l.eta(j, ob), range.len());
                    } else {
                        row += z.rows(l.lambda(t - 1, j, ob), range.len());
                    }
                    f_eq.rows_mut(r, range.len()).copy_from(&row);
                }
                f_eq.rows_mut(l.row_control_stationarity(t, j), mj)
                    .copy_from(&grad_u);

                if !jacobian {
                    continue;
                }

                // Second-order terms of L^j over the joint (x_t, u_t).
                let (hxx, hxu, huu) = cost.hessian(&x, &uj, &self.theta[j]);
                let mut lxx = hxx;
                let mut lxu = DMatrix::zeros(n, m);
                lxu.columns_mut(cj, mj).copy_from(&hxu);
                let mut luu = DMatrix::zeros(m, m);
                luu.view_mut((cj, cj), (mj, mj)).copy_from(&huu);
                let mut curvature = |h: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>| {
                    if let Some((a, b, c)) = h {
                        lxx -= a;
                        lxu -= b;
                        luu -= c;
                    }
                };
                for (b, lam) in &lam_terms {
                    curvature(game.dynamics().block_hessian_contract(*b, &x, &u, lam));
                }
                for (e, con, _, _) in step_eq.iter().filter(|s| s.0.binds(j)) {
                    let mu = z.rows(l.mu_start() + e.offset, e.dim).into_owned();
                    curvature(con.hessian_contract(&x, &u, &mu));
                }
                for (e, con, _, _) in step_ineq.iter().filter(|s| s.0.binds(j)) {
                    let gamma = z.rows(l.gamma_start() + e.offset, e.dim).into_owned();
                    curvature(con.hessian_contract(&x, &u, &gamma));
                }

                for (ob, &b) in l.agent_blocks[j].iter().enumerate() {
                    let range = l.blocks[b].range.clone();
                    let nb = range.len();
                    let r = l.row_state_stationarity(t, j, ob);
                    trip.add(
                        r,
                        l.x(t),
                        &lxx.rows(range.start, nb).into_owned(),
                        false,
                        1.0,
                    );
                    trip.add(
                        r,
                        l.u(t),
                        &lxu.rows(range.start, nb).into_owned(),
                        false,
                        1.0,
                    );
                    let id = eye.view((0, 0), (nb, nb)).into_owned();
                    if t == 0 {
                        trip.add(r, l.eta(j, ob), &id, false, 1.0);
                    } else {
                        trip.add(r, l.lambda(t - 1, j, ob), &id, false, 1.0);
                    }
                    if has_next {
                        for (ob2, &b2) in l.agent_blocks[j].iter().enumerate() {
                            let cols = block_jac[b2].dx.columns(range.start, nb).into_owned();
                            trip.add(r, l.lambda(t, j, ob2), &cols, true, -1.0);
                        }
                    }
                    for (e, _, jx, _) in step_eq.iter().filter(|s| s.0.binds(j)) {
                        let cols = jx.columns(range.start, nb).into_owned();
                        trip.add(r, l.mu_start() + e.offset, &cols, true, -1.0);
                    }
                    for (e, _, jx, _) in step_ineq.iter().filter(|s| s.0.binds(j)) {
                        for k in 0..e.dim {
                            for rr in 0..nb {
                                let v = jx[(k, range.start + rr)];
                                if v != 0.0 {
                                    eq_gamma[e.offset + k].push((r + rr, -v));
                                }
                            }
                        }
                    }
                }
                let r = l.row_control_stationarity(t, j);
                trip.add(r, l.x(t), &lxu.columns(cj, mj).transpose(), false, 1.0);
                trip.add(r, l.u(t), &luu.rows(cj, mj).into_owned(), false, 1.0);
                if has_next {
                    for (ob, &b) in l.agent_blocks[j].iter().enumerate() {
                        let cols = block_jac[b].du.columns(cj, mj).into_owned();
                        trip.add(r, l.lambda(t, j, ob), &cols, true, -1.0);
                    }
                }
                for (e, _, _, ju) in step_eq.iter().filter(|s| s.0.binds(j)) {
                    let cols = ju.columns(cj, mj).into_owned();
                    trip.add(r, l.mu_start() + e.offset, &cols, true, -1.0);
                }
                for (e, _, _, ju) in step_ineq.iter().filter(|s| s.0.binds(j)) {
                    for k in 0..e.dim {
                        for rr in 0..mj {
                            let v = ju[(k, cj + rr)];
                            if v != 0.0 {
                                eq_gamma[e.offset + k].push((r + rr, -v));
                            }
                        }
                    }
                }
            }

            // Dynamics x_{t+1} − f(x_t, u_t).
            if has_next {
                let r0 = l.row_dynamics(t);
                let x_next = z.rows(l.x(t + 1), n);
                for (b, block) in l.blocks.iter().enumerate() {
                    let range = block.range.clone();
                    let next = game.dynamics().step_block(b, &x, &u);
                    let res = x_next.rows(range.start, range.len()) - next;
                    f_eq.rows_mut(r0 + range.start, range.len()).copy_from(&res);
                    if jacobian {
                        let id = eye.view((0, 0), (range.len(), range.len())).into_owned();
                        trip.add(r0 + range.start, l.x(t + 1) + range.start, &id, false, 1.0);
                        trip.add(r0 + range.start, l.x(t), &block_jac[b].dx, false, -1.0);
                        trip.add(r0 + range.start, l.u(t), &block_jac[b].du, false, -1.0);
                    }
                }
            }

            if jacobian {
                for (e, _, jx, ju) in &step_eq {
                    let r = l.row_equality_start() + e.offset;
                    trip.add(r, l.x(t), jx, false, 1.0);
                    trip.add(r, l.u(t), ju, false, 1.0);
                }
                for (e, _, jx, ju) in &step_ineq {
                    for k in 0..e.dim {
                        let row = &mut ineq_w[e.offset + k];
                        for c in 0..n {
                            if jx[(k, c)] != 0.0 {
                                row.push((l.x(t) + c, jx[(k, c)]));
                            }
                        }
                        for c in 0..m {
                            if ju[(k, c)] != 0.0 {
                                row.push((l.u(t) + c, ju[(k, c)]));
                            }
                        }
                    }
                }
            }
        }

        let r0 = l.row_initial();
        let res = z.rows(l.x(0), n) - game.x_init();
        f_eq.rows_mut(r0, n).copy_from(&res);
        if jacobian {
            trip.add(r0, l.x(0), &eye, false, 1.0);
        }

        Ok(Linearization {
            f_eq,
            f_ineq,
            eq_w,
            eq_gamma,
            ineq_w,
        })
    }
}

impl Linearization {
    /// Dense `∂F/∂z` with `F = [F_eq; F_ineq]`, for tests and diagnostics.
    pub fn dense_jacobian(&self, layout: &McpLayout) -> DMatrix<f64> {
        let n_w = layout.n_w();
        let mut j = DMatrix::zeros(layout.dim(), layout.dim());
        for &(r, c, v) in &self.eq_w {
            j[(r, c)] += v;
        }
        for (k, col) in self.eq_gamma.iter().enumerate() {
            for &(r, v) in col {
                j[(r, n_w + k)] += v;
            }
        }
        for (k, row) in self.ineq_w.iter().enumerate() {
            for &(c, v) in row {
                j[(n_w + k, c)] += v;
            }
        }
        j
    }
}
