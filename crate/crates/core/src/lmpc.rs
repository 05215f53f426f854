//! Receding-horizon learning MPC solved by sequential quadratic programming.
//!
//! Each step solves a multiple-shooting transcription over `N` stages whose
//! terminal state must be a convex combination of safe-set candidates, or lie
//! past the finish once a finished state is among the candidates. The
//! dynamics and corridor are linearized at the current iterate, the quadratic
//! costs enter through a Gauss-Newton Hessian and the candidate costs are linear
//! in the combination weights.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cost::StageCost;
use crate::dynamics::{
    augmented_rk4_step, linearize_discrete_with_step, AugVec, AugmentedState, ControlInput, ModelParams, NU, NXA,
};
use crate::error::{ConfigError, SafeSetError};
use crate::qp::{QpBuilder, QpStatus};
use crate::safeset::{KnnMetric, SafeSet, TerminalCandidateSet};
use crate::track::Centerline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmpcConfig {
    /// Prediction horizon `N` [steps].
    pub horizon: usize,
    /// Discretization and control frequency `f_d` [Hz].
    pub f_d: f64,
    /// Safe-set neighbors `K`.
    pub neighbors: usize,
    pub max_sqp_iters: usize,
    pub max_qp_iters: u32,
    pub kkt_tol: f64,
    /// Quadratic penalty on corridor slack [1/m^2].
    pub slack_weight: f64,
    /// Exact (L1) penalty on the terminal convex-combination residual.
    pub terminal_weight: f64,
    /// Distance kept from the corridor boundary when planning [m].
    pub corridor_margin: f64,
    /// Diagonal of the shifted-set cost weight matrix.
    pub shift_weight: [f64; 3],
    /// Proximal weight on the step between SQP iterates.
    pub proximal_weight: f64,
    /// Factor applied to the proximal weight on the attitude commands.
    pub proximal_attitude_scale: f64,
    /// Growth of the proximal weight per SQP iteration after the second.
    pub proximal_growth: f64,
    pub knn_metric: KnnMetric,
}

impl Default for LmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            f_d: 30.0,
            neighbors: 20,
            max_sqp_iters: 5,
            max_qp_iters: 20,
            kkt_tol: 1e-4,
            slack_weight: 1e4,
            terminal_weight: 1e3,
            corridor_margin: 0.05,
            shift_weight: [10.0; 3],
            proximal_weight: 0.1,
            proximal_attitude_scale: 10.0,
            proximal_growth: 3.0,
            knn_metric: KnnMetric::default(),
        }
    }
}

impl LmpcConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon < 2 {
            return Err(ConfigError::range("lmpc.horizon", "must be >= 2"));
        }
        if !(self.f_d > 0.0 && self.f_d.is_finite()) {
            return Err(ConfigError::range("lmpc.f_d", "must be > 0"));
        }
        if self.neighbors < 1 {
            return Err(ConfigError::range("lmpc.neighbors", "must be >= 1"));
        }
        if self.max_sqp_iters < 1 {
            return Err(ConfigError::range("lmpc.max_sqp_iters", "must be >= 1"));
        }
        if self.max_qp_iters < 1 {
            return Err(ConfigError::range("lmpc.max_qp_iters", "must be >= 1"));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(ConfigError::range("lmpc.kkt_tol", "must be > 0"));
        }
        if !(self.slack_weight > 0.0) {
            return Err(ConfigError::range("lmpc.slack_weight", "must be > 0"));
        }
        if !(self.terminal_weight > 0.0) {
            return Err(ConfigError::range("lmpc.terminal_weight", "must be > 0"));
        }
        if !(self.corridor_margin >= 0.0) {
            return Err(ConfigError::range("lmpc.corridor_margin", "must be >= 0"));
        }
        if self.shift_weight.iter().any(|w| !(*w > 0.0)) {
            return Err(ConfigError::range("lmpc.shift_weight", "entries must be > 0"));
        }
        if !(self.proximal_weight >= 0.0) {
            return Err(ConfigError::range("lmpc.proximal_weight", "must be >= 0"));
        }
        if !(self.proximal_attitude_scale > 0.0) {
            return Err(ConfigError::range("lmpc.proximal_attitude_scale", "must be > 0"));
        }
        if !(self.proximal_growth >= 1.0) {
            return Err(ConfigError::range("lmpc.proximal_growth", "must be >= 1"));
        }
        let m = &self.knn_metric;
        if [m.arc_length, m.position, m.velocity, m.attitude].iter().any(|w| !(*w >= 0.0)) {
            return Err(ConfigError::range("lmpc.knn_metric", "weights must be >= 0"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.f_d
    }

    pub fn shift_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.shift_weight))
    }
}

/// Extra proximal factor after an SQP iteration that raised the merit.
const PROXIMAL_BACKOFF: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct LmpcSolution {
    pub states: Vec<AugmentedState>,
    pub inputs: Vec<ControlInput>,
    pub lambda: Vec<f64>,
    pub candidates: TerminalCandidateSet,
    /// Corridor slack per predicted stage `1..=N` [m].
    pub slacks: Vec<f64>,
    /// Largest entry of `x_N - sum(lambda * candidate)` over the constrained rows,
    /// or the arc-length shortfall when the finish is the terminal set.
    pub terminal_residual: f64,
    /// Largest nonlinear dynamics defect over the horizon.
    pub max_defect: f64,
    pub objective: f64,
    /// Objective after each SQP iteration, with dynamics defects and the terminal
    /// residual charged at `terminal_weight` per unit of L1 norm.
    pub objective_history: Vec<f64>,
    pub status: SolveStatus,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    pub solve_ms: f64,
}

impl LmpcSolution {
    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().copied().fold(0.0, f64::max)
    }
}

/// Initial SQP iterate: states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub states: Vec<AugmentedState>,
    pub inputs: Vec<ControlInput>,
}

/// Shift the previous solution by one step, duplicating the last state and input.
pub fn warm_start(prev: &LmpcSolution) -> Iterate {
    let n = prev.inputs.len();
    let mut states: Vec<AugmentedState> = prev.states[1..].to_vec();
    states.push(prev.states[n]);
    let mut inputs: Vec<ControlInput> = prev.inputs[1..].to_vec();
    inputs.push(prev.inputs[n - 1]);
    Iterate { states, inputs }
}

/// Hold the current state with hover inputs over the horizon.
pub fn cold_start(x: &AugmentedState, horizon: usize, params: &ModelParams) -> Iterate {
    Iterate { states: vec![*x; horizon + 1], inputs: vec![ControlInput::hover(params); horizon] }
}

fn clamp_s(xa: &AugmentedState, cl: &Centerline) -> AugmentedState {
    AugmentedState { s: cl.clamp(xa.s), ..*xa }
}

/// One-step prediction from the previous terminal state with the previous final input.
pub fn estimate_terminal_state(
    prev: &LmpcSolution,
    params: &ModelParams,
    dt: f64,
    cl: &Centerline,
) -> AugmentedState {
    let n = prev.inputs.len();
    let x = clamp_s(&prev.states[n], cl);
    augmented_rk4_step(&x, &prev.inputs[n - 1], dt, cl, params).expect("arc length clamped into domain")
}

/// Receding-horizon controller state for one lap.
#[derive(Clone)]
pub struct LmpcController<'a> {
    cfg: LmpcConfig,
    params: ModelParams,
    cl: &'a Centerline,
    cost: &'a StageCost,
    safe_set: &'a SafeSet,
    shifted: bool,
    kmat: Matrix3<f64>,
    prev: Option<LmpcSolution>,
    bootstrap: Option<AugmentedState>,
    last_input: Option<ControlInput>,
}

/// Variable layout of the QP.
struct Layout {
    n: usize,
    m: usize,
    term_rows: Vec<usize>,
    /// Finish arc length when a finished state is among the candidates.
    goal: Option<f64>,
}

impl Layout {
    fn x(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.n);
        (k - 1) * NXA
    }
    fn u(&self, k: usize) -> usize {
        self.n * NXA + k * NU
    }
    fn lambda(&self, i: usize) -> usize {
        self.n * (NXA + NU) + i
    }
    fn slack(&self, k: usize) -> usize {
        self.n * (NXA + NU) + self.m + (k - 1)
    }
    fn term(&self, j: usize) -> usize {
        self.n * (NXA + NU + 1) + self.m + 2 * j
    }
    fn len(&self) -> usize {
        self.n * (NXA + NU + 1) + self.m + 2 * self.term_rows.len()
    }
}

impl<'a> LmpcController<'a> {
    pub fn new(
        cfg: LmpcConfig,
        params: ModelParams,
        cl: &'a Centerline,
        cost: &'a StageCost,
        safe_set: &'a SafeSet,
        shifted: bool,
    ) -> Self {
        let kmat = cfg.shift_matrix();
        Self { cfg, params, cl, cost, safe_set, shifted, kmat, prev: None, bootstrap: None, last_input: None }
    }

    pub fn config(&self) -> &LmpcConfig {
        &self.cfg
    }

    /// Reset per-lap state. `x_bar` seeds the first terminal-state estimate.
    pub fn begin_lap(&mut self, x_bar: Option<AugmentedState>) {
        self.prev = None;
        self.last_input = None;
        self.bootstrap = x_bar;
    }

    pub fn previous(&self) -> Option<&LmpcSolution> {
        self.prev.as_ref()
    }

    /// Terminal-state estimate used for the next solve.
    pub fn terminal_estimate(&self, x_k: &AugmentedState) -> AugmentedState {
        match (&self.prev, &self.bootstrap) {
            (Some(prev), _) => estimate_terminal_state(prev, &self.params, self.cfg.dt(), self.cl),
            (None, Some(x)) => *x,
            (None, None) => *x_k,
        }
    }

    /// Solve from `x_k` with a warm start (or cold start on the first call).
    pub fn solve_step(&mut self, x_k: &AugmentedState) -> Result<(ControlInput, LmpcSolution), SafeSetError> {
        let init = match &self.prev {
            Some(prev) => warm_start(prev),
            None => cold_start(x_k, self.cfg.horizon, &self.params),
        };
        self.solve_from(x_k, init)
    }

    /// Solve from an explicit initial iterate. Updates the stored previous solution
    /// unless the QP was infeasible.
    pub fn solve_from(
        &mut self,
        x_k: &AugmentedState,
        init: Iterate,
    ) -> Result<(ControlInput, LmpcSolution), SafeSetError> {
        let start = Instant::now();
        let x_bar = self.terminal_estimate(x_k);
        let candidates = self.safe_set.terminal_candidates(
            &x_bar,
            self.cfg.neighbors,
            self.shifted,
            self.cl,
            &self.kmat,
        )?;
        let mut sol = self.sqp(x_k, init, candidates);
        sol.solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let u = if sol.status == SolveStatus::Infeasible {
            self.last_input.unwrap_or_else(|| ControlInput::hover(&self.params))
        } else {
            let u = sol.inputs[0].clamped(&self.params);
            self.prev = Some(sol.clone());
            u
        };
        self.last_input = Some(u);
        Ok((u, sol))
    }

    fn sqp(&self, x_k: &AugmentedState, init: Iterate, candidates: TerminalCandidateSet) -> LmpcSolution {
        let n = self.cfg.horizon;
        let m = candidates.len();
        let s_max = self.cl.s_max();
        let goal = candidates.states.iter().any(|x| x[0] >= s_max).then_some(s_max);
        let term_rows: Vec<usize> = match goal {
            Some(_) => vec![0],
            None => (0..NXA).filter(|&i| !(i == NXA - 1 && self.params.yaw_frozen())).collect(),
        };
        let layout = Layout { n, m, term_rows, goal };
        let mut states = init.states;
        let mut inputs = init.inputs;
        states[0] = *x_k;
        let mut lambda = vec![1.0 / m as f64; m];
        let mut history = Vec::new();
        let mut status = SolveStatus::MaxIterations;
        let mut kkt = f64::INFINITY;
        let mut iters = 0;
        let mut rho = self.cfg.proximal_weight;
        let mut qp = self.build_qp(&layout, &states, &inputs, &candidates, rho);
        for it in 0..self.cfg.max_sqp_iters {
            let res = qp.solve(self.cfg.max_qp_iters, 1e-6);
            iters = it + 1;
            match res.status {
                QpStatus::Infeasible | QpStatus::Failed => {
                    log::debug!("QP {:?} at SQP iteration {it}", res.status);
                    if it == 0 {
                        status = SolveStatus::Infeasible;
                    }
                    break;
                }
                QpStatus::Solved | QpStatus::Inaccurate => {}
            }
            let mut z = res.x;
            for k in 1..=n {
                let v = AugVec::from_column_slice(&z[layout.x(k)..layout.x(k) + NXA]);
                states[k] = clamp_s(&AugmentedState::from_vec(&v), self.cl);
                z[layout.x(k)] = states[k].s;
            }
            for (k, u) in inputs.iter_mut().enumerate() {
                let b = layout.u(k);
                *u = ControlInput { f_sigma: z[b], phi_cmd: z[b + 1], theta_cmd: z[b + 2], psi_cmd: z[b + 3] };
            }
            lambda.copy_from_slice(&z[layout.lambda(0)..layout.lambda(0) + m]);
            history.push(self.objective(&layout, &states, &inputs, &lambda, &candidates));
            if let [.., prev, last] = history[..] {
                rho *= self.cfg.proximal_growth;
                if last > prev {
                    rho *= PROXIMAL_BACKOFF;
                }
            }
            qp = self.build_qp(&layout, &states, &inputs, &candidates, rho);
            kkt = qp.kkt_residual(&z, &res.y);
            if kkt < self.cfg.kkt_tol {
                status = SolveStatus::Converged;
                break;
            }
        }
        let slacks = (1..=n).map(|k| self.slack_at(&states[k])).collect();
        let terminal_residual = self.terminal_residual(&layout, &states[n], &lambda, &candidates);
        let objective = history.last().copied().unwrap_or(f64::NAN);
        let max_defect = self.max_defect(&states, &inputs);
        LmpcSolution {
            states,
            inputs,
            lambda,
            candidates,
            slacks,
            terminal_residual,
            max_defect,
            objective,
            objective_history: history,
            status,
            sqp_iterations: iters,
            kkt_residual: kkt,
            solve_ms: 0.0,
        }
    }

    fn slack_at(&self, xa: &AugmentedState) -> f64 {
        let r = self.cl.corridor_radius(xa.s) - self.cfg.corridor_margin;
        ((xa.x.p - self.cl.position(xa.s)).norm() - r).max(0.0)
    }

    fn defects(&self, states: &[AugmentedState], inputs: &[ControlInput]) -> Vec<AugVec> {
        let dt = self.cfg.dt();
        (0..inputs.len())
            .map(|k| {
                let next = augmented_rk4_step(&clamp_s(&states[k], self.cl), &inputs[k], dt, self.cl, &self.params)
                    .expect("arc length clamped into domain");
                next.to_vec() - states[k + 1].to_vec()
            })
            .collect()
    }

    fn max_defect(&self, states: &[AugmentedState], inputs: &[ControlInput]) -> f64 {
        self.defects(states, inputs).iter().map(|d| d.amax()).fold(0.0, f64::max)
    }

    /// Nonlinear objective of an iterate, including slack, terminal and defect penalties.
    fn objective(
        &self,
        layout: &Layout,
        states: &[AugmentedState],
        inputs: &[ControlInput],
        lambda: &[f64],
        candidates: &TerminalCandidateSet,
    ) -> f64 {
        let stage: f64 = (0..inputs.len()).map(|k| self.cost.stage_cost(&states[k], &inputs[k], self.cl)).sum();
        let slack: f64 = states[1..].iter().map(|x| self.slack_at(x).powi(2)).sum::<f64>() * self.cfg.slack_weight;
        let term = match layout.goal {
            Some(s_max) => (s_max - states[layout.n].s).max(0.0),
            None => {
                let combo = candidates.combine(lambda);
                let xn = states[layout.n].to_vec();
                layout.term_rows.iter().map(|&i| (xn[i] - combo[i]).abs()).sum::<f64>()
            }
        };
        let defect: f64 = self.defects(states, inputs).iter().map(|d| d.abs().sum()).sum();
        stage + candidates.combined_cost(lambda) + slack + (term + defect) * self.cfg.terminal_weight
    }

    /// Largest violation of the terminal constraint.
    fn terminal_residual(
        &self,
        layout: &Layout,
        xn: &AugmentedState,
        lambda: &[f64],
        candidates: &TerminalCandidateSet,
    ) -> f64 {
        match layout.goal {
            Some(s_max) => (s_max - xn.s).max(0.0),
            None => {
                let combo = candidates.combine(lambda);
                let xn = xn.to_vec();
                layout.term_rows.iter().map(|&i| (xn[i] - combo[i]).abs()).fold(0.0, f64::max)
            }
        }
    }

    /// Weighted lateral residual `sqrt(w(s)) (p - p_c(s)) / R_c(s)`.
    fn lateral_residual(&self, s: f64, p: &Vector3<f64>) -> Vector3<f64> {
        let w = self.cost.lateral_multiplier(s).max(0.0).sqrt();
        (p - self.cl.position(s)) * (w / self.cl.corridor_radius(s))
    }

    fn build_qp(
        &self,
        layout: &Layout,
        states: &[AugmentedState],
        inputs: &[ControlInput],
        candidates: &TerminalCandidateSet,
        proximal: f64,
    ) -> QpBuilder {
        let n = layout.n;
        let dt = self.cfg.dt();
        let mut qp = QpBuilder::new(layout.len());

        // input cost u' W u
        let w = self.cost.scaled_input_weight();
        for k in 0..n {
            let base = layout.u(k);
            for i in 0..NU {
                for j in i..NU {
                    qp.add_hessian(base + i, base + j, 2.0 * w[(i, j)]);
                }
            }
        }

        // Gauss-Newton lateral cost on stages 1..N-1
        let q = self.cost.lateral_weight();
        for k in 1..n {
            let xa = &states[k];
            if self.cost.lateral_multiplier(xa.s) <= 0.0 && self.cost.lateral_multiplier(xa.s + 0.05) <= 0.0 {
                continue;
            }
            let r0 = self.lateral_residual(xa.s, &xa.x.p);
            let h = 1e-5;
            let dr_ds = (self.lateral_residual(xa.s + h, &xa.x.p) - self.lateral_residual(xa.s - h, &xa.x.p)) / (2.0 * h);
            let scale = self.cost.lateral_multiplier(xa.s).max(0.0).sqrt() / self.cl.corridor_radius(xa.s);
            // J maps the (s, px, py, pz) block onto the residual
            let mut jac = nalgebra::Matrix3x4::zeros();
            jac.set_column(0, &dr_ds);
            for i in 0..3 {
                jac[(i, 1 + i)] = scale;
            }
            let z0 = nalgebra::Vector4::new(xa.s, xa.x.p.x, xa.x.p.y, xa.x.p.z);
            let hess = jac.transpose() * q * jac * 2.0;
            let grad = jac.transpose() * q * (r0 - jac * z0) * 2.0;
            let base = layout.x(k);
            for i in 0..4 {
                for j in i..4 {
                    qp.add_hessian(base + i, base + j, hess[(i, j)]);
                }
                qp.add_linear(base + i, grad[i]);
            }
        }

        // proximal regularization around the current iterate
        let rho = proximal;
        if rho > 0.0 {
            for k in 1..=n {
                let v = states[k].to_vec();
                for i in 0..NXA {
                    qp.add_hessian(layout.x(k) + i, layout.x(k) + i, 2.0 * rho);
                    qp.add_linear(layout.x(k) + i, -2.0 * rho * v[i]);
                }
            }
            for k in 0..n {
                let v = inputs[k].to_vec();
                for i in 0..NU {
                    let rho = if i == 0 { rho } else { rho * self.cfg.proximal_attitude_scale };
                    qp.add_hessian(layout.u(k) + i, layout.u(k) + i, 2.0 * rho);
                    qp.add_linear(layout.u(k) + i, -2.0 * rho * v[i]);
                }
            }
        }

        for (i, c) in candidates.costs.iter().enumerate() {
            qp.add_linear(layout.lambda(i), *c);
        }
        for k in 1..=n {
            qp.add_hessian(layout.slack(k), layout.slack(k), 2.0 * self.cfg.slack_weight);
        }
        for j in 0..layout.term_rows.len() {
            qp.add_linear(layout.term(j), self.cfg.terminal_weight);
            qp.add_linear(layout.term(j) + 1, self.cfg.terminal_weight);
        }

        // linearized dynamics
        for k in 0..n {
            let xk = clamp_s(&states[k], self.cl);
            let (next, a, b) = linearize_discrete_with_step(&xk, &inputs[k], dt, self.cl, &self.params)
                .expect("arc length clamped into domain");
            let xv = xk.to_vec();
            let uv = inputs[k].to_vec();
            let rhs = if k == 0 { next - b * uv } else { next - a * xv - b * uv };
            for i in 0..NXA {
                let mut row = vec![(layout.x(k + 1) + i, 1.0)];
                if k > 0 {
                    for j in 0..NXA {
                        if a[(i, j)] != 0.0 {
                            row.push((layout.x(k) + j, -a[(i, j)]));
                        }
                    }
                }
                for j in 0..NU {
                    if b[(i, j)] != 0.0 {
                        row.push((layout.u(k) + j, -b[(i, j)]));
                    }
                }
                qp.add_eq(row, rhs[i]);
            }
        }

        // terminal convex combination with L1 residual, or the finish half-space
        if let Some(s_max) = layout.goal {
            qp.add_le(vec![(layout.x(n), -1.0), (layout.term(0), -1.0)], -s_max);
        }
        for (j, &i) in layout.term_rows.iter().enumerate().filter(|_| layout.goal.is_none()) {
            let mut row = vec![(layout.x(n) + i, 1.0), (layout.term(j), -1.0), (layout.term(j) + 1, 1.0)];
            for (c, x) in candidates.states.iter().enumerate() {
                if x[i] != 0.0 {
                    row.push((layout.lambda(c), -x[i]));
                }
            }
            qp.add_eq(row, 0.0);
        }
        for j in 0..layout.term_rows.len() {
            qp.add_le(vec![(layout.term(j), -1.0)], 0.0);
            qp.add_le(vec![(layout.term(j) + 1, -1.0)], 0.0);
        }
        qp.add_eq((0..layout.m).map(|c| (layout.lambda(c), 1.0)).collect(), 1.0);
        for c in 0..layout.m {
            qp.add_le(vec![(layout.lambda(c), -1.0)], 0.0);
        }

        // input bounds; the yaw command is pinned to zero
        let amax = self.params.angle_max;
        for k in 0..n {
            let u = layout.u(k);
            qp.add_le(vec![(u, 1.0)], self.params.f_max);
            qp.add_le(vec![(u, -1.0)], 0.0);
            for j in 1..3 {
                qp.add_le(vec![(u + j, 1.0)], amax);
                qp.add_le(vec![(u + j, -1.0)], amax);
            }
            qp.add_eq(vec![(u + 3, 1.0)], 0.0);
        }

        // corridor: supporting half-spaces of the tube cross-section
        for k in 1..=n {
            let xa = &states[k];
            let s = xa.s;
            let t = self.cl.tangent(s);
            let pc = self.cl.position(s);
            let r = self.cl.corridor_radius(s) - self.cfg.corridor_margin;
            let dr = self.cl.corridor_radius_derivative(s);
            let d = xa.x.p - pc;
            let (e1, e2) = perpendicular_basis(&t);
            let mut normals = vec![e1, -e1, e2, -e2];
            normals.push(if d.norm() > 1e-6 { d.normalize() } else { e1 });
            qp.add_le(vec![(layout.slack(k), -1.0)], 0.0);
            for nrm in normals {
                // n'(p - p_c(s)) - R(s) <= sigma, linearized in s about the iterate
                let g_s = -nrm.dot(&t) - dr;
                let base = layout.x(k);
                let row = vec![
                    (base, g_s),
                    (base + 1, nrm.x),
                    (base + 2, nrm.y),
                    (base + 3, nrm.z),
                    (layout.slack(k), -1.0),
                ];
                let rhs = r + nrm.dot(&pc) + g_s * s;
                qp.add_le(row, rhs);
            }
        }
        qp
    }
}

/// Two unit vectors completing `t` to an orthonormal frame.
fn perpendicular_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = t.cross(&helper).normalize();
    let e2 = t.cross(&e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostConfig, CostVariant};
    use crate::dynamics::DroneState;
    use crate::safeset::Trajectory;
    use crate::track::{rotation_from_ypr, CenterlineOptions, Gate, Pose, RadiusConfig};
    use std::f64::consts::FRAC_PI_2;

    fn line() -> Centerline {
        let start = Pose { position: Vector3::new(0.0, 0.0, 1.0), rotation: Matrix3::identity() };
        let gates = [Gate::new(Vector3::new(6.0, 0.0, 1.0), rotation_from_ypr(0.0, FRAC_PI_2, 0.0), 0.2)];
        Centerline::build(&start, &gates, RadiusConfig::default(), CenterlineOptions::default()).unwrap()
    }

    fn hover_set(cl: &Centerline, s: f64, n: usize, params: &ModelParams, cost: &StageCost) -> SafeSet {
        let xa = AugmentedState::new(s, DroneState::at_rest(cl.position(s)));
        let u = ControlInput::hover(params);
        let mut stage = vec![cost.stage_cost(&xa, &u, cl); n];
        stage[n - 1] = 0.0;
        let traj = Trajectory {
            iteration: 0,
            times: (0..n).map(|k| k as f64 / 30.0).collect(),
            states: vec![xa; n],
            inputs: vec![u; n - 1],
            stage_costs: stage,
            successful: true,
        };
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj).unwrap();
        ss
    }

    #[test]
    fn stationary_safe_set_yields_hover() {
        let cl = line();
        let params = ModelParams::default();
        let cost = StageCost::new(&CostConfig::default(), cl.gate_arclengths(), params.hover_thrust(), CostVariant::Modified);
        let ss = hover_set(&cl, 1.0, 60, &params, &cost);
        let mut ctl = LmpcController::new(LmpcConfig::default(), params.clone(), &cl, &cost, &ss, false);
        let x = ss.trajectories()[0][0].xa;
        ctl.begin_lap(Some(x));
        let (u, sol) = ctl.solve_step(&x).unwrap();
        assert!((u.f_sigma - params.hover_thrust()).abs() < 1e-3 * params.hover_thrust() * 10.0, "{u:?}");
        assert!(u.phi_cmd.abs() < 1e-3 && u.theta_cmd.abs() < 1e-3);
        // N stages at hover each cost c + |S u|^2_R; the terminal candidates hold cost-to-go
        let stage = cost.stage_cost(&x, &ControlInput::hover(&params), &cl);
        let n = ctl.config().horizon as f64;
        let expected = n * stage + sol.candidates.combined_cost(&sol.lambda);
        assert!((sol.objective - expected).abs() < 0.05 * expected, "{} vs {expected}", sol.objective);
        let sum: f64 = sol.lambda.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(sol.lambda.iter().all(|l| *l >= -1e-9));
        assert!(sol.max_defect < 1e-3);
    }

    #[test]
    fn warm_start_shifts_by_one() {
        let cl = line();
        let params = ModelParams::default();
        let states: Vec<AugmentedState> =
            (0..9).map(|k| AugmentedState::new(0.1 * k as f64, DroneState::at_rest(cl.position(0.1 * k as f64)))).collect();
        let inputs: Vec<ControlInput> =
            (0..8).map(|k| ControlInput { f_sigma: 0.3 + 0.01 * k as f64, ..Default::default() }).collect();
        let prev = LmpcSolution {
            states: states.clone(),
            inputs: inputs.clone(),
            lambda: vec![1.0],
            candidates: TerminalCandidateSet::default(),
            slacks: vec![0.0; 8],
            terminal_residual: 0.0,
            max_defect: 0.0,
            objective: 0.0,
            objective_history: vec![],
            status: SolveStatus::Converged,
            sqp_iterations: 1,
            kkt_residual: 0.0,
            solve_ms: 0.0,
        };
        let it = warm_start(&prev);
        for i in 0..8 {
            assert_eq!(it.states[i], states[i + 1]);
        }
        assert_eq!(it.states[8], states[8]);
        for i in 0..7 {
            assert_eq!(it.inputs[i], inputs[i + 1]);
        }
        let cold = cold_start(&states[0], 8, &params);
        assert!(cold.inputs.iter().all(|u| *u == ControlInput::hover(&params)));
        assert!(cold.states.iter().all(|x| *x == states[0]));
    }

    #[test]
    fn terminal_estimate_is_one_rk4_step() {
        let cl = line();
        let params = ModelParams::default();
        let mut x = AugmentedState::new(2.0, DroneState::at_rest(cl.position(2.0)));
        x.x.v = cl.tangent(2.0) * 0.5;
        let u = ControlInput::hover(&params);
        let prev = LmpcSolution {
            states: vec![x; 9],
            inputs: vec![u; 8],
            lambda: vec![1.0],
            candidates: TerminalCandidateSet::default(),
            slacks: vec![0.0; 8],
            terminal_residual: 0.0,
            max_defect: 0.0,
            objective: 0.0,
            objective_history: vec![],
            status: SolveStatus::Converged,
            sqp_iterations: 1,
            kkt_residual: 0.0,
            solve_ms: 0.0,
        };
        let dt = 1.0 / 30.0;
        let est = estimate_terminal_state(&prev, &params, dt, &cl);
        assert_eq!(est, augmented_rk4_step(&x, &u, dt, &cl, &params).unwrap());
        assert!((est.s - (2.0 + 0.5 * dt)).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LmpcConfig::default().validate().is_ok());
        assert!(LmpcConfig { neighbors: 0, ..Default::default() }.validate().is_err());
        assert!(LmpcConfig { horizon: 1, ..Default::default() }.validate().is_err());
    }
}
