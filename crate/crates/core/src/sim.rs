//! Closed-loop simulation: laps, gate detection, campaigns, sweeps and logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arclen::ArcIndex;
use crate::baseline::{reference, PidController};
use crate::config::{CampaignConfig, Track};
use crate::cost::StageCost;
use crate::dynamics::{rk4_step, AugmentedState, ControlInput, DroneState, ModelParams};
use crate::error::{CampaignError, ConfigError};
use crate::lmpc::{LmpcConfig, LmpcController, LmpcSolution, SolveStatus};
use crate::safeset::{cost_to_go, SafeSet, Trajectory};
use crate::track::{Centerline, CenterlineOptions, Gate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Plant integration rate [Hz]; the integrator never steps longer than `1 / sim_rate`.
    pub sim_rate: f64,
    pub seed: u64,
    /// Laps per campaign including the baseline.
    pub max_iterations: usize,
    /// Lap timeout as a multiple of the baseline lap time.
    pub timeout_factor: f64,
    /// Standard deviation of Gaussian noise on measured positions [m].
    pub position_noise: f64,
    /// Largest corridor violation still counted as inside [m].
    pub corridor_tolerance: f64,
    /// Log solver wall time; disable for bit-identical logs across runs.
    pub log_wall_time: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sim_rate: 200.0,
            seed: 0,
            max_iterations: 10,
            timeout_factor: 3.0,
            position_noise: 0.0,
            corridor_tolerance: 1e-3,
            log_wall_time: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.sim_rate > 0.0 && self.sim_rate.is_finite()) {
            return Err(ConfigError::range("sim.sim_rate", "must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(ConfigError::range("sim.max_iterations", "must be >= 1"));
        }
        if !(self.timeout_factor >= 1.0) {
            return Err(ConfigError::range("sim.timeout_factor", "must be >= 1"));
        }
        if !(self.position_noise >= 0.0) {
            return Err(ConfigError::range("sim.position_noise", "must be >= 0"));
        }
        if !(self.corridor_tolerance >= 0.0) {
            return Err(ConfigError::range("sim.corridor_tolerance", "must be >= 0"));
        }
        Ok(())
    }
}

/// Result of a plane crossing of a gate, in travel direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCrossing {
    /// Interpolation fraction in `[0, 1]` between the two positions.
    pub fraction: f64,
    pub point: Vector3<f64>,
    /// In-plane coordinates of the crossing along the gate's x and y axes.
    pub offset: [f64; 2],
    /// True when the crossing lies inside the opening.
    pub pass: bool,
}

/// Detect a negative-to-positive crossing of the gate plane between two positions.
pub fn gate_crossed(p_prev: &Vector3<f64>, p_next: &Vector3<f64>, gate: &Gate) -> Option<GateCrossing> {
    let axis = gate.axis();
    let d0 = (p_prev - gate.position).dot(&axis);
    let d1 = (p_next - gate.position).dot(&axis);
    if !(d0 < 0.0 && d1 >= 0.0) {
        return None;
    }
    let fraction = d0 / (d0 - d1);
    let point = p_prev + (p_next - p_prev) * fraction;
    let rel = point - gate.position;
    let offset = [rel.dot(&gate.rotation.column(0)), rel.dot(&gate.rotation.column(1))];
    let pass = offset.iter().all(|o| o.abs() <= gate.half_extent);
    Some(GateCrossing { fraction, point, offset, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FailureReason {
    MissedGate { gate: usize },
    /// Crossed the gate plane outside the opening but within 1.5 half extents.
    GateCollision { gate: usize },
    CorridorExit,
    SolverAbort,
    AttitudeLimit,
    Timeout,
}

/// Per-solve diagnostics of the learning controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub t: f64,
    pub solve_ms: f64,
    pub sqp_iters: usize,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub lambda_sum: f64,
    pub lambda_min: f64,
    pub max_defect: f64,
    pub terminal_residual: f64,
    pub max_slack: f64,
    pub objective_history: Vec<f64>,
}

impl SolveRecord {
    fn from_solution(t: f64, sol: &LmpcSolution, wall_time: bool) -> Self {
        Self {
            t,
            solve_ms: if wall_time { sol.solve_ms } else { 0.0 },
            sqp_iters: sol.sqp_iterations,
            status: sol.status,
            kkt_residual: sol.kkt_residual,
            lambda_sum: sol.lambda.iter().sum(),
            lambda_min: sol.lambda.iter().copied().fold(f64::INFINITY, f64::min),
            max_defect: sol.max_defect,
            terminal_residual: sol.terminal_residual,
            max_slack: sol.max_slack(),
            objective_history: sol.objective_history.clone(),
        }
    }
}

/// One row of the lap log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub t: f64,
    pub xa: AugmentedState,
    pub u: Option<ControlInput>,
    pub stage_cost: f64,
    pub solver_ms: f64,
    pub sqp_iters: usize,
    pub slack_max: f64,
}

#[derive(Debug, Clone)]
pub struct LapResult {
    pub iteration: usize,
    pub trajectory: Trajectory,
    pub log: Vec<LogRow>,
    pub solves: Vec<SolveRecord>,
    /// Interpolated crossing time of the last gate.
    pub lap_time: Option<f64>,
    pub gate_times: Vec<f64>,
    pub success: bool,
    pub failure: Option<FailureReason>,
    pub max_corridor_violation: f64,
    pub max_slack: f64,
}

impl LapResult {
    pub fn gates_passed(&self) -> usize {
        self.gate_times.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.trajectory.total_cost()
    }

    pub fn mean_solve_ms(&self) -> f64 {
        if self.solves.is_empty() {
            return 0.0;
        }
        self.solves.iter().map(|s| s.solve_ms).sum::<f64>() / self.solves.len() as f64
    }
}

/// What the plant asks of a controller at each of its ticks.
pub struct ControlOutput {
    pub u: ControlInput,
    pub solution: Option<LmpcSolution>,
}

pub trait Controller {
    /// Control rate [Hz].
    fn rate(&self) -> f64;
    fn control(&mut self, t: f64, measured: &AugmentedState) -> ControlOutput;
}

/// PID tracker bound to a centerline.
pub struct BaselineController<'a> {
    pub pid: PidController,
    pub cl: &'a Centerline,
}

impl Controller for BaselineController<'_> {
    fn rate(&self) -> f64 {
        self.pid.config().rate
    }

    fn control(&mut self, t: f64, measured: &AugmentedState) -> ControlOutput {
        let (p_ref, v_ref) = reference(self.cl, t, self.pid.config());
        ControlOutput { u: self.pid.control(&measured.x, &p_ref, &v_ref), solution: None }
    }
}

impl Controller for LmpcController<'_> {
    fn rate(&self) -> f64 {
        self.config().f_d
    }

    fn control(&mut self, _t: f64, measured: &AugmentedState) -> ControlOutput {
        match self.solve_step(measured) {
            Ok((u, sol)) => ControlOutput { u, solution: Some(sol) },
            Err(e) => {
                log::error!("terminal candidates unavailable: {e}");
                ControlOutput { u: ControlInput::hover(&ModelParams::default()), solution: None }
            }
        }
    }
}

/// Everything a lap needs besides the controller.
pub struct LapSetup<'a> {
    pub cl: &'a Centerline,
    pub gates: &'a [Gate],
    pub index: &'a ArcIndex,
    pub params: &'a ModelParams,
    pub cost: &'a StageCost,
    pub sim: &'a SimConfig,
    /// Recording rate of the trajectory [Hz].
    pub record_rate: f64,
    pub timeout: f64,
    pub iteration: usize,
}

/// Distance from the gate centre beyond which a plane crossing is not attributed to the gate [m].
const GATE_CAPTURE_RADIUS: f64 = 1.0;
/// Arc length past a gate at which it counts as skipped [m].
const GATE_SKIP_DISTANCE: f64 = 0.5;
const INFEASIBLE_ABORT: usize = 3;

/// Fly one lap from rest at the start pose.
pub fn run_lap(controller: &mut dyn Controller, setup: &LapSetup, rng: &mut ChaCha8Rng) -> LapResult {
    let LapSetup { cl, gates, index, params, cost, sim, .. } = *setup;
    let h_max = 1.0 / sim.sim_rate;
    let noise = (sim.position_noise > 0.0).then(|| Normal::new(0.0, sim.position_noise).expect("finite sigma"));
    let ctrl_rate = controller.rate();

    let mut x = DroneState::at_rest(cl.start_position());
    let mut s_est = index.estimate(cl, &x.p, None);
    let mut t = 0.0;
    let mut u = ControlInput::hover(params);
    let (mut ctrl_k, mut rec_k) = (0usize, 0usize);
    let mut next_gate = 0usize;
    let mut gate_times = Vec::new();
    let mut lap_time = None;
    let mut failure = None;
    let mut log = Vec::new();
    let mut solves = Vec::new();
    let mut last_solve: Option<(f64, usize, f64)> = None;
    let mut infeasible_run = 0usize;
    let mut max_violation = cl.corridor_violation(&x.p, s_est);
    let mut max_slack: f64 = 0.0;

    loop {
        let t_ctrl = ctrl_k as f64 / ctrl_rate;
        let t_rec = rec_k as f64 / setup.record_rate;
        if lap_time.is_none() && t >= t_ctrl - 1e-12 {
            let mut measured = AugmentedState::new(s_est, x);
            if let Some(n) = &noise {
                measured.x.p += Vector3::from_fn(|_, _| n.sample(rng));
            }
            let out = controller.control(t, &measured);
            u = out.u;
            if let Some(sol) = out.solution {
                let rec = SolveRecord::from_solution(t, &sol, sim.log_wall_time);
                max_slack = max_slack.max(rec.max_slack);
                last_solve = Some((rec.solve_ms, rec.sqp_iters, rec.max_slack));
                if sol.status == SolveStatus::Infeasible {
                    infeasible_run += 1;
                } else {
                    infeasible_run = 0;
                }
                solves.push(rec);
                if infeasible_run >= INFEASIBLE_ABORT {
                    failure = Some(FailureReason::SolverAbort);
                }
            }
            ctrl_k += 1;
        }
        if failure.is_none() && t >= t_rec - 1e-12 {
            let finished = lap_time.is_some();
            let xa = AugmentedState::new(s_est, x);
            let (solver_ms, sqp_iters, slack) = last_solve.unwrap_or((0.0, 0, 0.0));
            log.push(LogRow {
                step: rec_k,
                t,
                xa,
                u: (!finished).then_some(u),
                stage_cost: if finished { 0.0 } else { cost.stage_cost(&xa, &u, cl) },
                solver_ms,
                sqp_iters,
                slack_max: slack,
            });
            rec_k += 1;
            if finished {
                break;
            }
        }
        if failure.is_some() {
            break;
        }

        let t_next_ctrl = if lap_time.is_none() { ctrl_k as f64 / ctrl_rate } else { f64::INFINITY };
        let t_next = t_next_ctrl.min(rec_k as f64 / setup.record_rate);
        let span = t_next - t;
        let n_sub = ((span / h_max) - 1e-9).ceil().max(1.0) as usize;
        let h = span / n_sub as f64;
        for _ in 0..n_sub {
            let p_prev = x.p;
            x = rk4_step(&x, &u, h, params);
            let t_sub = t + h;
            s_est = index.estimate(cl, &x.p, Some(s_est));
            if !x.is_finite() || x.phi.abs() >= std::f64::consts::FRAC_PI_2 || x.theta.abs() >= std::f64::consts::FRAC_PI_2 {
                failure = Some(FailureReason::AttitudeLimit);
            }
            let violation = cl.corridor_violation(&x.p, s_est);
            max_violation = max_violation.max(violation);
            if failure.is_none() && violation > sim.corridor_tolerance {
                failure = Some(FailureReason::CorridorExit);
            }
            if failure.is_none() && lap_time.is_none() {
                let gate = &gates[next_gate];
                if let Some(c) = gate_crossed(&p_prev, &x.p, gate) {
                    let near = (c.point - gate.position).norm() <= GATE_CAPTURE_RADIUS;
                    if c.pass {
                        let tc = t + c.fraction * h;
                        gate_times.push(tc);
                        next_gate += 1;
                        if next_gate == gates.len() {
                            lap_time = Some(tc);
                        }
                    } else if c.offset.iter().all(|o| o.abs() <= 1.5 * gate.half_extent) {
                        failure = Some(FailureReason::GateCollision { gate: next_gate + 1 });
                    } else if near {
                        failure = Some(FailureReason::MissedGate { gate: next_gate + 1 });
                    }
                }
                if failure.is_none()
                    && lap_time.is_none()
                    && s_est > cl.gate_arclengths()[next_gate] + GATE_SKIP_DISTANCE
                {
                    failure = Some(FailureReason::MissedGate { gate: next_gate + 1 });
                }
            }
            t = t_sub;
            if failure.is_none() && lap_time.is_none() && t > setup.timeout {
                failure = Some(FailureReason::Timeout);
            }
            if failure.is_some() {
                break;
            }
        }
        if failure.is_some() {
            // final row at the failure instant
            let xa = AugmentedState::new(s_est, x);
            let (solver_ms, sqp_iters, slack) = last_solve.unwrap_or((0.0, 0, 0.0));
            log.push(LogRow { step: rec_k, t, xa, u: None, stage_cost: 0.0, solver_ms, sqp_iters, slack_max: slack });
            break;
        }
    }

    let max_corridor_violation = max_violation;
    let success = failure.is_none()
        && gate_times.len() == gates.len()
        && max_corridor_violation < sim.corridor_tolerance;
    let trajectory = Trajectory {
        iteration: setup.iteration,
        times: log.iter().map(|r| r.t).collect(),
        states: log.iter().map(|r| r.xa).collect(),
        inputs: log.iter().filter_map(|r| r.u).collect(),
        stage_costs: log.iter().map(|r| r.stage_cost).collect(),
        successful: success,
    };
    LapResult {
        iteration: setup.iteration,
        trajectory,
        log,
        solves,
        lap_time: if success { lap_time } else { None },
        gate_times,
        success,
        failure,
        max_corridor_violation,
        max_slack,
    }
}

/// Per-lap summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapSummary {
    pub iteration: usize,
    pub success: bool,
    pub lap_time: Option<f64>,
    pub gates_passed: usize,
    pub gate_times: Vec<f64>,
    pub failure: Option<FailureReason>,
    pub total_cost: f64,
    pub steps: usize,
    pub mean_solver_ms: f64,
    pub std_solver_ms: f64,
    pub max_slack: f64,
    pub max_corridor_violation: f64,
}

impl LapSummary {
    pub fn from_lap(lap: &LapResult) -> Self {
        let times: Vec<f64> = lap.solves.iter().map(|s| s.solve_ms).collect();
        let (mean, std) = mean_std(&times);
        Self {
            iteration: lap.iteration,
            success: lap.success,
            lap_time: lap.lap_time,
            gates_passed: lap.gates_passed(),
            gate_times: lap.gate_times.clone(),
            failure: lap.failure,
            total_cost: lap.total_cost(),
            steps: lap.trajectory.len(),
            mean_solver_ms: mean,
            std_solver_ms: std,
            max_slack: lap.max_slack,
            max_corridor_violation: lap.max_corridor_violation,
        }
    }
}

/// Mean and sample standard deviation; zeros for empty input.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub mode: String,
    pub track: String,
    pub f_d: f64,
    pub neighbors: usize,
    pub horizon: usize,
    pub seed: u64,
    pub laps: Vec<LapSummary>,
    pub safe_set_size: usize,
    /// Lap time of each successful learning lap divided by the baseline lap time.
    pub improvement_ratios: Vec<f64>,
    pub successful_iterations: usize,
}

pub struct CampaignResult {
    pub laps: Vec<LapResult>,
    pub safe_set: SafeSet,
    pub summary: CampaignSummary,
}

impl CampaignResult {
    pub fn baseline(&self) -> &LapResult {
        &self.laps[0]
    }

    /// Successful learning laps, i.e. excluding the baseline.
    pub fn successful_iterations(&self) -> usize {
        self.laps.iter().skip(1).filter(|l| l.success).count()
    }
}

/// Immutable per-campaign geometry.
pub struct Scene {
    pub centerline: Centerline,
    pub index: ArcIndex,
    pub gates: Vec<Gate>,
}

impl Scene {
    pub fn build(cfg: &CampaignConfig, track: &Track) -> Result<Self, ConfigError> {
        let centerline = Centerline::build(&track.start, &track.gates, cfg.corridor, CenterlineOptions::default())?;
        let index = ArcIndex::with_options(&centerline, cfg.arclen.options())?;
        Ok(Self { centerline, index, gates: track.gates.clone() })
    }
}

/// Baseline lap followed by learning laps until a failure or `max_iterations`.
pub fn run_campaign(cfg: &CampaignConfig, track: &Track) -> Result<CampaignResult, CampaignError> {
    cfg.validate(track.gates.len())?;
    let scene = Scene::build(cfg, track)?;
    let cl = &scene.centerline;
    let params = &cfg.model;
    let cost = StageCost::new(&cfg.cost, cl.gate_arclengths(), params.hover_thrust(), cfg.mode.cost_variant());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
    let record_rate = cfg.lmpc.f_d;

    let mut baseline = BaselineController { pid: PidController::new(cfg.pid.clone(), params.clone()), cl };
    let setup = LapSetup {
        cl,
        gates: &scene.gates,
        index: &scene.index,
        params,
        cost: &cost,
        sim: &cfg.sim,
        record_rate,
        timeout: cfg.sim.timeout_factor * cfg.pid.nominal_lap_time(cl),
        iteration: 0,
    };
    let lap0 = run_lap(&mut baseline, &setup, &mut rng);
    if !lap0.success {
        return Err(CampaignError::BaselineFailed(format!("{:?}", lap0.failure)));
    }
    let base_time = lap0.lap_time.expect("successful lap has a lap time");
    log::info!("iteration 0: lap time {base_time:.3} s");
    let mut safe_set = SafeSet::new(cfg.lmpc.knn_metric);
    safe_set.add_iteration(&lap0.trajectory)?;
    let mut laps = vec![lap0];

    for j in 1..cfg.sim.max_iterations {
        let lap = {
            let mut ctl = LmpcController::new(cfg.lmpc.clone(), params.clone(), cl, &cost, &safe_set, cfg.mode.shifted());
            let latest = safe_set.latest().expect("baseline stored");
            let seed_state = latest[cfg.lmpc.horizon.min(latest.len() - 1)].xa;
            ctl.begin_lap(Some(seed_state));
            let setup = LapSetup { timeout: cfg.sim.timeout_factor * base_time, iteration: j, ..setup };
            run_lap(&mut ctl, &setup, &mut rng)
        };
        log::info!(
            "iteration {j}: success {} lap time {:?} failure {:?}",
            lap.success,
            lap.lap_time,
            lap.failure
        );
        let ok = lap.success;
        if ok {
            safe_set.add_iteration(&lap.trajectory)?;
        }
        laps.push(lap);
        if !ok {
            break;
        }
    }

    let summary = CampaignSummary {
        mode: cfg.mode.as_str().into(),
        track: track.name.clone(),
        f_d: cfg.lmpc.f_d,
        neighbors: cfg.lmpc.neighbors,
        horizon: cfg.lmpc.horizon,
        seed: cfg.sim.seed,
        laps: laps.iter().map(LapSummary::from_lap).collect(),
        safe_set_size: safe_set.len(),
        improvement_ratios: laps.iter().skip(1).filter_map(|l| l.lap_time.map(|t| t / base_time)).collect(),
        successful_iterations: laps.iter().skip(1).filter(|l| l.success).count(),
    };
    Ok(CampaignResult { laps, safe_set, summary })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub f_d: f64,
    pub neighbors: usize,
    pub horizon: usize,
    pub summary: Option<CampaignSummary>,
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn label(&self) -> String {
        format!("fd{}_k{}_n{}", self.f_d, self.neighbors, self.horizon)
    }

    pub fn final_lap_time(&self) -> Option<f64> {
        let s = self.summary.as_ref()?;
        s.laps.iter().rev().find_map(|l| l.lap_time)
    }
}

/// Independent campaigns over the grid, run in parallel. Failures are recorded.
pub fn hyperparameter_sweep(
    cfg: &CampaignConfig,
    track: &Track,
    grid: &[(f64, usize, usize)],
) -> Vec<(SweepRecord, Option<CampaignResult>)> {
    grid.par_iter()
        .map(|&(f_d, k, n)| {
            let mut c = cfg.clone();
            c.lmpc.f_d = f_d;
            c.lmpc.neighbors = k;
            c.lmpc.horizon = n;
            match run_campaign(&c, track) {
                Ok(res) => (
                    SweepRecord { f_d, neighbors: k, horizon: n, summary: Some(res.summary.clone()), error: None },
                    Some(res),
                ),
                Err(e) => (SweepRecord { f_d, neighbors: k, horizon: n, summary: None, error: Some(e.to_string()) }, None),
            }
        })
        .collect()
}

/// Solve-time statistics for one `(N, K)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub horizon: usize,
    pub neighbors: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Per-solve wall times [ms].
    pub times: Vec<f64>,
}

/// Time closed-loop solves against a safe set holding the baseline lap only.
/// Learning laps are flown per grid point until at least `solves` solves are
/// collected, or three laps have been flown.
pub fn bench_solver(
    cfg: &CampaignConfig,
    track: &Track,
    grid: &[(usize, usize)],
    solves: usize,
) -> Result<Vec<BenchRow>, CampaignError> {
    cfg.validate(track.gates.len())?;
    let scene = Scene::build(cfg, track)?;
    let cl = &scene.centerline;
    let params = &cfg.model;
    let cost = StageCost::new(&cfg.cost, cl.gate_arclengths(), params.hover_thrust(), cfg.mode.cost_variant());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
    let setup = LapSetup {
        cl,
        gates: &scene.gates,
        index: &scene.index,
        params,
        cost: &cost,
        sim: &cfg.sim,
        record_rate: cfg.lmpc.f_d,
        timeout: cfg.sim.timeout_factor * cfg.pid.nominal_lap_time(cl),
        iteration: 0,
    };
    let mut baseline = BaselineController { pid: PidController::new(cfg.pid.clone(), params.clone()), cl };
    let lap0 = run_lap(&mut baseline, &setup, &mut rng);
    if !lap0.success {
        return Err(CampaignError::BaselineFailed(format!("{:?}", lap0.failure)));
    }
    let mut safe_set = SafeSet::new(cfg.lmpc.knn_metric);
    safe_set.add_iteration(&lap0.trajectory)?;
    let latest = safe_set.latest().expect("baseline stored");

    let mut rows = Vec::new();
    for &(n, k) in grid {
        let lmpc = LmpcConfig { horizon: n, neighbors: k, ..cfg.lmpc.clone() };
        lmpc.validate()?;
        let mut times = Vec::new();
        for _ in 0..3 {
            let mut ctl = LmpcController::new(lmpc.clone(), params.clone(), cl, &cost, &safe_set, cfg.mode.shifted());
            ctl.begin_lap(Some(latest[n.min(latest.len() - 1)].xa));
            let lap = run_lap(&mut ctl, &LapSetup { iteration: 1, ..setup }, &mut rng);
            times.extend(lap.solves.iter().map(|s| s.solve_ms));
            if times.len() >= solves {
                break;
            }
        }
        let (mean_ms, std_ms) = mean_std(&times);
        rows.push(BenchRow { horizon: n, neighbors: k, mean_ms, std_ms, times });
    }
    Ok(rows)
}

const LAP_HEADER: [&str; 20] = [
    "step", "t", "s", "px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi", "f_sigma", "phi_cmd", "theta_cmd",
    "psi_cmd", "stage_cost", "solver_ms", "sqp_iters", "slack_max",
];

pub fn write_lap_csv<W: Write>(lap: &LapResult, w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(LAP_HEADER)?;
    for r in &lap.log {
        let mut row: Vec<String> = vec![r.step.to_string(), format!("{:?}", r.t)];
        row.extend(r.xa.to_vec().iter().map(|v| format!("{v:?}")));
        match r.u {
            Some(u) => row.extend(u.to_vec().iter().map(|v| format!("{v:?}"))),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.push(format!("{:?}", r.stage_cost));
        row.push(format!("{:?}", r.solver_ms));
        row.push(r.sqp_iters.to_string());
        row.push(format!("{:?}", r.slack_max));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_path_buf(), source }
}

/// Write `<iter>_lap.csv` per lap, `summary.json` and `safe_set.csv` into `dir`.
pub fn write_campaign(dir: &Path, result: &CampaignResult) -> Result<(), CampaignError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for lap in &result.laps {
        let path = dir.join(format!("{}_lap.csv", lap.iteration));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_lap_csv(lap, std::io::BufWriter::new(file))
            .map_err(|e| CampaignError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
    }
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    let path = dir.join("safe_set.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    result.safe_set.write_csv(std::io::BufWriter::new(file)).map_err(|e| CampaignError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    })?;
    Ok(())
}

/// Re-sum recorded stage costs from the end, as the safe set does.
pub fn resummed_cost(lap: &LapResult) -> f64 {
    cost_to_go(&lap.trajectory.stage_costs).first().copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::rotation_from_ypr;
    use std::f64::consts::FRAC_PI_2;

    fn gate_x(at: f64) -> Gate {
        Gate::new(Vector3::new(at, 0.0, 1.0), rotation_from_ypr(0.0, FRAC_PI_2, 0.0), 0.2)
    }

    #[test]
    fn straight_crossing_through_center() {
        let g = gate_x(1.0);
        let c = gate_crossed(&Vector3::new(0.8, 0.0, 1.0), &Vector3::new(1.3, 0.0, 1.0), &g).unwrap();
        assert!(c.pass);
        assert!((c.fraction - 0.4).abs() < 1e-12);
        assert!((c.point - g.position).norm() < 1e-12);
    }

    #[test]
    fn off_axis_crossing_misses() {
        let g = gate_x(1.0);
        let c = gate_crossed(&Vector3::new(0.9, 0.25, 1.0), &Vector3::new(1.1, 0.25, 1.0), &g).unwrap();
        assert!(!c.pass);
        assert!((c.offset[0].abs().max(c.offset[1].abs()) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backwards_crossing_is_ignored() {
        let g = gate_x(1.0);
        assert!(gate_crossed(&Vector3::new(1.1, 0.0, 1.0), &Vector3::new(0.9, 0.0, 1.0), &g).is_none());
        assert!(gate_crossed(&Vector3::new(0.5, 0.0, 1.0), &Vector3::new(0.9, 0.0, 1.0), &g).is_none());
    }

    #[test]
    fn statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-15);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
