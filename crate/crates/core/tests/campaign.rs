use drone_lmpc::baseline::PidController;
use drone_lmpc::config::{CampaignConfig, Track};
use drone_lmpc::cost::StageCost;
use drone_lmpc::dynamics::{AugmentedState, ControlInput};
use drone_lmpc::lmpc::{cold_start, LmpcController};
use drone_lmpc::safeset::SafeSet;
use drone_lmpc::sim::{
    bench_solver, mean_std, resummed_cost, run_campaign, run_lap, write_campaign, BaselineController, ControlOutput,
    Controller, FailureReason, LapSetup, Scene,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct ZeroThrust;

impl Controller for ZeroThrust {
    fn rate(&self) -> f64 {
        30.0
    }

    fn control(&mut self, _t: f64, _x: &AugmentedState) -> ControlOutput {
        ControlOutput { u: ControlInput::default(), solution: None }
    }
}

fn bundled(max_iterations: usize) -> (CampaignConfig, Track) {
    let mut cfg = CampaignConfig::bundled();
    cfg.sim.max_iterations = max_iterations;
    let track = cfg.load_track().unwrap();
    (cfg, track)
}

#[test]
fn single_iteration_campaign_is_the_baseline() {
    let (cfg, track) = bundled(1);
    let res = run_campaign(&cfg, &track).unwrap();
    assert_eq!(res.laps.len(), 1);
    let lap = res.baseline();
    assert!(lap.success);
    assert_eq!(lap.gates_passed(), track.gates.len());
    let scene = Scene::build(&cfg, &track).unwrap();
    let cl = &scene.centerline;
    let nominal = cl.s_max() / cfg.pid.speed;
    let t = lap.lap_time.unwrap();
    assert!((t - nominal).abs() < 0.1 * nominal, "{t} vs {nominal}");
    // no wind-up of the arc-length estimate over the lap
    let s_final = lap.trajectory.states.last().unwrap().s;
    assert!((s_final - cl.s_max()).abs() <= 2.0 * scene.index.bin_width(), "{s_final} vs {}", cl.s_max());
    assert_eq!(resummed_cost(lap), res.safe_set.latest().unwrap()[0].cost_to_go);
    assert_eq!(res.summary.successful_iterations, 0);
    assert_eq!(res.safe_set.len(), lap.trajectory.len());
}

#[test]
fn zero_thrust_leaves_the_corridor() {
    let (cfg, track) = bundled(1);
    let scene = Scene::build(&cfg, &track).unwrap();
    let cl = &scene.centerline;
    let cost = StageCost::new(&cfg.cost, cl.gate_arclengths(), cfg.model.hover_thrust(), cfg.mode.cost_variant());
    let setup = LapSetup {
        cl,
        gates: &scene.gates,
        index: &scene.index,
        params: &cfg.model,
        cost: &cost,
        sim: &cfg.sim,
        record_rate: 30.0,
        timeout: 60.0,
        iteration: 0,
    };
    let lap = run_lap(&mut ZeroThrust, &setup, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(!lap.success);
    assert_eq!(lap.failure, Some(FailureReason::CorridorExit));
    assert!(lap.lap_time.is_none());
}

#[test]
fn campaign_outputs_follow_the_naming_scheme() {
    let (cfg, track) = bundled(2);
    let res = run_campaign(&cfg, &track).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_campaign(dir.path(), &res).unwrap();
    for lap in &res.laps {
        let text = std::fs::read_to_string(dir.path().join(format!("{}_lap.csv", lap.iteration))).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("step,t,s,px,py,pz,vx,vy,vz,phi,theta,psi,f_sigma"));
        assert!(header.ends_with("stage_cost,solver_ms,sqp_iters,slack_max"));
        assert_eq!(text.lines().count(), lap.log.len() + 1);
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["laps"].as_array().unwrap().len(), res.laps.len());
    assert_eq!(json["laps"][0]["lap_time"].as_f64(), res.laps[0].lap_time);
    assert!(dir.path().join("safe_set.csv").exists());
}

/// Replays one learning lap, solving every step both warm and cold.
#[test]
fn warm_starts_help_and_the_merit_descends() {
    let (cfg, track) = bundled(2);
    let res = run_campaign(&cfg, &track).unwrap();
    let lap = &res.laps[1];
    assert!(lap.success);

    let descending = lap
        .solves
        .iter()
        .filter(|s| s.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)))
        .count();
    let frac = descending as f64 / lap.solves.len() as f64;
    assert!(frac >= 0.95, "merit non-increasing in {frac:.3} of solves");

    let scene = Scene::build(&cfg, &track).unwrap();
    let cl = &scene.centerline;
    let cost = StageCost::new(&cfg.cost, cl.gate_arclengths(), cfg.model.hover_thrust(), cfg.mode.cost_variant());
    let mut safe_set = SafeSet::new(cfg.lmpc.knn_metric);
    safe_set.add_iteration(&res.laps[0].trajectory).unwrap();
    let mut ctl = LmpcController::new(cfg.lmpc.clone(), cfg.model.clone(), cl, &cost, &safe_set, cfg.mode.shifted());
    let latest = safe_set.latest().unwrap();
    ctl.begin_lap(Some(latest[cfg.lmpc.horizon].xa));
    let (mut no_worse, mut total) = (0, 0);
    for row in lap.log.iter().filter(|r| r.u.is_some()) {
        let mut probe = ctl.clone();
        let (_, cold) = probe.solve_from(&row.xa, cold_start(&row.xa, cfg.lmpc.horizon, &cfg.model)).unwrap();
        let (_, warm) = ctl.solve_step(&row.xa).unwrap();
        total += 1;
        if warm.sqp_iterations <= cold.sqp_iterations {
            no_worse += 1;
        }
    }
    let frac = no_worse as f64 / total as f64;
    assert!(frac >= 0.8, "warm start no slower in {frac:.3} of {total} steps");
}

#[test]
fn bench_statistics_match_recomputation() {
    let (mut cfg, track) = bundled(1);
    cfg.sim.log_wall_time = true;
    let rows = bench_solver(&cfg, &track, &[(8, 20)], 200).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert!(row.times.len() >= 200, "{} solves", row.times.len());
    let n = row.times.len() as f64;
    let mean = row.times.iter().sum::<f64>() / n;
    let std = (row.times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((row.mean_ms - mean).abs() < 1e-9 * mean.max(1.0));
    assert!((row.std_ms - std).abs() < 1e-9 * std.max(1.0));
    assert_eq!(mean_std(&row.times), (row.mean_ms, row.std_ms));
}

#[test]
fn baseline_controller_tracks_the_reference() {
    let (cfg, track) = bundled(1);
    let scene = Scene::build(&cfg, &track).unwrap();
    let cl = &scene.centerline;
    let cost = StageCost::new(&cfg.cost, cl.gate_arclengths(), cfg.model.hover_thrust(), cfg.mode.cost_variant());
    let setup = LapSetup {
        cl,
        gates: &scene.gates,
        index: &scene.index,
        params: &cfg.model,
        cost: &cost,
        sim: &cfg.sim,
        record_rate: 30.0,
        timeout: 60.0,
        iteration: 0,
    };
    let mut ctl = BaselineController { pid: PidController::new(cfg.pid.clone(), cfg.model.clone()), cl };
    let lap = run_lap(&mut ctl, &setup, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(lap.success);
    let rows: Vec<_> = lap.log.iter().filter(|r| r.u.is_some()).collect();
    let mean = rows.iter().map(|r| (r.xa.x.p - cl.position(r.xa.s)).norm()).sum::<f64>() / rows.len() as f64;
    assert!(mean < 0.1, "mean lateral deviation {mean}");
    assert!(lap.max_corridor_violation < 0.0);
}
