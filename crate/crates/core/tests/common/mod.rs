#![allow(dead_code)]

use drone_lmpc::dynamics::{continuous_dynamics, ControlInput, DroneState, ModelParams};
use drone_lmpc::track::{rotation_from_ypr, Centerline, CenterlineOptions, Gate, Pose, RadiusConfig};
use nalgebra::{Matrix3, Vector3};
use std::f64::consts::FRAC_PI_2;

/// Gate at `(x, y, z)` traversed along horizontal heading `yaw_deg`.
pub fn gate(x: f64, y: f64, z: f64, yaw_deg: f64) -> Gate {
    Gate::new(Vector3::new(x, y, z), rotation_from_ypr(yaw_deg.to_radians(), FRAC_PI_2, 0.0), 0.2)
}

pub fn start(x: f64, y: f64, z: f64, yaw_deg: f64) -> Pose {
    Pose { position: Vector3::new(x, y, z), rotation: rotation_from_ypr(yaw_deg.to_radians(), 0.0, 0.0) }
}

pub fn build(start: Pose, gates: &[Gate]) -> Centerline {
    Centerline::build(&start, gates, RadiusConfig::default(), CenterlineOptions::default()).unwrap()
}

/// Three gates on a curved, climbing path.
pub fn curved_track() -> Centerline {
    build(start(0.0, 0.0, 1.0, 0.0), &[gate(2.0, 0.5, 1.2, 30.0), gate(3.5, 2.0, 1.0, 80.0), gate(3.0, 4.0, 1.3, 150.0)])
}

/// Planar loop whose third leg crosses its first leg.
pub fn crossing_track() -> Centerline {
    build(start(0.0, 0.0, 1.0, 0.0), &[gate(2.0, 1.0, 1.0, 90.0), gate(1.0, 2.0, 1.0, 180.0), gate(0.5, -1.0, 1.0, -90.0)])
}

/// Explicit midpoint rule on 1000 substeps.
pub fn fine_oracle(x: &DroneState, u: &ControlInput, dt: f64, p: &ModelParams) -> DroneState {
    let n = 1000;
    let h = dt / n as f64;
    let mut xv = x.to_vec();
    for _ in 0..n {
        let k1 = continuous_dynamics(&DroneState::from_vec(&xv), u, p);
        let mid = xv + k1 * (0.5 * h);
        xv += continuous_dynamics(&DroneState::from_vec(&mid), u, p) * h;
    }
    DroneState::from_vec(&xv)
}

pub fn identity_pose() -> Pose {
    Pose { position: Vector3::zeros(), rotation: Matrix3::identity() }
}
