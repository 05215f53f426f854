//! Constant-speed PID centerline tracker used for the first demonstration lap.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, DroneState, ModelParams};
use crate::error::ConfigError;
use crate::track::Centerline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    /// Reference speed along the centerline [m/s].
    pub speed: f64,
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    pub kd: [f64; 3],
    /// Control rate [Hz].
    pub rate: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self { speed: 0.5, kp: [8.0, 8.0, 10.0], ki: [0.5; 3], kd: [5.0, 5.0, 6.0], rate: 90.0 }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(ConfigError::range("pid.speed", "must be > 0"));
        }
        for (name, g) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(ConfigError::range(format!("pid.{name}"), "gains must be >= 0"));
            }
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(ConfigError::range("pid.rate", "must be > 0"));
        }
        Ok(())
    }

    /// Nominal lap duration at the reference speed.
    pub fn nominal_lap_time(&self, cl: &Centerline) -> f64 {
        cl.s_max() / self.speed
    }
}

/// Reference point moving at constant speed along the centerline. It continues
/// through the exit extension so the last gate is flown through, and stops at
/// the end of the track.
pub fn reference(cl: &Centerline, t: f64, cfg: &PidConfig) -> (Vector3<f64>, Vector3<f64>) {
    let s = (cfg.speed * t.max(0.0)).min(cl.s_end());
    let v = if s < cl.s_end() { cl.tangent(s) * cfg.speed } else { Vector3::zeros() };
    (cl.position(s), v)
}

/// Roll and pitch that point the body z-axis along `dir` at zero yaw.
pub fn attitude_for_direction(dir: &Vector3<f64>) -> (f64, f64) {
    let z = dir.normalize();
    let phi = (-z.y).clamp(-1.0, 1.0).asin();
    let theta = z.x.atan2(z.z);
    (phi, theta)
}

#[derive(Debug, Clone)]
pub struct PidController {
    cfg: PidConfig,
    params: ModelParams,
    integral: Vector3<f64>,
}

impl PidController {
    pub fn new(cfg: PidConfig, params: ModelParams) -> Self {
        Self { cfg, params, integral: Vector3::zeros() }
    }

    pub fn config(&self) -> &PidConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.integral = Vector3::zeros();
    }

    /// Desired acceleration including gravity compensation; advances the integral term.
    pub fn desired_acceleration(&mut self, x: &DroneState, p_ref: &Vector3<f64>, v_ref: &Vector3<f64>) -> Vector3<f64> {
        let dt = 1.0 / self.cfg.rate;
        let ep = p_ref - x.p;
        let ev = v_ref - x.v;
        self.integral += ep * dt;
        let kp = Vector3::from(self.cfg.kp);
        let ki = Vector3::from(self.cfg.ki);
        let kd = Vector3::from(self.cfg.kd);
        kp.component_mul(&ep) + kd.component_mul(&ev) + ki.component_mul(&self.integral)
            + Vector3::new(0.0, 0.0, self.params.gravity)
    }

    pub fn control(&mut self, x: &DroneState, p_ref: &Vector3<f64>, v_ref: &Vector3<f64>) -> ControlInput {
        let a = self.desired_acceleration(x, p_ref, v_ref);
        let norm = a.norm();
        if norm < 1e-12 {
            return ControlInput::default();
        }
        let (phi, theta) = attitude_for_direction(&a);
        ControlInput { f_sigma: self.params.mass * norm, phi_cmd: phi, theta_cmd: theta, psi_cmd: 0.0 }
            .clamped(&self.params)
    }
}
