//! Quadrotor model with a collective-thrust / attitude-command interface.
//!
//! The translational part follows Newton's law with the thrust acting along the
//! body z-axis; each Euler angle tracks its command through a first-order lag
//! `angle_dot = alpha * angle + beta * angle_cmd`.
//!
//! The augmented model prepends the arc length `s` along the track centerline,
//! propagated by `s_dot = v . T(s)`.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DomainError};
use crate::track::Centerline;

/// Number of entries in [`DroneState`] when flattened.
pub const NX: usize = 9;
/// Number of entries in [`AugmentedState`] when flattened.
pub const NXA: usize = 10;
/// Number of entries in [`ControlInput`] when flattened.
pub const NU: usize = 4;

pub type StateVec = SVector<f64, NX>;
pub type AugVec = SVector<f64, NXA>;
pub type InputVec = SVector<f64, NU>;
pub type AugJacobian = SMatrix<f64, NXA, NXA>;
pub type InputJacobian = SMatrix<f64, NXA, NU>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Mass [kg].
    pub mass: f64,
    /// Gravitational acceleration [m/s^2].
    pub gravity: f64,
    /// Attitude-lag pole coefficients (roll, pitch, yaw) [1/s].
    pub alpha: [f64; 3],
    /// Attitude-lag input gains (roll, pitch, yaw) [1/s].
    pub beta: [f64; 3],
    /// Upper bound on collective thrust [N].
    pub f_max: f64,
    /// Symmetric bound on commanded roll and pitch [rad].
    pub angle_max: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            mass: 0.033,
            gravity: 9.81,
            alpha: [-6.00, -3.96, 0.0],
            beta: [6.21, 4.08, 0.0],
            f_max: 0.64,
            angle_max: 0.5,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, msg: &str| {
            Err(ConfigError::Range { field: format!("model.{field}"), message: msg.into() })
        };
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass", "must be > 0");
        }
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return bad("gravity", "must be > 0");
        }
        if !(self.f_max > 0.0 && self.f_max.is_finite()) {
            return bad("f_max", "must be > 0");
        }
        if !(self.angle_max > 0.0 && self.angle_max < std::f64::consts::FRAC_PI_2) {
            return bad("angle_max", "must lie in (0, pi/2)");
        }
        if self.alpha.iter().chain(self.beta.iter()).any(|c| !c.is_finite()) {
            return bad("alpha", "attitude coefficients must be finite");
        }
        Ok(())
    }

    /// Thrust that balances gravity at level attitude.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// True when the yaw channel has no dynamics, i.e. yaw stays at its initial value.
    pub fn yaw_frozen(&self) -> bool {
        self.alpha[2] == 0.0 && self.beta[2] == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DroneState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

impl DroneState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self { p, ..Default::default() }
    }

    pub fn to_vec(&self) -> StateVec {
        StateVec::from_column_slice(&[
            self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z, self.phi, self.theta,
            self.psi,
        ])
    }

    pub fn from_vec(x: &StateVec) -> Self {
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            phi: x[6],
            theta: x[7],
            psi: x[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Collective thrust [N].
    pub f_sigma: f64,
    pub phi_cmd: f64,
    pub theta_cmd: f64,
    pub psi_cmd: f64,
}

impl ControlInput {
    pub fn hover(params: &ModelParams) -> Self {
        Self { f_sigma: params.hover_thrust(), ..Default::default() }
    }

    pub fn to_vec(&self) -> InputVec {
        InputVec::new(self.f_sigma, self.phi_cmd, self.theta_cmd, self.psi_cmd)
    }

    pub fn from_vec(u: &InputVec) -> Self {
        Self { f_sigma: u[0], phi_cmd: u[1], theta_cmd: u[2], psi_cmd: u[3] }
    }

    /// Project onto the admissible input set. Yaw command is held at zero.
    pub fn clamped(&self, params: &ModelParams) -> Self {
        let a = params.angle_max;
        Self {
            f_sigma: self.f_sigma.clamp(0.0, params.f_max),
            phi_cmd: self.phi_cmd.clamp(-a, a),
            theta_cmd: self.theta_cmd.clamp(-a, a),
            psi_cmd: 0.0,
        }
    }

    pub fn within_bounds(&self, params: &ModelParams) -> bool {
        let a = params.angle_max;
        (0.0..=params.f_max).contains(&self.f_sigma)
            && self.phi_cmd.abs() <= a
            && self.theta_cmd.abs() <= a
            && self.psi_cmd == 0.0
    }
}

/// Drone state with the centerline arc length prepended.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedState {
    pub s: f64,
    pub x: DroneState,
}

impl AugmentedState {
    pub fn new(s: f64, x: DroneState) -> Self {
        Self { s, x }
    }

    pub fn to_vec(&self) -> AugVec {
        let mut out = AugVec::zeros();
        out[0] = self.s;
        out.fixed_rows_mut::<NX>(1).copy_from(&self.x.to_vec());
        out
    }

    pub fn from_vec(xa: &AugVec) -> Self {
        Self { s: xa[0], x: DroneState::from_vec(&xa.fixed_rows::<NX>(1).into_owned()) }
    }
}

/// Body z-axis expressed in the inertial frame for ZYX Euler angles.
pub fn thrust_direction(phi: f64, theta: f64, psi: f64) -> Vector3<f64> {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    Vector3::new(cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct)
}

pub fn continuous_dynamics(x: &DroneState, u: &ControlInput, params: &ModelParams) -> StateVec {
    let acc = thrust_direction(x.phi, x.theta, x.psi) * (u.f_sigma / params.mass)
        - Vector3::new(0.0, 0.0, params.gravity);
    let [a_phi, a_theta, a_psi] = params.alpha;
    let [b_phi, b_theta, b_psi] = params.beta;
    StateVec::from_column_slice(&[
        x.v.x,
        x.v.y,
        x.v.z,
        acc.x,
        acc.y,
        acc.z,
        a_phi * x.phi + b_phi * u.phi_cmd,
        a_theta * x.theta + b_theta * u.theta_cmd,
        a_psi * x.psi + b_psi * u.psi_cmd,
    ])
}

/// Classical RK4 with the input held over the step.
pub fn rk4_step(x: &DroneState, u: &ControlInput, dt: f64, params: &ModelParams) -> DroneState {
    let x0 = x.to_vec();
    let f = |xv: &StateVec| continuous_dynamics(&DroneState::from_vec(xv), u, params);
    let k1 = f(&x0);
    let k2 = f(&(x0 + k1 * (dt / 2.0)));
    let k3 = f(&(x0 + k2 * (dt / 2.0)));
    let k4 = f(&(x0 + k3 * dt));
    DroneState::from_vec(&(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
}

fn check_domain(s: f64, track: &Centerline) -> Result<(), DomainError> {
    let (lo, hi) = track.domain();
    if !s.is_finite() || s < lo - 1e-9 || s > hi + 1e-9 {
        return Err(DomainError::ArcLength { s, lo, hi });
    }
    Ok(())
}

fn augmented_rhs(xa: &AugVec, u: &ControlInput, track: &Centerline, params: &ModelParams) -> AugVec {
    let state = AugmentedState::from_vec(xa);
    let mut out = AugVec::zeros();
    out[0] = state.x.v.dot(&track.tangent(state.s));
    out.fixed_rows_mut::<NX>(1).copy_from(&continuous_dynamics(&state.x, u, params));
    out
}

pub fn augmented_derivative(
    xa: &AugmentedState,
    u: &ControlInput,
    track: &Centerline,
    params: &ModelParams,
) -> Result<AugVec, DomainError> {
    check_domain(xa.s, track)?;
    Ok(augmented_rhs(&xa.to_vec(), u, track, params))
}

/// One RK4 step of the augmented model. Intermediate stages query the track with clamping.
pub fn augmented_rk4_step(
    xa: &AugmentedState,
    u: &ControlInput,
    dt: f64,
    track: &Centerline,
    params: &ModelParams,
) -> Result<AugmentedState, DomainError> {
    check_domain(xa.s, track)?;
    let x0 = xa.to_vec();
    let f = |xv: &AugVec| augmented_rhs(xv, u, track, params);
    let k1 = f(&x0);
    let k2 = f(&(x0 + k1 * (dt / 2.0)));
    let k3 = f(&(x0 + k2 * (dt / 2.0)));
    let k4 = f(&(x0 + k3 * dt));
    Ok(AugmentedState::from_vec(&(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))))
}

/// Analytic Jacobians of the continuous augmented dynamics at a flattened state.
fn continuous_jacobians(
    xa: &AugVec,
    u: &ControlInput,
    track: &Centerline,
    params: &ModelParams,
) -> (AugVec, AugJacobian, InputJacobian) {
    let f = augmented_rhs(xa, u, track, params);
    let s = xa[0];
    let v = Vector3::new(xa[4], xa[5], xa[6]);
    let (phi, theta, psi) = (xa[7], xa[8], xa[9]);
    let tangent = track.tangent(s);
    let dtangent = track.tangent_derivative(s);

    let mut a = AugJacobian::zeros();
    // s_dot = v . T(s)
    a[(0, 0)] = v.dot(&dtangent);
    for k in 0..3 {
        a[(0, 4 + k)] = tangent[k];
        // p_dot = v
        a[(1 + k, 4 + k)] = 1.0;
    }

    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let thrust_per_mass = u.f_sigma / params.mass;
    let d_phi = Vector3::new(-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct);
    let d_theta = Vector3::new(cf * ct * cp, cf * ct * sp, -cf * st);
    let d_psi = Vector3::new(-cf * st * sp + sf * cp, cf * st * cp + sf * sp, 0.0);
    for k in 0..3 {
        a[(4 + k, 7)] = thrust_per_mass * d_phi[k];
        a[(4 + k, 8)] = thrust_per_mass * d_theta[k];
        a[(4 + k, 9)] = thrust_per_mass * d_psi[k];
    }
    for k in 0..3 {
        a[(7 + k, 7 + k)] = params.alpha[k];
    }

    let mut b = InputJacobian::zeros();
    let dir = thrust_direction(phi, theta, psi) / params.mass;
    for k in 0..3 {
        b[(4 + k, 0)] = dir[k];
        b[(7 + k, 1 + k)] = params.beta[k];
    }
    (f, a, b)
}

/// Jacobians of the one-step RK4 map of the augmented model with respect to
/// state and input, propagated exactly through the four stages.
pub fn linearize_discrete(
    xa: &AugmentedState,
    u: &ControlInput,
    dt: f64,
    track: &Centerline,
    params: &ModelParams,
) -> Result<(AugJacobian, InputJacobian), DomainError> {
    let (_, a, b) = linearize_discrete_with_step(xa, u, dt, track, params)?;
    Ok((a, b))
}

/// Same as [`linearize_discrete`] but also returns the propagated state, which the
/// SQP needs at every linearization point.
pub fn linearize_discrete_with_step(
    xa: &AugmentedState,
    u: &ControlInput,
    dt: f64,
    track: &Centerline,
    params: &ModelParams,
) -> Result<(AugVec, AugJacobian, InputJacobian), DomainError> {
    check_domain(xa.s, track)?;
    let x0 = xa.to_vec();
    let eye = AugJacobian::identity();

    let (k1, a1, b1) = continuous_jacobians(&x0, u, track, params);
    let dk1_dx = a1;
    let dk1_du = b1;

    let (k2, a2, b2) = continuous_jacobians(&(x0 + k1 * (dt / 2.0)), u, track, params);
    let dk2_dx = a2 * (eye + dk1_dx * (dt / 2.0));
    let dk2_du = a2 * dk1_du * (dt / 2.0) + b2;

    let (k3, a3, b3) = continuous_jacobians(&(x0 + k2 * (dt / 2.0)), u, track, params);
    let dk3_dx = a3 * (eye + dk2_dx * (dt / 2.0));
    let dk3_du = a3 * dk2_du * (dt / 2.0) + b3;

    let (k4, a4, b4) = continuous_jacobians(&(x0 + k3 * dt), u, track, params);
    let dk4_dx = a4 * (eye + dk3_dx * dt);
    let dk4_du = a4 * dk3_du * dt + b4;

    let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let a = eye + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * (dt / 6.0);
    let b = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * (dt / 6.0);
    Ok((next, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Explicit midpoint rule on 1000 substeps; its O(h^2) error is ~1e-9 here.
    fn fine_oracle(x: &DroneState, u: &ControlInput, dt: f64, p: &ModelParams) -> DroneState {
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

    #[test]
    fn hover_is_an_equilibrium() {
        let p = ModelParams::default();
        let x = DroneState::at_rest(Vector3::new(1.0, -2.0, 0.7));
        let d = continuous_dynamics(&x, &ControlInput::hover(&p), &p);
        assert_eq!(d, StateVec::zeros());
        let next = rk4_step(&x, &ControlInput::hover(&p), 0.37, &p);
        assert_eq!(next, x);
    }

    #[test]
    fn attitude_lag_uses_identified_roll_coefficients() {
        let p = ModelParams::default();
        let x = DroneState { phi: 0.1, ..Default::default() };
        let u = ControlInput { phi_cmd: 0.2, ..Default::default() };
        let d = continuous_dynamics(&x, &u, &p);
        assert_abs_diff_eq!(d[6], -6.00 * 0.1 + 6.21 * 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(d[6], 0.642, epsilon = 1e-12);
    }

    #[test]
    fn tilted_thrust_matches_direct_evaluation() {
        let p = ModelParams::default();
        let x = DroneState { theta: 0.3, ..Default::default() };
        let u = ControlInput { f_sigma: p.hover_thrust(), ..Default::default() };
        let d = continuous_dynamics(&x, &u, &p);
        // phi = psi = 0: column reduces to (sin(theta), 0, cos(theta))
        assert_abs_diff_eq!(d[3], p.gravity * 0.3f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(d[4], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[5], p.gravity * 0.3f64.cos() - p.gravity, epsilon = 1e-12);
    }

    #[test]
    fn free_fall_is_integrated_exactly() {
        let p = ModelParams::default();
        let x = DroneState { p: Vector3::new(0.0, 0.0, 2.0), v: Vector3::new(0.3, 0.0, 0.1), ..Default::default() };
        let dt = 0.1;
        let next = rk4_step(&x, &ControlInput::default(), dt, &p);
        assert_abs_diff_eq!(next.v.z, 0.1 - p.gravity * dt, epsilon = 1e-14);
        assert_abs_diff_eq!(next.p.z, 2.0 + 0.1 * dt - p.gravity * dt * dt / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(next.p.x, 0.03, epsilon = 1e-15);
    }

    fn random_pair(rng: &mut impl rand::Rng, p: &ModelParams) -> (DroneState, ControlInput) {
        let a = p.angle_max;
        let x = DroneState {
            p: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            v: Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
            phi: rng.random_range(-a..a),
            theta: rng.random_range(-a..a),
            psi: 0.0,
        };
        let u = ControlInput {
            f_sigma: rng.random_range(0.0..p.f_max),
            phi_cmd: rng.random_range(-a..a),
            theta_cmd: rng.random_range(-a..a),
            psi_cmd: 0.0,
        };
        (x, u)
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        use rand::SeedableRng;
        let p = ModelParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dt = 1.0 / 30.0;
        for _ in 0..100 {
            let (x, u) = random_pair(&mut rng, &p);
            let oracle = fine_oracle(&x, &u, dt, &p).to_vec();
            let full = (rk4_step(&x, &u, dt, &p).to_vec() - oracle).amax();
            let half = (rk4_step(&rk4_step(&x, &u, dt / 2.0, &p), &u, dt / 2.0, &p).to_vec() - oracle).amax();
            assert!(full < 2e-5, "one-step error {full:e}");
            // two half steps shrink the error by ~2^4
            assert!(half < full / 12.0 || full < 1e-9, "{full:e} -> {half:e}");
        }
    }

    #[test]
    fn clamping_respects_bounds() {
        let p = ModelParams::default();
        let u = ControlInput { f_sigma: 3.0, phi_cmd: -2.0, theta_cmd: 0.9, psi_cmd: 0.2 }.clamped(&p);
        assert!(u.within_bounds(&p));
        assert_eq!(u.f_sigma, p.f_max);
        assert_eq!(u.phi_cmd, -p.angle_max);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = ModelParams { angle_max: 1.6, ..Default::default() };
        assert!(p.validate().is_err());
        let p = ModelParams { mass: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
