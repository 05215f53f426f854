//! Gate-through centerline, arc-length reparametrization and corridor geometry.
//!
//! The centerline is a chain of cubic Hermite pieces: a lead-in piece from the
//! start pose to the first gate, one piece per consecutive gate pair and a
//! straight exit piece along the last gate's traversal axis. Each piece uses
//! its chord length as the span of the interpolation variable, so the knot
//! tangents are unit vectors along the gates' z-axes.
//!
//! Arc length is tabulated on a dense grid (Gauss-Legendre quadrature per
//! interval). Inversion `s -> l` uses a cubic Hermite interpolant of `l(s)`
//! with the exact slopes `1 / |H'(l)|`, so positions and tangents are evaluated
//! on the true curve.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    /// Forward (body +x) axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub position: Vector3<f64>,
    /// Columns are the gate axes in the inertial frame; column 2 is the traversal direction.
    pub rotation: Matrix3<f64>,
    /// Half edge of the square opening [m].
    pub half_extent: f64,
}

impl Gate {
    pub const DEFAULT_HALF_EXTENT: f64 = 0.2;

    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>, half_extent: f64) -> Self {
        Self { position, rotation, half_extent }
    }

    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Track(format!(
                "gate rotation is not a proper orthonormal matrix (error {err:.3e})"
            )));
        }
        if !(self.half_extent > 0.0) {
            return Err(ConfigError::Track("gate half_extent must be > 0".into()));
        }
        Ok(())
    }
}

/// Corridor radius profile: narrow at gates, wide in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadiusConfig {
    pub r_gate: f64,
    pub r_max: f64,
    /// Sigmoid slope [1/m].
    pub slope: f64,
}

impl Default for RadiusConfig {
    fn default() -> Self {
        Self { r_gate: 0.25, r_max: 0.8, slope: 10.0 }
    }
}

impl RadiusConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.r_gate > 0.0) {
            return Err(ConfigError::range("radius.r_gate", "must be > 0"));
        }
        if !(self.r_max >= self.r_gate) {
            return Err(ConfigError::range("radius.r_max", "must be >= r_gate"));
        }
        if !(self.slope > 0.0) {
            return Err(ConfigError::range("radius.slope", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineOptions {
    /// Spacing of the arc-length table [m].
    pub resolution: f64,
    /// Length of the straight extension past the last gate [m].
    pub exit_length: f64,
}

impl Default for CenterlineOptions {
    fn default() -> Self {
        Self { resolution: 0.01, exit_length: 1.0 }
    }
}

/// Cubic `a + b l + c l^2 + d l^3` on `l in [0, span]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermitePiece {
    coeffs: [Vector3<f64>; 4],
    span: f64,
}

impl HermitePiece {
    pub fn new(p0: Vector3<f64>, p1: Vector3<f64>, t0: Vector3<f64>, t1: Vector3<f64>) -> Self {
        let span = (p1 - p0).norm();
        let (l2, l3) = (span * span, span * span * span);
        let c = (p1 - p0) * (3.0 / l2) - (t0 * 2.0 + t1) / span;
        let d = (p0 - p1) * (2.0 / l3) + (t0 + t1) / l2;
        Self { coeffs: [p0, t0, c, d], span }
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn eval(&self, l: f64) -> Vector3<f64> {
        let [a, b, c, d] = &self.coeffs;
        a + (b + (c + d * l) * l) * l
    }

    pub fn d1(&self, l: f64) -> Vector3<f64> {
        let [_, b, c, d] = &self.coeffs;
        b + (c * 2.0 + d * (3.0 * l)) * l
    }

    pub fn d2(&self, l: f64) -> Vector3<f64> {
        let [_, _, c, d] = &self.coeffs;
        c * 2.0 + d * (6.0 * l)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    s: f64,
    piece: usize,
    l: f64,
    /// |H'(l)|, i.e. ds/dl.
    speed: f64,
}

#[derive(Debug, Clone)]
pub struct Centerline {
    pieces: Vec<HermitePiece>,
    nodes: Vec<Node>,
    gate_s: Vec<f64>,
    s_max: f64,
    s_end: f64,
    radius: RadiusConfig,
    start: Vector3<f64>,
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn piece_arc(piece: &HermitePiece, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL5_NODES
        .iter()
        .zip(GL5_WEIGHTS.iter())
        .map(|(x, w)| w * piece.d1(mid + half * x).norm())
        .sum::<f64>()
        * half
}

impl Centerline {
    pub fn build(
        start: &Pose,
        gates: &[Gate],
        radius: RadiusConfig,
        opts: CenterlineOptions,
    ) -> Result<Self, ConfigError> {
        if gates.is_empty() {
            return Err(ConfigError::Track("at least one gate is required".into()));
        }
        radius.validate()?;
        if !(opts.resolution > 0.0) || !(opts.exit_length > 0.0) {
            return Err(ConfigError::Track("resolution and exit_length must be > 0".into()));
        }
        for g in gates {
            g.validate()?;
        }

        let mut knots: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(gates.len() + 2);
        knots.push((start.position, start.forward().normalize()));
        knots.extend(gates.iter().map(|g| (g.position, g.axis())));
        for w in knots.windows(2) {
            if (w[1].0 - w[0].0).norm() < 1e-6 {
                return Err(ConfigError::Track("consecutive knots coincide".into()));
            }
        }
        let mut pieces: Vec<HermitePiece> =
            knots.windows(2).map(|w| HermitePiece::new(w[0].0, w[1].0, w[0].1, w[1].1)).collect();
        let last = gates.last().expect("non-empty");
        let exit_end = last.position + last.axis() * opts.exit_length;
        pieces.push(HermitePiece::new(last.position, exit_end, last.axis(), last.axis()));

        let mut nodes = Vec::new();
        let mut knot_s = Vec::with_capacity(pieces.len() + 1);
        let mut s = 0.0;
        for (idx, piece) in pieces.iter().enumerate() {
            knot_s.push(s);
            let n = ((piece.span() * 1.5 / opts.resolution).ceil() as usize).max(4);
            let h = piece.span() / n as f64;
            for k in 0..=n {
                let l = if k == n { piece.span() } else { k as f64 * h };
                if k > 0 {
                    s += piece_arc(piece, (k - 1) as f64 * h, l);
                }
                nodes.push(Node { s, piece: idx, l, speed: piece.d1(l).norm() });
            }
        }
        let s_end = s;
        knot_s.push(s_end);
        // knot_s[0] = start, knot_s[n] = gate n, knot_s[len-2] = last gate
        let gate_s: Vec<f64> = knot_s[1..=gates.len()].to_vec();
        let s_max = *gate_s.last().expect("non-empty");
        if gate_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::Track("gate arc lengths are not increasing".into()));
        }
        Ok(Self { pieces, nodes, gate_s, s_max, s_end, radius, start: start.position })
    }

    pub fn pieces(&self) -> &[HermitePiece] {
        &self.pieces
    }

    pub fn s_min(&self) -> f64 {
        0.0
    }

    /// Arc length of the last gate.
    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    /// Arc length at the end of the exit extension.
    pub fn s_end(&self) -> f64 {
        self.s_end
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.s_min(), self.s_end)
    }

    pub fn gate_arclengths(&self) -> &[f64] {
        &self.gate_s
    }

    pub fn radius_config(&self) -> &RadiusConfig {
        &self.radius
    }

    pub fn start_position(&self) -> Vector3<f64> {
        self.start
    }

    pub fn clamp(&self, s: f64) -> f64 {
        if s.is_nan() {
            return self.s_min();
        }
        s.clamp(self.s_min(), self.s_end)
    }

    /// Piece index and interpolation variable at arc length `s` (clamped).
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = self.clamp(s);
        let idx = self.nodes.partition_point(|n| n.s <= s);
        let i = idx.saturating_sub(1).min(self.nodes.len() - 2);
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        debug_assert_eq!(a.piece, b.piece);
        let h = b.s - a.s;
        if h <= 0.0 {
            return (a.piece, a.l);
        }
        let t = (s - a.s) / h;
        let (t2, t3) = (t * t, t * t * t);
        let l = (2.0 * t3 - 3.0 * t2 + 1.0) * a.l
            + (t3 - 2.0 * t2 + t) * h / a.speed
            + (-2.0 * t3 + 3.0 * t2) * b.l
            + (t3 - t2) * h / b.speed;
        (a.piece, l.clamp(a.l.min(b.l), a.l.max(b.l)))
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        let (k, l) = self.locate(s);
        self.pieces[k].eval(l)
    }

    pub fn tangent(&self, s: f64) -> Vector3<f64> {
        let (k, l) = self.locate(s);
        self.pieces[k].d1(l).normalize()
    }

    /// dT/ds on the true curve; zero outside the domain, where the curve is clamped.
    pub fn tangent_derivative(&self, s: f64) -> Vector3<f64> {
        if s < self.s_min() || s > self.s_end {
            return Vector3::zeros();
        }
        let (k, l) = self.locate(s);
        let d1 = self.pieces[k].d1(l);
        let d2 = self.pieces[k].d2(l);
        let speed2 = d1.norm_squared();
        let t = d1 / speed2.sqrt();
        (d2 - t * t.dot(&d2)) / speed2
    }

    fn bump_sum(&self, s: f64) -> (f64, f64) {
        let k = self.radius.slope;
        self.gate_s.iter().fold((0.0, 0.0), |(val, der), &sg| {
            let a = sigmoid(k * (s - sg) + 6.0);
            let b = sigmoid(-k * (s - sg) + 6.0);
            // d/ds sigma(x) = sigma (1 - sigma) dx/ds
            (val + a * b, der + k * a * (1.0 - a) * b - k * b * (1.0 - b) * a)
        })
    }

    pub fn corridor_radius(&self, s: f64) -> f64 {
        let r = &self.radius;
        let (bump, _) = self.bump_sum(self.clamp(s));
        (r.r_max - (r.r_max - r.r_gate) * bump).clamp(r.r_gate, r.r_max)
    }

    /// dR_c/ds (ignoring the clip, which is inactive for isolated gates).
    pub fn corridor_radius_derivative(&self, s: f64) -> f64 {
        let r = &self.radius;
        let (_, der) = self.bump_sum(self.clamp(s));
        -(r.r_max - r.r_gate) * der
    }

    /// `|p - p_c(s)| - R_c(s)`; non-positive inside the corridor.
    pub fn corridor_violation(&self, p: &Vector3<f64>, s: f64) -> f64 {
        (p - self.position(s)).norm() - self.corridor_radius(s)
    }
}

/// Rotation from intrinsic yaw-pitch-roll (Z-Y-X) angles in radians.
pub fn rotation_from_ypr(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).into_inner()
}

/// Rotation from a unit quaternion given as `[w, x, y, z]`.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix().into_inner()
}
