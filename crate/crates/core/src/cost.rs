//! Stage cost `h(x, u) = l_t(u) + gamma(s) * l_d(x)`.
//!
//! `l_t(u) = c + |S u|^2_R` where `S` rescales thrust by the hover thrust, so all
//! four channels are O(1). `l_d` is the lateral deviation normalized by the
//! local corridor radius, and `gamma(s)` is a sum of per-gate bumps built from
//! two mirrored sigmoids.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{AugmentedState, ControlInput};
use crate::error::ConfigError;
use crate::track::{sigmoid, Centerline};

/// A weight matrix given either as its diagonal or as full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weights {
    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Weights::Diagonal(d) if i == j => d.get(i).copied().unwrap_or(0.0),
            Weights::Diagonal(_) => 0.0,
            Weights::Full(r) => r.get(i).and_then(|row| row.get(j)).copied().unwrap_or(0.0),
        }
    }

    fn well_formed(&self, n: usize) -> bool {
        match self {
            Weights::Diagonal(d) => d.len() == n,
            Weights::Full(r) => r.len() == n && r.iter().all(|row| row.len() == n),
        }
    }

    pub fn matrix3(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.entry(i, j))
    }

    pub fn matrix4(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.entry(i, j))
    }
}

fn positive_definite(w: &Weights, n: usize) -> bool {
    if !w.well_formed(n) {
        return false;
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| w.entry(i, j));
    (m.clone() - m.transpose()).amax() < 1e-12 && m.cholesky().is_some()
}

/// Per-gate lateral weight: one value for every gate or one per gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GateWeights {
    Uniform(f64),
    PerGate(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Per-step time penalty `c`.
    pub step_cost: f64,
    /// Input weights `R` on the normalized input.
    pub input_weight: Weights,
    /// Lateral weights `Q_d`.
    pub lateral_weight: Weights,
    /// Gate weights `gamma_n`.
    pub gate_weight: GateWeights,
    /// Rising slope `k_in > 0` [1/m].
    pub k_in: f64,
    /// Falling slope `k_out < 0` [1/m].
    pub k_out: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            step_cost: 1.0,
            input_weight: Weights::Diagonal(vec![0.05, 0.1, 0.1, 0.1]),
            lateral_weight: Weights::Diagonal(vec![1.0; 3]),
            gate_weight: GateWeights::Uniform(5.0),
            k_in: 12.0,
            k_out: -12.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self, n_gates: Option<usize>) -> Result<(), ConfigError> {
        if !(self.step_cost > 0.0) {
            return Err(ConfigError::range("cost.step_cost", "must be > 0"));
        }
        if !positive_definite(&self.input_weight, 4) {
            return Err(ConfigError::range("cost.input_weight", "must be a symmetric positive definite matrix of the right size"));
        }
        if !positive_definite(&self.lateral_weight, 3) {
            return Err(ConfigError::range("cost.lateral_weight", "must be a symmetric positive definite matrix of the right size"));
        }
        if !(self.k_in > 0.0) {
            return Err(ConfigError::range("cost.k_in", "must be > 0"));
        }
        if !(self.k_out < 0.0) {
            return Err(ConfigError::range("cost.k_out", "must be < 0"));
        }
        match (&self.gate_weight, n_gates) {
            (GateWeights::Uniform(g), _) if !(*g >= 0.0) => {
                Err(ConfigError::range("cost.gate_weight", "must be >= 0"))
            }
            (GateWeights::PerGate(v), _) if v.iter().any(|g| !(*g >= 0.0)) => {
                Err(ConfigError::range("cost.gate_weight", "entries must be >= 0"))
            }
            (GateWeights::PerGate(v), Some(n)) if v.len() != n => Err(ConfigError::range(
                "cost.gate_weight",
                format!("expected {n} entries, got {}", v.len()),
            )),
            _ => Ok(()),
        }
    }
}

/// Which terms of the stage cost are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostVariant {
    /// `l_t` only.
    TimeOnly,
    /// Input penalty plus a uniform lateral penalty, without the step cost.
    LateralOnly,
    /// `l_t + gamma(s) l_d`.
    #[default]
    Modified,
}

/// Stage-cost evaluator bound to a track and a thrust scale.
#[derive(Debug, Clone)]
pub struct StageCost {
    step_cost: f64,
    input_weight: Matrix4<f64>,
    lateral_weight: Matrix3<f64>,
    gammas: Vec<f64>,
    gate_s: Vec<f64>,
    k_in: f64,
    k_out: f64,
    thrust_scale: f64,
    variant: CostVariant,
}

impl StageCost {
    pub fn new(cfg: &CostConfig, gate_s: &[f64], thrust_scale: f64, variant: CostVariant) -> Self {
        let gammas = match &cfg.gate_weight {
            GateWeights::Uniform(g) => vec![*g; gate_s.len()],
            GateWeights::PerGate(v) => v.clone(),
        };
        Self {
            step_cost: cfg.step_cost,
            input_weight: cfg.input_weight.matrix4(),
            lateral_weight: cfg.lateral_weight.matrix3(),
            gammas,
            gate_s: gate_s.to_vec(),
            k_in: cfg.k_in,
            k_out: cfg.k_out,
            thrust_scale,
            variant,
        }
    }

    pub fn variant(&self) -> CostVariant {
        self.variant
    }

    pub fn thrust_scale(&self) -> f64 {
        self.thrust_scale
    }

    /// Step penalty actually charged per stage under the active variant.
    pub fn step_cost(&self) -> f64 {
        match self.variant {
            CostVariant::LateralOnly => 0.0,
            _ => self.step_cost,
        }
    }

    /// Input weight on the physical input, i.e. `S R S`.
    pub fn scaled_input_weight(&self) -> Matrix4<f64> {
        let s = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0 / self.thrust_scale, 1.0, 1.0, 1.0));
        s * self.input_weight * s
    }

    pub fn lateral_weight(&self) -> &Matrix3<f64> {
        &self.lateral_weight
    }

    /// `c + |S u|^2_R` (the step cost is dropped in the lateral-only variant).
    pub fn input_cost(&self, u: &ControlInput) -> f64 {
        let v = u.to_vec();
        self.step_cost() + v.dot(&(self.scaled_input_weight() * v))
    }

    /// Gate-proximity weight with the configured per-gate values.
    pub fn gamma(&self, s: f64) -> f64 {
        self.gate_s
            .iter()
            .zip(self.gammas.iter())
            .map(|(&sg, &g)| g * sigmoid(self.k_in * (s - sg) + 6.0) * sigmoid(self.k_out * (s - sg) + 6.0))
            .sum()
    }

    /// Lateral weight multiplier under the active variant.
    pub fn lateral_multiplier(&self, s: f64) -> f64 {
        match self.variant {
            CostVariant::TimeOnly => 0.0,
            CostVariant::LateralOnly => {
                if self.gammas.is_empty() {
                    0.0
                } else {
                    self.gammas.iter().sum::<f64>() / self.gammas.len() as f64
                }
            }
            CostVariant::Modified => self.gamma(s),
        }
    }

    /// Normalized lateral residual `(p - p_c(s)) / R_c(s)`.
    pub fn lateral_residual(&self, xa: &AugmentedState, cl: &Centerline) -> Vector3<f64> {
        (xa.x.p - cl.position(xa.s)) / cl.corridor_radius(xa.s)
    }

    pub fn lateral_cost(&self, xa: &AugmentedState, cl: &Centerline) -> f64 {
        let r = self.lateral_residual(xa, cl);
        r.dot(&(self.lateral_weight * r))
    }

    pub fn stage_cost(&self, xa: &AugmentedState, u: &ControlInput, cl: &Centerline) -> f64 {
        let mult = self.lateral_multiplier(xa.s);
        let lateral = if mult == 0.0 { 0.0 } else { mult * self.lateral_cost(xa, cl) };
        self.input_cost(u) + lateral
    }
}
