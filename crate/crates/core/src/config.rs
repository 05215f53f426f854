//! Campaign configuration and track files.
//!
//! Both are TOML documents parsed strictly: unknown keys are errors and every
//! omitted section falls back to its defaults.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::arclen::ArcIndexOptions;
use crate::baseline::PidConfig;
use crate::cost::{CostConfig, CostVariant, GateWeights};
use crate::dynamics::ModelParams;
use crate::error::ConfigError;
use crate::lmpc::LmpcConfig;
use crate::sim::SimConfig;
use crate::track::{rotation_from_quaternion, rotation_from_ypr, Gate, Pose, RadiusConfig};

/// The bundled seven-gate track.
pub const BUNDLED_TRACK: &str = include_str!("../assets/split7.toml");
/// Name accepted in place of a track path to select the bundled track.
pub const BUNDLED_TRACK_NAME: &str = "bundled:split7";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "time-only")]
    TimeOnly,
    #[serde(rename = "lateral-only")]
    LateralOnly,
    #[serde(rename = "modified-cost")]
    ModifiedCost,
    #[default]
    #[serde(rename = "modified-cost+shifted-set")]
    ModifiedCostShiftedSet,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] =
        [Self::TimeOnly, Self::LateralOnly, Self::ModifiedCost, Self::ModifiedCostShiftedSet];

    pub fn cost_variant(self) -> CostVariant {
        match self {
            Self::TimeOnly => CostVariant::TimeOnly,
            Self::LateralOnly => CostVariant::LateralOnly,
            Self::ModifiedCost | Self::ModifiedCostShiftedSet => CostVariant::Modified,
        }
    }

    pub fn shifted(self) -> bool {
        self == Self::ModifiedCostShiftedSet
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TimeOnly => "time-only",
            Self::LateralOnly => "lateral-only",
            Self::ModifiedCost => "modified-cost",
            Self::ModifiedCostShiftedSet => "modified-cost+shifted-set",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of time-only, lateral-only, modified-cost, modified-cost+shifted-set"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcLenConfig {
    pub bin_width: f64,
    pub window: usize,
}

impl Default for ArcLenConfig {
    fn default() -> Self {
        let d = ArcIndexOptions::default();
        Self { bin_width: d.bin_width, window: d.window }
    }
}

impl ArcLenConfig {
    pub fn options(&self) -> ArcIndexOptions {
        ArcIndexOptions { bin_width: self.bin_width, window: self.window }
    }
}

/// Grid for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub f_d: Vec<f64>,
    pub neighbors: Vec<usize>,
    pub horizon: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { f_d: vec![16.0, 20.0, 24.0], neighbors: vec![10, 15, 20], horizon: vec![8] }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(f64, usize, usize)> {
        let mut out = Vec::new();
        for &f in &self.f_d {
            for &k in &self.neighbors {
                for &n in &self.horizon {
                    out.push((f, k, n));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.f_d.is_empty() || self.neighbors.is_empty() || self.horizon.is_empty()
    }
}

/// Grid for `bench-solver`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchGrid {
    pub horizon: Vec<usize>,
    pub neighbors: Vec<usize>,
    /// Solves timed per grid point.
    pub solves: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self { horizon: vec![4, 6, 8, 10, 12], neighbors: vec![10, 20, 30], solves: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Track file, or `bundled:split7`.
    pub track: String,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub corridor: RadiusConfig,
    #[serde(default)]
    pub arclen: ArcLenConfig,
    #[serde(default)]
    pub lmpc: LmpcConfig,
    #[serde(default)]
    pub pid: PidConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub bench: BenchGrid,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/campaign")
}

impl CampaignConfig {
    /// Defaults everywhere, flying the bundled track.
    pub fn bundled() -> Self {
        Self {
            track: BUNDLED_TRACK_NAME.into(),
            mode: AblationMode::default(),
            output: default_output(),
            model: ModelParams::default(),
            cost: CostConfig::default(),
            corridor: RadiusConfig::default(),
            arclen: ArcLenConfig::default(),
            lmpc: LmpcConfig::default(),
            pid: PidConfig::default(),
            sim: SimConfig::default(),
            sweep: SweepGrid::default(),
            bench: BenchGrid::default(),
        }
    }

    /// Parse from TOML text. Relative track paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, origin: &Path, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: CampaignConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Schema { path: origin.to_path_buf(), message: e.to_string() })?;
        if let Some(dir) = base_dir {
            if cfg.track != BUNDLED_TRACK_NAME && Path::new(&cfg.track).is_relative() {
                cfg.track = dir.join(&cfg.track).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Range checks on every section. Requires the gate count for per-gate weights.
    pub fn validate(&self, n_gates: usize) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.cost.validate(Some(n_gates))?;
        self.corridor.validate()?;
        if !(self.arclen.bin_width > 0.0) {
            return Err(ConfigError::range("arclen.bin_width", "must be > 0"));
        }
        if self.arclen.window < 1 {
            return Err(ConfigError::range("arclen.window", "must be >= 1"));
        }
        self.lmpc.validate()?;
        self.pid.validate()?;
        self.sim.validate()?;
        if self.sweep.f_d.iter().any(|f| !(*f > 0.0)) {
            return Err(ConfigError::range("sweep.f_d", "entries must be > 0"));
        }
        if self.sweep.neighbors.contains(&0) {
            return Err(ConfigError::range("sweep.neighbors", "entries must be >= 1"));
        }
        if self.sweep.horizon.iter().any(|n| *n < 2) {
            return Err(ConfigError::range("sweep.horizon", "entries must be >= 2"));
        }
        if self.bench.solves < 1 {
            return Err(ConfigError::range("bench.solves", "must be >= 1"));
        }
        if let GateWeights::PerGate(v) = &self.cost.gate_weight {
            if v.len() != n_gates {
                return Err(ConfigError::range("cost.gate_weight", "one entry per gate required"));
            }
        }
        Ok(())
    }

    pub fn load_track(&self) -> Result<Track, ConfigError> {
        if self.track == BUNDLED_TRACK_NAME {
            return Track::bundled();
        }
        Track::load(Path::new(&self.track))
    }
}

/// Read, parse and validate a campaign configuration file (including its track).
pub fn parse_config(path: &Path) -> Result<(CampaignConfig, Track), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p });
    let base = base.map(|b| b.canonicalize().unwrap_or_else(|_| b.to_path_buf()));
    let cfg = CampaignConfig::from_toml_str(&text, path, base.as_deref())?;
    let track = cfg.load_track()?;
    cfg.validate(track.gates.len())?;
    Ok((cfg, track))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseSpec {
    position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ypr_deg: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_extent: Option<f64>,
}

impl PoseSpec {
    fn rotation(&self, what: &str) -> Result<Matrix3<f64>, ConfigError> {
        match (self.ypr_deg, self.quaternion) {
            (Some([y, p, r]), None) => Ok(rotation_from_ypr(y.to_radians(), p.to_radians(), r.to_radians())),
            (None, Some(q)) => {
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 1e-9) {
                    return Err(ConfigError::Track(format!("{what}: quaternion has zero norm")));
                }
                Ok(rotation_from_quaternion(q))
            }
            (None, None) => Err(ConfigError::Track(format!("{what}: one of ypr_deg or quaternion is required"))),
            (Some(_), Some(_)) => Err(ConfigError::Track(format!("{what}: give ypr_deg or quaternion, not both"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    #[serde(default)]
    name: String,
    start: PoseSpec,
    gates: Vec<PoseSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub name: String,
    pub start: Pose,
    pub gates: Vec<Gate>,
}

impl Track {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: TrackFile = toml::from_str(text).map_err(|e| ConfigError::Track(e.to_string()))?;
        if file.start.half_extent.is_some() {
            return Err(ConfigError::Track("start: half_extent applies to gates only".into()));
        }
        let start = Pose { position: Vector3::from(file.start.position), rotation: file.start.rotation("start")? };
        let gates = file
            .gates
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let gate = Gate::new(
                    Vector3::from(g.position),
                    g.rotation(&format!("gate {}", i + 1))?,
                    g.half_extent.unwrap_or(Gate::DEFAULT_HALF_EXTENT),
                );
                gate.validate()?;
                Ok(gate)
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        if gates.is_empty() {
            return Err(ConfigError::Track("at least one gate is required".into()));
        }
        Ok(Self { name: file.name, start, gates })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn bundled() -> Result<Self, ConfigError> {
        Self::from_toml_str(BUNDLED_TRACK)
    }
}
