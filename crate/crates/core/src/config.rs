//! Run configuration: one JSON file drives every command. Omitted fields
//! take documented defaults; unknown keys are rejected; every module
//! invariant is re-checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::MpcConfig;
use crate::risk::{EgoNoise, RiskParams};
use crate::riskmap::GridSpec;
use crate::sim::{Behavior, HighwayScene, SimConfig};

/// Risk-map section: grid extents plus the counterfactual ego setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub spec: GridSpec,
    /// Velocity of the counterfactual ego (m/s).
    pub ego_vel: (f64, f64),
    pub ego_noise: EgoNoise,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            spec: GridSpec {
                x_min: 0.0,
                x_max: 120.0,
                y_min: -20.0,
                y_max: 20.0,
                nx: 480,
                ny: 160,
            },
            ego_vel: (15.0, 0.0),
            ego_noise: EgoNoise::default(),
        }
    }
}

/// Fully-resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Convenience override for `sim.rng_seed`.
    pub seed: Option<u64>,
    pub risk: RiskParams,
    pub mpc: MpcConfig,
    pub sim: SimConfig,
    pub grid: GridSection,
    pub scene: HighwayScene,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            risk: RiskParams::default(),
            mpc: crate::sim::canonical_mpc_config(),
            sim: SimConfig::default(),
            grid: GridSection::default(),
            scene: crate::sim::canonical_scene(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config value for \"{key}\": {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Apply cross-section resolution: the top-level seed overrides the sim
    /// seed and the MPC lane centers follow the scene unless customized.
    pub fn resolve(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.sim.rng_seed = seed;
        }
        if self.mpc.lane_centers == MpcConfig::default().lane_centers {
            self.mpc.lane_centers = self.scene.lane_centers();
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.risk;
        if r.gamma < 0.0 {
            return Err(invalid("risk.gamma", format!("must be >= 0, got {}", r.gamma)));
        }
        if !(r.alpha > 0.0 && r.alpha < 1.0) {
            return Err(invalid(
                "risk.alpha",
                format!("must lie strictly inside (0, 1), got {}", r.alpha),
            ));
        }
        if r.tau <= 0.0 {
            return Err(invalid("risk.tau", format!("must be > 0, got {}", r.tau)));
        }
        if r.d_safe <= 0.0 {
            return Err(invalid("risk.d_safe", format!("must be > 0, got {}", r.d_safe)));
        }
        if r.margin < 0.0 {
            return Err(invalid("risk.margin", format!("must be >= 0, got {}", r.margin)));
        }

        let m = &self.mpc;
        if m.horizon == 0 {
            return Err(invalid("mpc.horizon", "must be at least 1"));
        }
        if m.dt <= 0.0 {
            return Err(invalid("mpc.dt", format!("must be > 0, got {}", m.dt)));
        }
        if m.p_s < 0.0 {
            return Err(invalid("mpc.p_s", format!("must be >= 0, got {}", m.p_s)));
        }
        if m.risk_tol < 0.0 {
            return Err(invalid("mpc.risk_tol", format!("must be >= 0, got {}", m.risk_tol)));
        }
        if m.lane_centers.is_empty() {
            return Err(invalid("mpc.lane_centers", "must not be empty"));
        }
        for (key, (lo, hi)) in [
            ("mpc.state_bounds.y", m.state_bounds.y),
            ("mpc.state_bounds.v", m.state_bounds.v),
            ("mpc.state_bounds.phi", m.state_bounds.phi),
            ("mpc.input_bounds.accel", m.input_bounds.accel),
        ] {
            if lo >= hi {
                return Err(invalid(key, format!("min {lo} must be below max {hi}")));
            }
        }
        if m.input_bounds.steer_max <= 0.0 {
            return Err(invalid("mpc.input_bounds.steer_max", "must be > 0"));
        }
        if m.steer_rate_max <= 0.0 {
            return Err(invalid("mpc.steer_rate_max", "must be > 0"));
        }
        let w = &m.weights;
        if w.w_v < 0.0 || w.w_y < 0.0 || w.w_a < 0.0 || w.w_steer < 0.0 || w.w_dsteer < 0.0 {
            return Err(invalid("mpc.weights", "weights must be >= 0"));
        }
        if m.geometry.wheelbase <= 0.0 || m.geometry.body_length <= 0.0 || m.geometry.body_width <= 0.0
        {
            return Err(invalid("mpc.geometry", "dimensions must be > 0"));
        }

        let s = &self.sim;
        if s.dt <= 0.0 {
            return Err(invalid("sim.dt", format!("must be > 0, got {}", s.dt)));
        }
        if s.steps == 0 {
            return Err(invalid("sim.steps", "must be at least 1"));
        }
        if s.sensing_range <= 0.0 {
            return Err(invalid(
                "sim.sensing_range",
                format!("must be > 0, got {}", s.sensing_range),
            ));
        }
        for (key, v) in [
            ("sim.noise.neighbor_pos_var", s.noise.neighbor_pos_var),
            ("sim.noise.neighbor_vel_var", s.noise.neighbor_vel_var),
            ("sim.noise.ego_pos_var", s.noise.ego_pos_var),
            ("sim.noise.ego_vel_var", s.noise.ego_vel_var),
        ] {
            if v < 0.0 {
                return Err(invalid(key, format!("variance must be >= 0, got {v}")));
            }
        }

        self.grid
            .spec
            .validate()
            .map_err(|e| invalid("grid.spec", e.to_string()))?;

        self.scene
            .validate()
            .map_err(|e| invalid("scene", e.to_string()))?;
        for v in &self.scene.vehicles {
            if v.geometry.body_length <= 0.0 || v.geometry.body_width <= 0.0 || v.geometry.wheelbase <= 0.0
            {
                return Err(invalid("scene.vehicles.geometry", format!("vehicle {}", v.id)));
            }
            match &v.behavior {
                Behavior::Idm(p) => {
                    if p.v0 <= 0.0
                        || p.time_headway <= 0.0
                        || p.s0 <= 0.0
                        || p.a_max <= 0.0
                        || p.b <= 0.0
                        || p.exponent <= 0.0
                        || p.b_emergency <= 0.0
                    {
                        return Err(invalid(
                            "scene.vehicles.behavior.idm",
                            format!("vehicle {}: all IDM parameters must be > 0", v.id),
                        ));
                    }
                }
                Behavior::Replay(frames) => {
                    if frames.windows(2).any(|w| w[1].frame <= w[0].frame) {
                        return Err(invalid(
                            "scene.vehicles.behavior.replay",
                            format!("vehicle {}: frames must be strictly increasing", v.id),
                        ));
                    }
                }
                Behavior::MpcEgo => {}
            }
        }
        Ok(())
    }
}

/// Load, resolve and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    let resolved = raw.resolve();
    resolved.validate()?;
    Ok(resolved)
}

/// Serialize the fully-resolved configuration; written next to command
/// outputs so any run can be reproduced from its artifacts.
pub fn resolved_echo(cfg: &RunConfig) -> String {
    let mut text = serde_json::to_string_pretty(cfg).expect("config serializes");
    text.push('\n');
    text
}
