//! Scenario files: the full declarative description of a run (world zones,
//! agent trajectories, link conditions, algorithm parameters, seeds), plus
//! the shipped presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::LinkConfig;
use crate::worldsim::{ObserveConfig, Zone};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Each agent runs standalone; no links, no server.
    Individual,
    /// Agents talk to the central server over simulated links.
    Collaborative,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Individual => write!(f, "individual"),
            RunMode::Collaborative => write!(f, "collaborative"),
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "individual" => Ok(RunMode::Individual),
            "collaborative" => Ok(RunMode::Collaborative),
            other => Err(ScenarioError::Invalid(format!(
                "mode must be individual or collaborative, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { fx: 320.0, fy: 320.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> crate::geometry::CameraIntrinsics {
        crate::geometry::CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

/// One agent's trajectory request inside the world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub zone: usize,
    /// Path length target in meters.
    pub length: f64,
    /// Average speed in m/s.
    pub speed: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub closes_loop: bool,
    /// Simulation time of this agent's first frame.
    #[serde(default)]
    pub start_offset: f64,
}

fn default_frame_rate() -> f64 {
    10.0
}

/// Algorithm knobs surfaced in scenario files; everything not listed keeps
/// the library default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgoSpec {
    /// Local map capacity in keyframes.
    pub n_cap: usize,
    pub theta_covis: u32,
    pub vocab_branching: u32,
    pub vocab_levels: u32,
    pub min_bow_score: f64,
    pub min_corr: usize,
    pub accept_inliers: usize,
    pub ransac_iterations: usize,
    pub inlier_tau: f64,
    pub covis_strong: u32,
    pub neighborhood_n: usize,
    /// LM iteration budgets: (motion-only, local BA, essential graph, GBA).
    pub motion_iterations: usize,
    pub local_ba_iterations: usize,
    pub essential_iterations: usize,
    pub gba_iterations: usize,
}

impl Default for AlgoSpec {
    fn default() -> Self {
        Self {
            n_cap: 50,
            theta_covis: 15,
            vocab_branching: 10,
            vocab_levels: 3,
            min_bow_score: 0.3,
            min_corr: 10,
            accept_inliers: 20,
            ransac_iterations: 200,
            inlier_tau: 0.3,
            covis_strong: 100,
            neighborhood_n: 10,
            motion_iterations: 10,
            local_ba_iterations: 5,
            essential_iterations: 20,
            gba_iterations: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub mode: RunMode,
    #[serde(default = "default_repeat")]
    pub repeat: u32,
    pub zones: Vec<Zone>,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub observe: ObserveConfig,
    pub agents: Vec<AgentSpec>,
    /// Shared link shape for all agents; per-link seeds are derived from the
    /// run seed.
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub algo: AlgoSpec,
}

fn default_repeat() -> u32 {
    1
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(ScenarioError::Invalid("agents: at least one agent required".into()));
        }
        if self.zones.is_empty() {
            return Err(ScenarioError::Invalid("zones: at least one zone required".into()));
        }
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.zone >= self.zones.len() {
                return Err(ScenarioError::Invalid(format!(
                    "agents[{i}].zone: zone {} does not exist ({} zones defined)",
                    agent.zone,
                    self.zones.len()
                )));
            }
            if agent.length <= 0.0 || agent.speed <= 0.0 || agent.frame_rate <= 0.0 {
                return Err(ScenarioError::Invalid(format!(
                    "agents[{i}]: length, speed and frame_rate must be positive"
                )));
            }
            if agent.start_offset < 0.0 {
                return Err(ScenarioError::Invalid(format!(
                    "agents[{i}].start_offset: must be non-negative"
                )));
            }
        }
        if self.repeat == 0 {
            return Err(ScenarioError::Invalid("repeat: must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.link.drop_probability) {
            return Err(ScenarioError::Invalid(
                "link.drop_probability: must be in [0, 1)".into(),
            ));
        }
        if self.link.bandwidth <= 0.0 {
            return Err(ScenarioError::Invalid("link.bandwidth: must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Loads a scenario from a file path, or falls back to a preset name.
    pub fn load(spec: &str) -> Result<Scenario, ScenarioError> {
        let path = Path::new(spec);
        if path.exists() {
            return Self::from_toml(&std::fs::read_to_string(path)?);
        }
        preset(spec).ok_or_else(|| {
            ScenarioError::Invalid(format!(
                "{spec}: no such file and no such preset (presets: {})",
                PRESET_NAMES.join(", ")
            ))
        })
    }
}

pub const PRESET_NAMES: [&str; 3] = ["single-zone", "overlap-pair", "four-zone"];

/// Built-in scenario presets mirroring the reference experiments at desk
/// scale: one looping agent, a two-agent overlap pair, and a four-agent grid
/// with one agent that never closes a loop on its own.
pub fn preset(name: &str) -> Option<Scenario> {
    match name {
        "single-zone" => Some(single_zone()),
        "overlap-pair" => Some(overlap_pair()),
        "four-zone" => Some(four_zone()),
        _ => None,
    }
}

fn base_observe() -> ObserveConfig {
    ObserveConfig {
        pixel_sigma: 1.0,
        max_features: 120,
        mismatch_rate: 0.0,
        descriptor_flip_rate: 0.02,
        depth_min: 0.5,
        depth_max: 40.0,
    }
}

fn single_zone() -> Scenario {
    Scenario {
        name: "single-zone".into(),
        seed: 1,
        mode: RunMode::Individual,
        repeat: 1,
        zones: vec![Zone { x: (0.0, 40.0), y: (0.0, 40.0), z: (0.0, 10.0), density: 0.15 }],
        camera: CameraSpec::default(),
        observe: base_observe(),
        agents: vec![AgentSpec {
            zone: 0,
            length: 150.0,
            speed: 2.0,
            frame_rate: 10.0,
            closes_loop: true,
            start_offset: 0.0,
        }],
        link: LinkConfig::default(),
        algo: AlgoSpec::default(),
    }
}

fn overlap_pair() -> Scenario {
    Scenario {
        name: "overlap-pair".into(),
        seed: 1,
        mode: RunMode::Collaborative,
        repeat: 1,
        zones: vec![Zone { x: (0.0, 50.0), y: (0.0, 50.0), z: (0.0, 10.0), density: 0.12 }],
        camera: CameraSpec::default(),
        observe: base_observe(),
        agents: vec![
            AgentSpec {
                zone: 0,
                length: 400.0,
                speed: 2.0,
                frame_rate: 10.0,
                closes_loop: true,
                start_offset: 0.0,
            },
            AgentSpec {
                zone: 0,
                length: 300.0,
                speed: 2.0,
                frame_rate: 10.0,
                closes_loop: true,
                start_offset: 10.0,
            },
        ],
        link: LinkConfig::default(),
        algo: AlgoSpec::default(),
    }
}

fn four_zone() -> Scenario {
    let zone = |x0: f64, y0: f64| Zone {
        x: (x0, x0 + 40.0),
        y: (y0, y0 + 40.0),
        z: (0.0, 10.0),
        density: 0.12,
    };
    let agent = |zone: usize, closes_loop: bool, start_offset: f64| AgentSpec {
        zone,
        length: 220.0,
        speed: 2.0,
        frame_rate: 10.0,
        closes_loop,
        start_offset,
    };
    Scenario {
        name: "four-zone".into(),
        seed: 1,
        mode: RunMode::Collaborative,
        repeat: 1,
        // 2x2 grid with 12 m of overlap between neighboring zones.
        zones: vec![zone(0.0, 0.0), zone(28.0, 0.0), zone(0.0, 28.0), zone(28.0, 28.0)],
        camera: CameraSpec::default(),
        observe: base_observe(),
        agents: vec![
            agent(0, true, 0.0),
            agent(1, true, 10.0),
            agent(2, true, 20.0),
            // The no-self-loop agent: it only benefits from collaboration.
            agent(3, false, 30.0),
        ],
        link: LinkConfig::default(),
        algo: AlgoSpec::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_roundtrip() {
        for name in PRESET_NAMES {
            let scenario = preset(name).unwrap();
            scenario.validate().unwrap();
            let text = scenario.to_toml();
            let back = Scenario::from_toml(&text).unwrap();
            assert_eq!(back.name, scenario.name);
            assert_eq!(back.agents.len(), scenario.agents.len());
            assert_eq!(back.mode, scenario.mode);
        }
    }

    #[test]
    fn invalid_scenarios_are_diagnosed() {
        let mut s = preset("single-zone").unwrap();
        s.agents[0].zone = 9;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid(msg)) if msg.contains("zone 9")));

        let mut s = preset("single-zone").unwrap();
        s.agents.clear();
        assert!(s.validate().is_err());

        let mut s = preset("single-zone").unwrap();
        s.link.drop_probability = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(Scenario::load("no-such-preset").is_err());
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let text = r#"
            name = "mini"
            seed = 3
            mode = "individual"
            zones = [{ x = [0.0, 10.0], y = [0.0, 10.0], z = [0.0, 4.0], density = 0.2 }]
            agents = [{ zone = 0, length = 30.0, speed = 1.0 }]
        "#;
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s.repeat, 1);
        assert_eq!(s.agents[0].frame_rate, 10.0);
        assert_eq!(s.algo.n_cap, 50);
        assert!(!s.agents[0].closes_loop);
    }
}
