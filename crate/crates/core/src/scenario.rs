//! Scenario files: arm, start configuration, nominal field, scripted obstacles
//! and controller settings for one closed-loop run.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, Mode};
use crate::field::VectorField;
use crate::kinematics::{unit_quaternion, ArmModel, JointVector, KinematicsError, JOINTS};
use crate::obstacle::{Obstacle, Surface};

pub const FORMAT_VERSION: u32 = 1;

/// Name that selects the bundled arm instead of a model file.
pub const BUNDLED_ARM: &str = "srs7";

const TWO_OBSTACLE_SCENARIO: &str = include_str!("../data/two_obstacle.toml");

/// One problem found while loading or checking a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Dotted path of the offending field, e.g. `obstacles[1].eta`.
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("arm model: {0}")]
    Model(#[from] KinematicsError),
    #[error("scenario is invalid ({} problem(s))", .0.len())]
    Invalid(Vec<Violation>),
}

/// A velocity change at time `start`, held until the next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocitySegment {
    pub start: f64,
    #[serde(default)]
    pub linear_velocity: [f64; 3],
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

/// An obstacle at `t = 0` plus its scripted motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedObstacle {
    pub initial: Obstacle,
    /// Ordered by `start`; before the first segment the initial velocities hold.
    pub schedule: Vec<VelocitySegment>,
}

impl ScriptedObstacle {
    pub fn stationary(obstacle: Obstacle) -> Self {
        Self {
            initial: obstacle,
            schedule: Vec::new(),
        }
    }

    /// Velocities in effect at time `t`.
    pub fn velocity_at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        match self.schedule.iter().rev().find(|s| s.start <= t) {
            Some(s) => (Vector3::from(s.linear_velocity), Vector3::from(s.angular_velocity)),
            None => (self.initial.linear_velocity, self.initial.angular_velocity),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// `srs7` or the model path as written in the file.
    pub arm: String,
    pub model: ArmModel,
    pub initial_q: JointVector,
    pub field: VectorField,
    pub obstacles: Vec<ScriptedObstacle>,
    pub controller: ControllerConfig,
    pub duration: f64,
    pub mode: Mode,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleRecord {
    id: u32,
    center: [f64; 3],
    axes: [f64; 3],
    #[serde(default = "unit_powers")]
    powers: [u32; 3],
    #[serde(default = "identity_wxyz")]
    orientation: [f64; 4],
    #[serde(default = "one")]
    eta: f64,
    #[serde(default = "one")]
    sigma: f64,
    #[serde(default = "one")]
    rho: f64,
    #[serde(default)]
    linear_velocity: [f64; 3],
    #[serde(default)]
    angular_velocity: [f64; 3],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    schedule: Vec<VelocitySegment>,
}

fn unit_powers() -> [u32; 3] {
    [1, 1, 1]
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn one() -> f64 {
    1.0
}

fn bundled_arm() -> String {
    BUNDLED_ARM.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format_version: u32,
    #[serde(default)]
    name: String,
    #[serde(default = "bundled_arm")]
    arm: String,
    initial_q: Vec<f64>,
    duration: f64,
    mode: Mode,
    #[serde(default)]
    seed: u64,
    field: VectorField,
    #[serde(default)]
    controller: ControllerConfig,
    #[serde(default)]
    obstacles: Vec<ObstacleRecord>,
}

impl Scenario {
    /// Parses and validates a scenario. Relative model paths resolve against
    /// `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        let mut problems = Vec::new();
        if file.format_version != FORMAT_VERSION {
            problems.push(Violation::new(
                "format_version",
                format!("unsupported format version {} (expected {FORMAT_VERSION})", file.format_version),
            ));
        }
        let model = if file.arm == BUNDLED_ARM {
            ArmModel::default_srs7()
        } else {
            let path = match base_dir {
                Some(dir) => dir.join(&file.arm),
                None => PathBuf::from(&file.arm),
            };
            ArmModel::load(&path)?
        };
        let initial_q = if file.initial_q.len() == JOINTS {
            JointVector::from_row_slice(&file.initial_q)
        } else {
            problems.push(Violation::new(
                "initial_q",
                format!("expected {JOINTS} joint angles, found {}", file.initial_q.len()),
            ));
            JointVector::zeros()
        };
        let mut obstacles = Vec::with_capacity(file.obstacles.len());
        for (i, rec) in file.obstacles.iter().enumerate() {
            let orientation = match unit_quaternion(rec.orientation) {
                Ok(q) => q,
                Err(e) => {
                    problems.push(Violation::new(format!("obstacles[{i}].orientation"), e));
                    continue;
                }
            };
            obstacles.push(ScriptedObstacle {
                initial: Obstacle {
                    id: rec.id,
                    center: Vector3::from(rec.center),
                    axes: Vector3::from(rec.axes),
                    powers: rec.powers,
                    orientation,
                    eta: rec.eta,
                    sigma: rec.sigma,
                    rho: rec.rho,
                    linear_velocity: Vector3::from(rec.linear_velocity),
                    angular_velocity: Vector3::from(rec.angular_velocity),
                },
                schedule: rec.schedule.clone(),
            });
        }
        let scenario = Scenario {
            name: file.name,
            arm: file.arm,
            model,
            initial_q,
            field: file.field,
            obstacles,
            controller: file.controller,
            duration: file.duration,
            mode: file.mode,
            seed: file.seed,
        };
        problems.extend(scenario.violations());
        if problems.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, path.parent())
    }

    /// Serializes back to the file format. Obstacle ids, schedules and the
    /// arm reference are kept as given.
    pub fn to_toml(&self) -> String {
        let file = ScenarioFile {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            arm: self.arm.clone(),
            initial_q: self.initial_q.iter().copied().collect(),
            duration: self.duration,
            mode: self.mode,
            seed: self.seed,
            field: self.field.clone(),
            controller: self.controller.clone(),
            obstacles: self
                .obstacles
                .iter()
                .map(|s| {
                    let o = &s.initial;
                    let q = o.orientation.quaternion();
                    ObstacleRecord {
                        id: o.id,
                        center: o.center.into(),
                        axes: o.axes.into(),
                        powers: o.powers,
                        orientation: [q.w, q.i, q.j, q.k],
                        eta: o.eta,
                        sigma: o.sigma,
                        rho: o.rho,
                        linear_velocity: o.linear_velocity.into(),
                        angular_velocity: o.angular_velocity.into(),
                        schedule: s.schedule.clone(),
                    }
                })
                .collect(),
        };
        toml::to_string(&file).expect("scenario records always serialize")
    }

    /// Semantic checks on an assembled scenario.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(self.duration.is_finite() && self.duration > 0.0) {
            out.push(Violation::new("duration", format!("must be positive, got {}", self.duration)));
        }
        if !self.initial_q.iter().all(|v| v.is_finite()) {
            out.push(Violation::new("initial_q", "joint angles must be finite"));
        } else if !self.model.within_limits(&self.initial_q, 0.0) {
            out.push(Violation::new("initial_q", "initial configuration violates joint limits"));
        }
        if let Err(e) = self.field.validate() {
            out.push(Violation::new("field", e));
        }
        for (field, message) in self.controller.violations() {
            out.push(Violation::new(field, message));
        }
        let mut ids: Vec<u32> = Vec::new();
        for (i, s) in self.obstacles.iter().enumerate() {
            let o = &s.initial;
            if let Err(e) = o.validate() {
                out.push(Violation::new(format!("obstacles[{i}]"), e.to_string()));
            }
            if ids.contains(&o.id) {
                out.push(Violation::new(format!("obstacles[{i}].id"), format!("duplicate obstacle id {}", o.id)));
            }
            ids.push(o.id);
            let mut last = f64::NEG_INFINITY;
            for (k, seg) in s.schedule.iter().enumerate() {
                let finite = seg.linear_velocity.iter().chain(&seg.angular_velocity).all(|v| v.is_finite());
                if !(seg.start.is_finite() && seg.start >= 0.0 && seg.start >= last) || !finite {
                    out.push(Violation::new(
                        format!("obstacles[{i}].schedule[{k}]"),
                        "segments need finite velocities and non-decreasing start times >= 0",
                    ));
                }
                last = seg.start;
            }
        }
        if let Some(target) = self.field.attractor() {
            for (i, s) in self.obstacles.iter().enumerate() {
                let o = &s.initial;
                if o.validate().is_ok() && o.gamma(&target, Surface::Inflated) <= 1.0 {
                    out.push(Violation::new(
                        "field.target",
                        format!("target placement rule: target lies inside the safety margin of obstacle {} (obstacles[{i}])", o.id),
                    ));
                }
            }
            let reach = self.model.reach();
            let from_shoulder = (target - self.model.shoulder()).norm();
            if from_shoulder > reach {
                out.push(Violation::new(
                    "field.target",
                    format!("target is {from_shoulder:.3} m from the shoulder, beyond the arm's reach of {reach:.3} m"),
                ));
            }
        }
        out
    }

    /// Number of control cycles, including the initial one.
    pub fn cycles(&self) -> usize {
        (self.duration / self.controller.dt).round() as usize + 1
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Obstacles sorted by id, as they stand at `t = 0`.
    pub fn initial_obstacles(&self) -> Vec<Obstacle> {
        let mut obs: Vec<Obstacle> = self.obstacles.iter().map(|s| s.initial.clone()).collect();
        obs.sort_by_key(|o| o.id);
        obs
    }
}

/// The bundled two-obstacle crossing: obstacle 1 moves along x at 1 m/s into
/// the end-effector path, obstacle 2 at 2 m/s into the elbow region.
pub fn two_obstacle_scenario() -> Scenario {
    Scenario::from_toml(TWO_OBSTACLE_SCENARIO, None).expect("bundled scenario is valid")
}

/// Source text of the bundled two-obstacle scenario.
pub fn two_obstacle_scenario_text() -> &'static str {
    TWO_OBSTACLE_SCENARIO
}
