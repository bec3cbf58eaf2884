//! Whole-body velocity controller.
//!
//! One call to [`control_step`] turns the current joint state, obstacle set
//! and nominal field into a joint velocity command:
//!
//! ```text
//! q̇ = J⁺ẋ + δ_h (J_{d₀}N)⁺ (v₀ − J_{d₀}J⁺ẋ_e)
//! ```
//!
//! where `ẋ_e` is the modulated end-effector velocity plus the safety term,
//! `ẋ` adds pose feedback against an accumulated desired pose, `N` is the
//! null-space projector of `J`, and `J_{d₀}` is the Jacobian of the critical
//! point projected on its escape direction.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{RowSVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::VectorField;
use crate::kinematics::{
    row_pseudo_inverse, ArmModel, DampingPolicy, JointState, JointVector, TaskInverse, TaskPose, TaskVector, JOINTS,
};
use crate::modulation::{modulate, ModulationError, ModulationResult};
use crate::obstacle::{Obstacle, Surface};
use crate::proximity::{critical_point, ee_clearance, CriticalPoint, EeClearance, ProximityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Proximity(#[from] ProximityError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error("joint velocity command is not finite")]
    NonFinite,
}

/// Which avoidance layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Raw field plus pose feedback.
    NoAvoidance,
    /// Modulated end-effector motion and safety velocity, no null-space term.
    EndEffectorOnly,
    /// Everything.
    #[serde(rename = "FullRWOA")]
    FullRwoa,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoAvoidance, Mode::EndEffectorOnly, Mode::FullRwoa];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoAvoidance => "NoAvoidance",
            Mode::EndEffectorOnly => "EndEffectorOnly",
            Mode::FullRwoa => "FullRWOA",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "noavoidance" | "none" => Ok(Mode::NoAvoidance),
            "endeffectoronly" | "eeonly" | "ee" => Ok(Mode::EndEffectorOnly),
            "fullrwoa" | "full" => Ok(Mode::FullRwoa),
            _ => Err(format!("unknown mode `{s}` (expected NoAvoidance, EndEffectorOnly or FullRWOA)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Critical distance below which the escape speed grows, m.
    pub d_m: f64,
    /// Influence distance at which the null-space term fades in, m.
    pub d_i: f64,
    /// Nominal escape speed of the critical point, m/s.
    pub v_n: f64,
    /// End-effector safety distance to the margin surface, m.
    pub d_s: f64,
    /// End-effector influence distance, m.
    pub d_k: f64,
    /// Nominal safety velocity, m/s.
    pub v_b: f64,
    /// Diagonal of the pose feedback gain, 1/s.
    pub k_a: [f64; 6],
    pub dt: f64,
    /// Desired end-effector angular velocity, rad/s.
    pub orientation_rates: [f64; 3],
    /// Per-joint speed limits; the arm model's limits when absent.
    pub velocity_limits: Option<[f64; JOINTS]>,
    /// Cap on the escape gain at contact.
    pub delta_v_max: f64,
    /// Smallest singular value of the end-effector Jacobian below which
    /// damped least squares takes over.
    pub damping_threshold: f64,
    pub max_damping: f64,
    /// Same for the 1×7 critical-point row `J_d0·N`, m/rad.
    pub row_damping_threshold: f64,
    pub row_max_damping: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            d_m: 0.10,
            d_i: 0.25,
            v_n: 0.3,
            d_s: 0.02,
            d_k: 0.12,
            v_b: 0.2,
            k_a: [4.0, 4.0, 4.0, 2.0, 2.0, 2.0],
            dt: 0.01,
            orientation_rates: [0.0; 3],
            velocity_limits: None,
            delta_v_max: 100.0,
            damping_threshold: 1e-4,
            max_damping: 0.05,
            row_damping_threshold: 0.05,
            row_max_damping: 0.05,
        }
    }
}

impl ControllerConfig {
    /// Every violated invariant, as `(field path, message)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |field: &str, msg: String| out.push((format!("controller.{field}"), msg));
        let positive = [
            ("d_m", self.d_m),
            ("d_i", self.d_i),
            ("d_s", self.d_s),
            ("d_k", self.d_k),
            ("dt", self.dt),
            ("delta_v_max", self.delta_v_max),
            ("damping_threshold", self.damping_threshold),
            ("row_damping_threshold", self.row_damping_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                push(name, format!("must be a positive finite number, got {v}"));
            }
        }
        for (name, v) in [
            ("v_n", self.v_n),
            ("v_b", self.v_b),
            ("max_damping", self.max_damping),
            ("row_max_damping", self.row_max_damping),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                push(name, format!("must be a non-negative finite number, got {v}"));
            }
        }
        if !(self.d_m < self.d_i) {
            push("d_i", format!("critical distance d_m ({}) must be below influence distance d_i ({})", self.d_m, self.d_i));
        }
        if !(self.d_s < self.d_k) {
            push("d_k", format!("safety distance d_s ({}) must be below influence distance d_k ({})", self.d_s, self.d_k));
        }
        for (i, k) in self.k_a.iter().enumerate() {
            if !(k.is_finite() && *k >= 0.0) {
                push(&format!("k_a[{i}]"), format!("gain must be finite and non-negative, got {k}"));
            }
        }
        if self.orientation_rates.iter().any(|w| !w.is_finite()) {
            push("orientation_rates", "must be finite".into());
        }
        if let Some(limits) = &self.velocity_limits {
            for (i, v) in limits.iter().enumerate() {
                if !(v.is_finite() && *v > 0.0) {
                    push(&format!("velocity_limits[{i}]"), format!("must be positive, got {v}"));
                }
            }
        }
        out
    }

    pub fn damping(&self) -> DampingPolicy {
        DampingPolicy {
            threshold: self.damping_threshold,
            max_damping: self.max_damping,
        }
    }

    pub fn row_damping(&self) -> DampingPolicy {
        DampingPolicy {
            threshold: self.row_damping_threshold,
            max_damping: self.row_max_damping,
        }
    }

    pub fn joint_velocity_limits(&self, model: &ArmModel) -> JointVector {
        match &self.velocity_limits {
            Some(l) => JointVector::from_row_slice(l),
            None => model.velocity_limits(),
        }
    }
}

/// Raised-cosine fade: 1 at or below `near`, 0 at or beyond `far`.
fn cosine_blend(dist: f64, near: f64, far: f64) -> f64 {
    if dist <= near {
        1.0
    } else if dist >= far {
        0.0
    } else {
        0.5 * (1.0 + (PI * (dist - near) / (far - near)).cos())
    }
}

/// Escape gain `(d_m/dist)² − 1` inside the critical distance, capped.
pub fn delta_v(dist: f64, cfg: &ControllerConfig) -> f64 {
    if dist >= cfg.d_m {
        return 0.0;
    }
    if dist <= 0.0 {
        return cfg.delta_v_max;
    }
    ((cfg.d_m / dist).powi(2) - 1.0).min(cfg.delta_v_max)
}

/// Null-space activation factor.
pub fn delta_h(dist: f64, cfg: &ControllerConfig) -> f64 {
    cosine_blend(dist, cfg.d_m, cfg.d_i)
}

/// End-effector safety factor.
pub fn sigma_v(dist: f64, cfg: &ControllerConfig) -> f64 {
    cosine_blend(dist, cfg.d_s, cfg.d_k)
}

/// Safety velocity pushing the end-effector away along `d_e`. `fallback` is
/// used as the direction when `d_e` vanishes.
pub fn safety_velocity(d_e: &Vector3<f64>, fallback: &Vector3<f64>, cfg: &ControllerConfig) -> Vector3<f64> {
    let dist = d_e.norm();
    let factor = sigma_v(dist, cfg);
    if factor == 0.0 {
        return Vector3::zeros();
    }
    let dir = if dist > 0.0 { d_e / dist } else { *fallback };
    dir * (factor * cfg.v_b)
}

/// Everything computed during one control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub delta_v: f64,
    pub delta_h: f64,
    pub sigma_v: f64,
    pub v0: f64,
    /// Nominal field velocity at the end-effector.
    pub field_velocity: Vector3<f64>,
    /// Modulated linear velocity (equal to the field velocity without modulation).
    pub modulated_velocity: Vector3<f64>,
    pub xdot_b: Vector3<f64>,
    pub xdot_d: TaskVector,
    pub xdot_e: TaskVector,
    pub xdot: TaskVector,
    pub tracking_error: TaskVector,
    /// Command before saturation.
    pub qdot_unsaturated: JointVector,
    /// Uniform factor applied by saturation, 1 when no joint hit its limit.
    pub saturation_scale: f64,
    pub saturated: [bool; JOINTS],
    pub task_sigma_min: f64,
    /// The end-effector Jacobian was inverted with damping.
    pub task_damped: bool,
    /// The reduced row `J_{d₀}N` was inverted with damping.
    pub row_damped: bool,
    pub modulation: Option<ModulationResult>,
    pub critical: Option<CriticalPoint>,
    pub end_effector: Option<EeClearance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub qdot: JointVector,
    pub diagnostics: Diagnostics,
}

/// One control cycle. Returns the command and the advanced desired pose.
pub fn control_step(
    model: &ArmModel,
    state: &JointState,
    obstacles: &[Obstacle],
    field: &VectorField,
    desired: &TaskPose,
    cfg: &ControllerConfig,
    mode: Mode,
) -> Result<(ControlOutput, TaskPose), ControlError> {
    let chain = model.forward_kinematics(&state.positions);
    let actual = chain.ee_pose();
    let xi = actual.position;

    // 1. end-effector motion
    let field_velocity = field.evaluate(&xi);
    let (modulated_velocity, modulation) = match mode {
        Mode::NoAvoidance => (field_velocity, None),
        Mode::EndEffectorOnly | Mode::FullRwoa => {
            if obstacles.is_empty() {
                (field_velocity, None)
            } else {
                let (v, m) = modulate(obstacles, field, &xi)?;
                (v, Some(m))
            }
        }
    };
    let [wx, wy, wz] = cfg.orientation_rates;
    let xdot_d = TaskVector::new(modulated_velocity.x, modulated_velocity.y, modulated_velocity.z, wx, wy, wz);

    // 2. end-effector safety velocity
    let end_effector = match mode {
        Mode::NoAvoidance => None,
        _ => ee_clearance(&chain, obstacles, Surface::Inflated),
    };
    let (sigma, xdot_b) = match &end_effector {
        Some(c) => (sigma_v(c.distance, cfg), safety_velocity(&c.d_e, &c.direction, cfg)),
        None => (0.0, Vector3::zeros()),
    };
    let mut xdot_e = xdot_d;
    for i in 0..3 {
        xdot_e[i] += xdot_b[i];
    }

    // 3. pose feedback against the accumulated desired pose
    let next_desired = desired.advanced(&xdot_e, cfg.dt);
    let tracking_error = actual.error_to(&next_desired);
    let xdot = xdot_e + TaskVector::from_row_slice(&cfg.k_a).component_mul(&tracking_error);

    let j = chain.ee_jacobian();
    let task = TaskInverse::new(&j, &cfg.damping());
    let mut qdot = task.pinv * xdot;

    // 4–5. null-space escape of the critical point
    let critical = match mode {
        Mode::FullRwoa => critical_point(model, &chain, obstacles, Surface::Inflated)?,
        _ => None,
    };
    let mut dv = 0.0;
    let mut dh = 0.0;
    let mut v0 = 0.0;
    let mut row_damped = false;
    if let Some(cp) = &critical {
        dv = delta_v(cp.distance, cfg);
        dh = delta_h(cp.distance, cfg);
        v0 = dv * cfg.v_n;
        if dh > 0.0 {
            let n0 = cp.direction;
            let j0 = chain.point_jacobian(cp.link, &cp.point);
            let j_d0: RowSVector<f64, JOINTS> = n0.transpose() * j0;
            let row = j_d0 * task.null;
            let (row_pinv, damped) = row_pseudo_inverse(&row, &cfg.row_damping());
            row_damped = damped;
            let feedforward = (j_d0 * (task.pinv * xdot_e))[0];
            qdot += row_pinv * (dh * (v0 - feedforward));
        }
    }
    if !qdot.iter().all(|v| v.is_finite()) {
        return Err(ControlError::NonFinite);
    }

    // 6. uniform saturation
    let qdot_unsaturated = qdot;
    let limits = cfg.joint_velocity_limits(model);
    let mut saturated = [false; JOINTS];
    let mut scale: f64 = 1.0;
    for i in 0..JOINTS {
        let excess = qdot[i].abs() / limits[i];
        if excess > 1.0 {
            saturated[i] = true;
            scale = scale.min(1.0 / excess);
        }
    }
    if scale < 1.0 {
        qdot *= scale;
    }

    let diagnostics = Diagnostics {
        delta_v: dv,
        delta_h: dh,
        sigma_v: sigma,
        v0,
        field_velocity,
        modulated_velocity,
        xdot_b,
        xdot_d,
        xdot_e,
        xdot,
        tracking_error,
        qdot_unsaturated,
        saturation_scale: scale,
        saturated,
        task_sigma_min: task.sigma_min,
        task_damped: task.is_damped(),
        row_damped,
        modulation,
        critical,
        end_effector,
    };
    if task.is_damped() {
        log::debug!("end-effector Jacobian damped (σ_min = {:.3e})", task.sigma_min);
    }
    Ok((ControlOutput { qdot, diagnostics }, next_desired))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> ControllerConfig {
        ControllerConfig::default()
    }

    fn bent() -> JointVector {
        JointVector::from_row_slice(&[0.2, 0.7, -0.3, 1.4, 0.2, 0.6, 0.1])
    }

    #[test]
    fn delta_v_values() {
        let c = cfg();
        assert_eq!(delta_v(c.d_m, &c), 0.0);
        assert!((delta_v(c.d_m / 2f64.sqrt(), &c) - 1.0).abs() < 1e-12);
        assert_eq!(delta_v(2.0 * c.d_m, &c), 0.0);
        assert_eq!(delta_v(0.0, &c), 100.0);
        assert_eq!(delta_v(1e-9, &c), 100.0);
    }

    #[test]
    fn blend_values() {
        let c = cfg();
        assert!((delta_h((c.d_m + c.d_i) / 2.0, &c) - 0.5).abs() < 1e-12);
        assert_eq!(delta_h(c.d_m, &c), 1.0);
        assert_eq!(delta_h(c.d_i, &c), 0.0);
        assert_eq!(delta_h(0.0, &c), 1.0);
    }

    #[test]
    fn safety_velocity_values() {
        let c = cfg();
        let x = Vector3::x();
        assert_eq!(safety_velocity(&(x * c.d_k), &x, &c), Vector3::zeros());
        assert!((safety_velocity(&(x * c.d_s), &x, &c) - x * c.v_b).norm() < 1e-15);
        let mid = Vector3::new(0.0, 3.0, 4.0).normalize() * ((c.d_s + c.d_k) / 2.0);
        let v = safety_velocity(&mid, &x, &c);
        assert!((v - mid.normalize() * 0.5 * c.v_b).norm() < 1e-12);
        // contact uses the stored direction
        assert!((safety_velocity(&Vector3::zeros(), &Vector3::y(), &c) - Vector3::y() * c.v_b).norm() < 1e-15);
    }

    #[test]
    fn blends_are_continuous() {
        let c = cfg();
        // Each step may move a factor by at most its steepest slope over the
        // step; anything larger would be a discontinuity.
        let n = 10_000;
        let h = 0.4 / n as f64;
        let cap_edge = c.d_m / (1.0 + c.delta_v_max).sqrt();
        let blend_slope = |near: f64, far: f64| PI / (2.0 * (far - near));
        let mut prev_d = h;
        let mut prev = (delta_v(prev_d, &c) * delta_h(prev_d, &c), sigma_v(prev_d, &c));
        for k in 2..=n {
            let d = k as f64 * h;
            let cur = (delta_v(d, &c) * delta_h(d, &c), sigma_v(d, &c));
            let escape_slope = if prev_d >= c.d_m {
                0.0
            } else {
                2.0 * c.d_m * c.d_m / prev_d.max(cap_edge).powi(3)
            };
            assert!((cur.0 - prev.0).abs() <= escape_slope * h * 1.001 + 1e-12, "δ_v·δ_h jump at {d}");
            assert!((cur.1 - prev.1).abs() <= blend_slope(c.d_s, c.d_k) * h * 1.001 + 1e-12, "ς_v jump at {d}");
            prev = cur;
            prev_d = d;
        }
        // no step at the junctions themselves
        for edge in [c.d_m, c.d_i] {
            assert!((delta_h(edge - 1e-9, &c) - delta_h(edge + 1e-9, &c)).abs() < 1e-6);
            assert!((delta_v(edge - 1e-9, &c) * delta_h(edge - 1e-9, &c) - delta_v(edge + 1e-9, &c) * delta_h(edge + 1e-9, &c)).abs() < 1e-6);
        }
        for edge in [c.d_s, c.d_k] {
            assert!((sigma_v(edge - 1e-9, &c) - sigma_v(edge + 1e-9, &c)).abs() < 1e-6);
        }
    }

    #[test]
    fn config_violations() {
        assert!(cfg().violations().is_empty());
        let mut c = cfg();
        c.d_i = 0.05;
        let v = c.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].1.contains("d_m") && v[0].1.contains("d_i"));
        c = cfg();
        c.d_k = c.d_s;
        assert!(c.violations().iter().any(|(f, _)| f == "controller.d_k"));
        c = cfg();
        c.k_a[3] = -1.0;
        assert!(c.violations().iter().any(|(f, _)| f == "controller.k_a[3]"));
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::FullRwoa);
        assert_eq!("ee-only".parse::<Mode>().unwrap(), Mode::EndEffectorOnly);
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn quiescent_without_motion() {
        let model = ArmModel::default_srs7();
        let q = bent();
        let pose = model.ee_pose(&q);
        let field = VectorField::linear(pose.position, 1.0);
        let far = Obstacle::sphere(1, Vector3::new(5.0, 5.0, 5.0), 0.2);
        for mode in Mode::ALL {
            let (out, next) =
                control_step(&model, &JointState::at_rest(q), std::slice::from_ref(&far), &field, &pose, &cfg(), mode).unwrap();
            assert_eq!(out.qdot, JointVector::zeros(), "{mode}");
            assert_eq!(next, pose);
        }
    }

    #[test]
    fn no_obstacles_reduces_to_task_inverse() {
        let model = ArmModel::default_srs7();
        let q = bent();
        let pose = model.ee_pose(&q);
        let field = VectorField::linear(pose.position + Vector3::new(0.1, -0.05, 0.02), 2.0);
        let (out, _) = control_step(&model, &JointState::at_rest(q), &[], &field, &pose, &cfg(), Mode::FullRwoa).unwrap();
        let xdot_e = TaskVector::new(0.2, -0.1, 0.04, 0.0, 0.0, 0.0);
        // desired pose moves by ẋ_e·dt before the error is taken
        let xdot = xdot_e + TaskVector::from_row_slice(&cfg().k_a).component_mul(&(xdot_e * cfg().dt));
        let task = TaskInverse::new(&model.ee_jacobian(&q), &DampingPolicy::default());
        assert!((out.qdot - task.pinv * xdot).norm() < 1e-12);
        assert_eq!(out.diagnostics.delta_h, 0.0);
    }

    #[test]
    fn gain_sanity() {
        let model = ArmModel::default_srs7();
        let q = bent();
        let pose = model.ee_pose(&q);
        let field = VectorField::linear(pose.position, 1.0);
        let offset = Vector3::new(0.01, -0.02, 0.005);
        let desired = TaskPose {
            position: pose.position + offset,
            orientation: pose.orientation,
        };
        let mut c = cfg();
        c.k_a = [3.0; 6];
        let (out, _) = control_step(&model, &JointState::at_rest(q), &[], &field, &desired, &c, Mode::NoAvoidance).unwrap();
        let d = &out.diagnostics;
        for i in 0..3 {
            assert!((d.xdot[i] - (d.xdot_e[i] + 3.0 * offset[i])).abs() < 1e-12);
        }
        for i in 3..6 {
            assert!(d.xdot[i].abs() < 1e-12);
        }
    }

    /// Places a sphere next to the forearm at the given clearance.
    fn forearm_obstacle(model: &ArmModel, q: &JointVector, clearance: f64, seed_dir: Vector3<f64>) -> Obstacle {
        let chain = model.forward_kinematics(q);
        let (a, b) = chain.capsule_segment(&model.capsules[1]);
        let mid = (a + b) / 2.0;
        let axis = (b - a).normalize();
        let dir = (seed_dir - axis * axis.dot(&seed_dir)).normalize();
        let radius = 0.06;
        Obstacle::sphere(1, mid + dir * (radius + model.capsules[1].radius + clearance), radius)
    }

    #[test]
    fn avoidance_term_stays_in_null_space() {
        let model = ArmModel::default_srs7();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..50 {
            let q = bent() + JointVector::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let pose = model.ee_pose(&q);
            let field = VectorField::linear(pose.position + Vector3::new(0.05, 0.05, -0.05), 1.0);
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let obs = forearm_obstacle(&model, &q, rng.random_range(0.01..0.09), dir);
            let (out, _) = control_step(&model, &JointState::at_rest(q), &[obs], &field, &pose, &cfg(), Mode::FullRwoa).unwrap();
            let d = &out.diagnostics;
            if d.task_damped || d.critical.is_none_or(|c| c.link == 6) {
                continue;
            }
            assert!(d.delta_h == 1.0);
            let j = model.ee_jacobian(&q);
            let residual = (j * d.qdot_unsaturated - d.xdot).norm();
            assert!(residual <= 1e-6 * d.xdot.norm() + 1e-8, "residual {residual}");
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn reduced_task_velocity_is_blended() {
        let model = ArmModel::default_srs7();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let c = cfg();
        let mut checked = 0;
        for _ in 0..50 {
            let q = bent() + JointVector::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let pose = model.ee_pose(&q);
            let field = VectorField::linear(pose.position + Vector3::new(-0.05, 0.08, 0.0), 1.0);
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            // clearances spanning the blend region
            let obs = forearm_obstacle(&model, &q, rng.random_range(0.05..0.2), dir);
            // zero feedback so that ẋ = ẋ_e
            let mut cz = c.clone();
            cz.k_a = [0.0; 6];
            // the identity is exact only for an undamped row
            cz.row_damping_threshold = 1e-6;
            let (out, _) = control_step(&model, &JointState::at_rest(q), &[obs], &field, &pose, &cz, Mode::FullRwoa).unwrap();
            let d = &out.diagnostics;
            let Some(cp) = d.critical else { continue };
            if d.row_damped || d.task_damped || d.delta_h == 0.0 {
                continue;
            }
            let chain = model.forward_kinematics(&q);
            let j_d0 = cp.direction.transpose() * chain.point_jacobian(cp.link, &cp.point);
            let task = TaskInverse::new(&model.ee_jacobian(&q), &DampingPolicy::default());
            let lhs = (j_d0 * d.qdot_unsaturated)[0];
            let nominal = (j_d0 * (task.pinv * d.xdot))[0];
            let rhs = d.delta_h * d.v0 + (1.0 - d.delta_h) * nominal;
            assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
            checked += 1;
        }
        assert!(checked > 20, "{checked}");
    }

    #[test]
    fn end_effector_only_never_uses_null_space() {
        let model = ArmModel::default_srs7();
        let q = bent();
        let pose = model.ee_pose(&q);
        let field = VectorField::linear(pose.position, 1.0);
        let obs = forearm_obstacle(&model, &q, 0.02, Vector3::y());
        let (out, _) =
            control_step(&model, &JointState::at_rest(q), std::slice::from_ref(&obs), &field, &pose, &cfg(), Mode::EndEffectorOnly).unwrap();
        assert_eq!(out.diagnostics.delta_h, 0.0);
        assert!(out.diagnostics.critical.is_none());
        let (full, _) = control_step(&model, &JointState::at_rest(q), &[obs], &field, &pose, &cfg(), Mode::FullRwoa).unwrap();
        assert!(full.qdot.norm() > 0.0);
    }

    #[test]
    fn saturation_preserves_direction() {
        let model = ArmModel::default_srs7();
        let q = bent();
        let pose = model.ee_pose(&q);
        let field = VectorField::linear(pose.position + Vector3::new(3.0, 0.0, 0.0), 50.0);
        let (out, _) = control_step(&model, &JointState::at_rest(q), &[], &field, &pose, &cfg(), Mode::NoAvoidance).unwrap();
        let d = &out.diagnostics;
        assert!(d.saturation_scale < 1.0);
        assert!(d.saturated.iter().any(|s| *s));
        let limits = model.velocity_limits();
        for i in 0..JOINTS {
            assert!(out.qdot[i].abs() <= limits[i] * (1.0 + 1e-12));
        }
        assert!((out.qdot - d.qdot_unsaturated * d.saturation_scale).norm() < 1e-12);
    }
}
