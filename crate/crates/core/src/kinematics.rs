//! Serial-chain kinematics for a 7-joint revolute arm.
//!
//! Task-space vectors stack linear over angular components:
//! `[vx, vy, vz, wx, wy, wz]`.

use std::path::Path;

use nalgebra::{
    DMatrix, Isometry3, Matrix6, Point3, Quaternion, RowSVector, SMatrix, SVector, Translation3, Unit, UnitQuaternion,
    Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINTS: usize = 7;
/// Index of the link carrying the end-effector.
pub const END_EFFECTOR_LINK: usize = JOINTS - 1;

pub type JointVector = SVector<f64, JOINTS>;
pub type TaskVector = SVector<f64, 6>;
pub type TaskJacobian = SMatrix<f64, 6, JOINTS>;
pub type PointJacobian = SMatrix<f64, 3, JOINTS>;
pub type TaskInverseMatrix = SMatrix<f64, JOINTS, 6>;
pub type JointMatrix = SMatrix<f64, JOINTS, JOINTS>;

/// Singular values below this make an undamped inverse unreliable.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("matrix is rank deficient (smallest singular value {sigma_min:e}); use a damped inverse")]
    RankDeficient { sigma_min: f64 },
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("failed to read arm model {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse arm model: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub origin: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub limits: (f64, f64),
    pub max_velocity: f64,
}

/// A swept sphere around a link-frame segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Capsule {
    pub link: usize,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub name: String,
    pub base: Isometry3<f64>,
    pub joints: Vec<Joint>,
    /// End-effector center in the frame of the last link.
    pub tool: Isometry3<f64>,
    pub capsules: Vec<Capsule>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl TaskPose {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    /// `[desired.position − self.position; log(desired.orientation · self.orientation⁻¹)]`.
    pub fn error_to(&self, desired: &TaskPose) -> TaskVector {
        let dp = desired.position - self.position;
        let dr = if desired.orientation == self.orientation {
            Vector3::zeros()
        } else {
            (desired.orientation * self.orientation.inverse()).scaled_axis()
        };
        TaskVector::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
    }

    /// Moves the pose by a task-space velocity held for `dt`.
    pub fn advanced(&self, velocity: &TaskVector, dt: f64) -> TaskPose {
        let linear = velocity.fixed_rows::<3>(0).into_owned();
        let angular = velocity.fixed_rows::<3>(3).into_owned();
        let orientation = if angular == Vector3::zeros() {
            self.orientation
        } else {
            UnitQuaternion::from_scaled_axis(angular * dt) * self.orientation
        };
        TaskPose {
            position: self.position + linear * dt,
            orientation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub positions: JointVector,
    pub velocities: JointVector,
}

impl JointState {
    pub fn at_rest(positions: JointVector) -> Self {
        Self {
            positions,
            velocities: JointVector::zeros(),
        }
    }
}

/// Everything forward kinematics produces for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// World pose of each link frame (after its joint rotation).
    pub links: [Isometry3<f64>; JOINTS],
    /// World position of each joint axis.
    pub joint_origins: [Vector3<f64>; JOINTS],
    /// World direction of each joint axis.
    pub joint_axes: [Vector3<f64>; JOINTS],
    pub end_effector: Isometry3<f64>,
}

impl ChainState {
    pub fn ee_pose(&self) -> TaskPose {
        TaskPose::from_isometry(&self.end_effector)
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        self.end_effector.translation.vector
    }

    /// Geometric Jacobian of the end-effector center, 6×7.
    pub fn ee_jacobian(&self) -> TaskJacobian {
        let p = self.ee_position();
        let mut j = TaskJacobian::zeros();
        for k in 0..JOINTS {
            let z = self.joint_axes[k];
            let lin = z.cross(&(p - self.joint_origins[k]));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, k).copy_from(&z);
        }
        j
    }

    /// Translational Jacobian of a world point rigidly attached to `link`.
    /// Columns of joints distal to the link are zero.
    pub fn point_jacobian(&self, link: usize, point: &Vector3<f64>) -> PointJacobian {
        let mut j = PointJacobian::zeros();
        for k in 0..=link.min(JOINTS - 1) {
            let lin = self.joint_axes[k].cross(&(point - self.joint_origins[k]));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
        }
        j
    }

    /// World endpoints of a capsule.
    pub fn capsule_segment(&self, capsule: &Capsule) -> (Vector3<f64>, Vector3<f64>) {
        let frame = &self.links[capsule.link];
        (
            frame.transform_point(&Point3::from(capsule.a)).coords,
            frame.transform_point(&Point3::from(capsule.b)).coords,
        )
    }
}

impl ArmModel {
    pub fn forward_kinematics(&self, q: &JointVector) -> ChainState {
        let mut frame = self.base;
        let mut links = [Isometry3::identity(); JOINTS];
        let mut joint_origins = [Vector3::zeros(); JOINTS];
        let mut joint_axes = [Vector3::zeros(); JOINTS];
        for (k, joint) in self.joints.iter().enumerate() {
            frame *= Isometry3::from_parts(Translation3::from(joint.origin), joint.rotation);
            joint_origins[k] = frame.translation.vector;
            joint_axes[k] = frame.rotation * joint.axis.into_inner();
            frame *= Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_axis_angle(&joint.axis, q[k]),
            );
            links[k] = frame;
        }
        ChainState {
            links,
            joint_origins,
            joint_axes,
            end_effector: frame * self.tool,
        }
    }

    pub fn ee_pose(&self, q: &JointVector) -> TaskPose {
        self.forward_kinematics(q).ee_pose()
    }

    pub fn ee_jacobian(&self, q: &JointVector) -> TaskJacobian {
        self.forward_kinematics(q).ee_jacobian()
    }

    pub fn point_jacobian(&self, q: &JointVector, link: usize, point: &Vector3<f64>) -> PointJacobian {
        self.forward_kinematics(q).point_jacobian(link, point)
    }

    pub fn lower_limits(&self) -> JointVector {
        JointVector::from_fn(|i, _| self.joints[i].limits.0)
    }

    pub fn upper_limits(&self) -> JointVector {
        JointVector::from_fn(|i, _| self.joints[i].limits.1)
    }

    pub fn velocity_limits(&self) -> JointVector {
        JointVector::from_fn(|i, _| self.joints[i].max_velocity)
    }

    pub fn clamp_to_limits(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| q[i].clamp(self.joints[i].limits.0, self.joints[i].limits.1))
    }

    pub fn within_limits(&self, q: &JointVector, tolerance: f64) -> bool {
        (0..JOINTS).all(|i| q[i] >= self.joints[i].limits.0 - tolerance && q[i] <= self.joints[i].limits.1 + tolerance)
    }

    /// Upper bound on how far the end-effector can get from the first joint.
    pub fn reach(&self) -> f64 {
        self.joints.iter().skip(1).map(|j| j.origin.norm()).sum::<f64>() + self.tool.translation.vector.norm()
    }

    /// World position of the first joint.
    pub fn shoulder(&self) -> Vector3<f64> {
        (self.base * Translation3::from(self.joints[0].origin)).translation.vector
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let invalid = |m: String| Err(KinematicsError::InvalidModel(m));
        if self.joints.len() != JOINTS {
            return invalid(format!("expected {JOINTS} joints, found {}", self.joints.len()));
        }
        for j in &self.joints {
            if !(j.limits.0 < j.limits.1) {
                return invalid(format!("joint {}: lower limit must be below upper limit", j.name));
            }
            if !(j.max_velocity > 0.0) {
                return invalid(format!("joint {}: velocity limit must be positive", j.name));
            }
        }
        for (i, c) in self.capsules.iter().enumerate() {
            if c.link >= JOINTS {
                return invalid(format!("capsule {i}: link index {} out of range", c.link));
            }
            if !(c.radius > 0.0) {
                return invalid(format!("capsule {i}: radius must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let file: ModelFile = toml::from_str(text)?;
        file.into_model()
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|source| KinematicsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The bundled S-R-S arm.
    pub fn default_srs7() -> Self {
        Self::from_toml(DEFAULT_MODEL).expect("bundled arm model is valid")
    }
}

pub const DEFAULT_MODEL: &str = include_str!("../data/srs7.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseRecord {
    position: [f64; 3],
    /// w, x, y, z
    orientation: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointRecord {
    name: String,
    origin: [f64; 3],
    rotation: [f64; 4],
    axis: [f64; 3],
    limits: [f64; 2],
    max_velocity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CapsuleRecord {
    link: usize,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    name: String,
    #[serde(default = "one")]
    format_version: u32,
    base: PoseRecord,
    tool: PoseRecord,
    joints: Vec<JointRecord>,
    #[serde(default)]
    capsules: Vec<CapsuleRecord>,
}

fn one() -> u32 {
    1
}

/// Parses a `[w, x, y, z]` quaternion that must already be unit length.
pub fn unit_quaternion(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>, String> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    if !wxyz.iter().all(|v| v.is_finite()) || (q.norm() - 1.0).abs() > 1e-9 {
        return Err(format!("quaternion {wxyz:?} is not unit length"));
    }
    Ok(UnitQuaternion::new_unchecked(q))
}

impl PoseRecord {
    fn to_isometry(&self) -> Result<Isometry3<f64>, KinematicsError> {
        let rotation = unit_quaternion(self.orientation).map_err(KinematicsError::InvalidModel)?;
        Ok(Isometry3::from_parts(Translation3::from(Vector3::from(self.position)), rotation))
    }
}

impl ModelFile {
    fn into_model(self) -> Result<ArmModel, KinematicsError> {
        if self.format_version != 1 {
            return Err(KinematicsError::InvalidModel(format!("unsupported format_version {}", self.format_version)));
        }
        let joints = self
            .joints
            .into_iter()
            .map(|j| {
                let axis = Vector3::from(j.axis);
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(KinematicsError::InvalidModel(format!("joint {}: axis must be a unit vector", j.name)));
                }
                Ok(Joint {
                    rotation: unit_quaternion(j.rotation).map_err(KinematicsError::InvalidModel)?,
                    name: j.name,
                    origin: Vector3::from(j.origin),
                    axis: Unit::new_unchecked(axis),
                    limits: (j.limits[0], j.limits[1]),
                    max_velocity: j.max_velocity,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = ArmModel {
            name: self.name,
            base: self.base.to_isometry()?,
            tool: self.tool.to_isometry()?,
            joints,
            capsules: self
                .capsules
                .into_iter()
                .map(|c| Capsule {
                    link: c.link,
                    a: Vector3::from(c.a),
                    b: Vector3::from(c.b),
                    radius: c.radius,
                })
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Moore–Penrose inverse `Jᵀ(JJᵀ + λ²I)⁻¹` of a wide matrix.
///
/// With `damping == 0` a rank-deficient input is reported instead of inverted.
pub fn pseudo_inverse(j: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>, KinematicsError> {
    let rows = j.nrows();
    if damping == 0.0 {
        let sigma_min = j.clone().svd(false, false).singular_values.min();
        if sigma_min < RANK_TOLERANCE {
            return Err(KinematicsError::RankDeficient { sigma_min });
        }
    }
    let gram = j * j.transpose() + DMatrix::identity(rows, rows) * (damping * damping);
    let inv = gram
        .try_inverse()
        .ok_or(KinematicsError::RankDeficient { sigma_min: 0.0 })?;
    Ok(j.transpose() * inv)
}

/// `I − J⁺J`, with the same damping as [`pseudo_inverse`].
pub fn null_projector(j: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>, KinematicsError> {
    let pinv = pseudo_inverse(j, damping)?;
    Ok(DMatrix::identity(j.ncols(), j.ncols()) - pinv * j)
}

/// Damped least squares kicks in smoothly once the smallest singular value
/// falls below `threshold`: `λ² = (1 − (σ/threshold)²) λ_max²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingPolicy {
    pub threshold: f64,
    pub max_damping: f64,
}

impl Default for DampingPolicy {
    fn default() -> Self {
        Self {
            threshold: 1e-4,
            max_damping: 0.05,
        }
    }
}

impl DampingPolicy {
    pub fn damping_squared(&self, sigma_min: f64) -> f64 {
        if sigma_min >= self.threshold {
            0.0
        } else {
            (1.0 - (sigma_min / self.threshold).powi(2)) * self.max_damping * self.max_damping
        }
    }
}

/// Pseudo-inverse and null-space projector of the end-effector Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInverse {
    pub pinv: TaskInverseMatrix,
    pub null: JointMatrix,
    pub sigma_min: f64,
    /// λ² actually used; zero means the exact Moore–Penrose inverse.
    pub damping_squared: f64,
}

impl TaskInverse {
    pub fn new(j: &TaskJacobian, policy: &DampingPolicy) -> Self {
        let gram: Matrix6<f64> = j * j.transpose();
        let eig = gram.symmetric_eigenvalues();
        let sigma_min = eig.min().max(0.0).sqrt();
        let damping_squared = policy.damping_squared(sigma_min);
        let regularized = gram + Matrix6::identity() * damping_squared;
        let inv = regularized
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| regularized.try_inverse())
            .unwrap_or_else(Matrix6::zeros);
        let pinv = j.transpose() * inv;
        let null = JointMatrix::identity() - pinv * j;
        Self {
            pinv,
            null,
            sigma_min,
            damping_squared,
        }
    }

    pub fn is_damped(&self) -> bool {
        self.damping_squared > 0.0
    }
}

/// Pseudo-inverse of a single row, `rᵀ / (‖r‖² + λ²)`. Returns the column and
/// whether damping was applied.
pub fn row_pseudo_inverse(row: &RowSVector<f64, JOINTS>, policy: &DampingPolicy) -> (JointVector, bool) {
    let norm_sq = row.norm_squared();
    let damping_squared = policy.damping_squared(norm_sq.sqrt());
    let denom = norm_sq + damping_squared;
    if denom == 0.0 {
        return (JointVector::zeros(), true);
    }
    (row.transpose() / denom, damping_squared > 0.0)
}
