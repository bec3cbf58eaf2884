//! Convex moving obstacles described by a superquadric distance function.
//!
//! The distance function is
//!
//! ```text
//! Γ(ξ̃) = Σ_i ((ξ̃)_i / a_i)^(2 p_i)
//! ```
//!
//! evaluated in the obstacle's own frame. It is 1 on the surface, below 1
//! inside and grows monotonically outward. When the safety margin is applied
//! the relative position is divided by `eta` first, which inflates the body.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

/// `|Γ - 1|` at or below this counts as being on the surface.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

const MIN_GRADIENT_NORM: f64 = 1e-12;
const UNIT_QUATERNION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObstacleError {
    #[error("obstacle {id}: {reason}")]
    Invalid { id: u32, reason: String },
    #[error("distance gradient vanishes (query point at the obstacle center)")]
    ZeroGradient,
}

/// Which surface of an obstacle a query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Surface {
    /// The physical body, `Γ(ξ̃) = 1`.
    Raw,
    /// The margin-inflated body, `Γ(ξ̃ / η) = 1`.
    Inflated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Exterior,
    Boundary,
    Interior,
}

/// A convex obstacle with rigid-body motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub id: u32,
    pub center: Vector3<f64>,
    /// Semi-axis lengths in the obstacle frame, meters.
    pub axes: Vector3<f64>,
    /// Integer exponents; 1 gives an ellipsoid, larger values a boxier body.
    pub powers: [u32; 3],
    /// Obstacle frame to world frame.
    pub orientation: UnitQuaternion<f64>,
    /// Safety margin coefficient, at least 1.
    pub eta: f64,
    /// Reactivity coefficient.
    pub sigma: f64,
    /// Smoothing coefficient of the velocity shift.
    pub rho: f64,
    pub linear_velocity: Vector3<f64>,
    /// World-frame angular velocity, rad/s.
    pub angular_velocity: Vector3<f64>,
}

impl Obstacle {
    /// A stationary ellipsoid with unit coefficients and identity orientation.
    pub fn ellipsoid(id: u32, center: Vector3<f64>, axes: Vector3<f64>) -> Self {
        Self {
            id,
            center,
            axes,
            powers: [1, 1, 1],
            orientation: UnitQuaternion::identity(),
            eta: 1.0,
            sigma: 1.0,
            rho: 1.0,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn sphere(id: u32, center: Vector3<f64>, radius: f64) -> Self {
        Self::ellipsoid(id, center, Vector3::repeat(radius))
    }

    pub fn with_margin(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_velocity(mut self, linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        self.linear_velocity = linear;
        self.angular_velocity = angular;
        self
    }

    pub fn validate(&self) -> Result<(), ObstacleError> {
        let fail = |reason: String| {
            Err(ObstacleError::Invalid {
                id: self.id,
                reason,
            })
        };
        if !self.center.iter().all(|v| v.is_finite()) {
            return fail("center must be finite".into());
        }
        if !self.axes.iter().all(|&a| a.is_finite() && a > 0.0) {
            return fail(format!("axis lengths must be positive, got {:?}", self.axes.as_slice()));
        }
        if self.powers.iter().any(|&p| p < 1) {
            return fail(format!("powers must be >= 1, got {:?}", self.powers));
        }
        if !(self.eta.is_finite() && self.eta >= 1.0) {
            return fail(format!("eta must be >= 1, got {}", self.eta));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return fail(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return fail(format!("rho must be > 0, got {}", self.rho));
        }
        if (self.orientation.quaternion().norm() - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
            return fail("orientation must be a unit quaternion".into());
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.linear_velocity) || !finite(&self.angular_velocity) {
            return fail("velocities must be finite".into());
        }
        Ok(())
    }

    fn scale(&self, surface: Surface) -> f64 {
        match surface {
            Surface::Raw => 1.0,
            Surface::Inflated => self.eta,
        }
    }

    /// Position relative to the center, rotated into the obstacle frame and
    /// divided by the margin when `surface` is inflated.
    pub fn to_local(&self, point: &Vector3<f64>, surface: Surface) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&(point - self.center)) / self.scale(surface)
    }

    /// Inverse of [`Obstacle::to_local`].
    pub fn to_world(&self, local: &Vector3<f64>, surface: Surface) -> Vector3<f64> {
        self.center + self.orientation.transform_vector(&(local * self.scale(surface)))
    }

    /// Γ evaluated on an obstacle-frame point.
    pub fn gamma_local(&self, local: &Vector3<f64>) -> f64 {
        (0..3)
            .map(|i| (local[i] / self.axes[i]).powi(2 * self.powers[i] as i32))
            .sum()
    }

    pub fn gamma(&self, point: &Vector3<f64>, surface: Surface) -> f64 {
        self.gamma_local(&self.to_local(point, surface))
    }

    /// Gradient of Γ with respect to an obstacle-frame point.
    pub fn gradient_local(&self, local: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            let p = self.powers[i] as i32;
            let a = self.axes[i];
            2.0 * p as f64 * (local[i] / a).powi(2 * p - 1) / a
        })
    }

    /// Outward normal of the deflection plane: the gradient of Γ at the
    /// (possibly margin-scaled) relative position, rotated into the world frame.
    pub fn normal(&self, point: &Vector3<f64>, surface: Surface) -> Result<Vector3<f64>, ObstacleError> {
        let grad = self.gradient_local(&self.to_local(point, surface));
        if grad.norm() < MIN_GRADIENT_NORM {
            return Err(ObstacleError::ZeroGradient);
        }
        Ok(self.orientation.transform_vector(&grad))
    }

    pub fn region(&self, point: &Vector3<f64>, surface: Surface) -> Region {
        let gamma = self.gamma(point, surface);
        if (gamma - 1.0).abs() <= BOUNDARY_TOLERANCE {
            Region::Boundary
        } else if gamma > 1.0 {
            Region::Exterior
        } else {
            Region::Interior
        }
    }

    /// Radius of a sphere about the center that contains the chosen surface.
    pub fn bounding_radius(&self, surface: Surface) -> f64 {
        self.axes.norm() * self.scale(surface)
    }

    /// Scale `t > 0` such that the obstacle-frame point `t * dir` lies on the
    /// unit level set of Γ. `dir` must be nonzero.
    pub fn ray_scale_local(&self, dir: &Vector3<f64>) -> f64 {
        let g = self.gamma_local(dir);
        if self.powers.iter().all(|&p| p == self.powers[0]) {
            // Γ(t·d) = t^(2p) Γ(d)
            return g.powf(-1.0 / (2.0 * self.powers[0] as f64));
        }
        // Mixed powers: Γ(t·d) is strictly increasing in t, bracket and bisect.
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while self.gamma_local(&(dir * hi)) < 1.0 {
            lo = hi;
            hi *= 2.0;
        }
        while self.gamma_local(&(dir * lo)) > 1.0 && lo > 0.0 {
            lo *= 0.5;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.gamma_local(&(dir * mid)) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Point where the ray from the center along world direction `dir`
    /// crosses the chosen surface.
    pub fn surface_point_along(&self, dir: &Vector3<f64>, surface: Surface) -> Vector3<f64> {
        let local_dir = self.orientation.inverse_transform_vector(dir);
        let t = self.ray_scale_local(&local_dir);
        self.to_world(&(local_dir * t), surface)
    }

    /// The obstacle after `dt` seconds of constant-velocity motion.
    pub fn advanced(&self, dt: f64) -> Obstacle {
        let mut next = self.clone();
        next.center += self.linear_velocity * dt;
        if self.angular_velocity != Vector3::zeros() {
            let spin = UnitQuaternion::from_scaled_axis(self.angular_velocity * dt);
            next.orientation = spin * self.orientation;
        }
        next
    }
}

/// Two vectors spanning the plane orthogonal to `n`.
///
/// Uses `e¹ = (n₂, -n₁, 0)` and `e² = (n₃, 0, -n₁)` whenever the basis
/// `[n e¹ e²]` is well conditioned. Those formulas collapse when `n₁ ≈ 0`
/// (the determinant equals `n₁ ‖n‖²`); the fallback then completes `n` with
/// the coordinate axis least aligned with it, orthonormalized.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let e1 = Vector3::new(n[1], -n[0], 0.0);
    let e2 = Vector3::new(n[2], 0.0, -n[0]);
    let scale = n.norm();
    let det = nalgebra::Matrix3::from_columns(&[*n, e1, e2]).determinant();
    if det.abs() > 1e-9 * scale.powi(3) {
        return (e1, e2);
    }

    let unit = n / scale;
    let axis = (0..3)
        .min_by(|&a, &b| unit[a].abs().total_cmp(&unit[b].abs()))
        .unwrap_or(0);
    let mut u = Vector3::zeros();
    u[axis] = 1.0;
    let u = (u - unit * unit.dot(&u)).normalize();
    let v = unit.cross(&u);
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_sphere() -> Obstacle {
        Obstacle::sphere(1, Vector3::zeros(), 1.0)
    }

    #[test]
    fn gamma_examples() {
        let s = unit_sphere();
        assert_eq!(s.gamma(&Vector3::new(2.0, 0.0, 0.0), Surface::Raw), 4.0);

        let e = Obstacle::ellipsoid(1, Vector3::zeros(), Vector3::new(2.0, 1.0, 1.0));
        assert_eq!(e.gamma(&Vector3::new(2.0, 0.0, 0.0), Surface::Raw), 1.0);

        let m = unit_sphere().with_margin(2.0);
        assert_eq!(m.gamma(&Vector3::new(2.0, 0.0, 0.0), Surface::Inflated), 1.0);
        assert_eq!(m.gamma(&Vector3::zeros(), Surface::Inflated), 0.0);
    }

    #[test]
    fn normal_examples() {
        let s = unit_sphere();
        assert_eq!(s.normal(&Vector3::new(2.0, 0.0, 0.0), Surface::Raw).unwrap(), Vector3::new(4.0, 0.0, 0.0));
        assert_eq!(s.normal(&Vector3::new(0.0, 0.0, 3.0), Surface::Raw).unwrap(), Vector3::new(0.0, 0.0, 6.0));
        let e = Obstacle::ellipsoid(1, Vector3::zeros(), Vector3::new(2.0, 1.0, 1.0));
        assert_eq!(e.normal(&Vector3::new(2.0, 0.0, 0.0), Surface::Raw).unwrap(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s.normal(&Vector3::zeros(), Surface::Raw), Err(ObstacleError::ZeroGradient));
    }

    #[test]
    fn normal_matches_central_differences() {
        let mut obs = Obstacle::ellipsoid(3, Vector3::new(0.2, -0.1, 0.4), Vector3::new(0.3, 0.5, 0.2));
        obs.powers = [1, 2, 3];
        obs.orientation = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1);
        obs.eta = 1.3;
        let p = Vector3::new(0.6, 0.2, 0.1);
        let h = 1e-6;
        for surface in [Surface::Raw, Surface::Inflated] {
            let analytic = obs.normal(&p, surface).unwrap();
            // the analytic normal is the gradient with respect to the scaled argument
            let scale = if surface == Surface::Inflated { obs.eta } else { 1.0 };
            for i in 0..3 {
                let mut dp = Vector3::zeros();
                dp[i] = h;
                let fd = (obs.gamma(&(p + dp), surface) - obs.gamma(&(p - dp), surface)) / (2.0 * h);
                assert!((fd * scale - analytic[i]).abs() <= 1e-6 * analytic.norm().max(1.0));
            }
        }
    }

    #[test]
    fn regions() {
        let s = unit_sphere();
        assert_eq!(s.region(&Vector3::new(2.0, 0.0, 0.0), Surface::Raw), Region::Exterior);
        assert_eq!(s.region(&Vector3::new(1.0, 0.0, 0.0), Surface::Raw), Region::Boundary);
        assert_eq!(s.region(&Vector3::new(0.5, 0.0, 0.0), Surface::Raw), Region::Interior);
    }

    #[test]
    fn tangent_basis_examples() {
        let (e1, e2) = tangent_basis(&Vector3::new(4.0, 0.0, 0.0));
        assert_eq!(e1, Vector3::new(0.0, -4.0, 0.0));
        assert_eq!(e2, Vector3::new(0.0, 0.0, -4.0));

        let n = Vector3::new(0.0, 0.0, 1.0);
        let (e1, e2) = tangent_basis(&n);
        for e in [e1, e2] {
            assert!(e.dot(&n).abs() < 1e-12);
            assert!((e.norm() - 1.0).abs() < 1e-12);
            assert_eq!(e[2], 0.0);
        }
        assert!(e1.dot(&e2).abs() < 1e-12);

        let n = Vector3::new(1.0, 1.0, 1.0);
        let (e1, e2) = tangent_basis(&n);
        assert_eq!(e1, Vector3::new(1.0, -1.0, 0.0));
        assert_eq!(e2, Vector3::new(1.0, 0.0, -1.0));
        // det = n₁‖n‖² = 3
        let det = nalgebra::Matrix3::from_columns(&[n, e1, e2]).determinant();
        assert!((det - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tangent_basis_degenerate_first_component() {
        // n₁ = 0 but n₂ ≠ 0: e² from the closed form is the zero vector.
        let n = Vector3::new(0.0, 2.0, -1.0);
        let (e1, e2) = tangent_basis(&n);
        let det = nalgebra::Matrix3::from_columns(&[n, e1, e2]).determinant();
        assert!(det.abs() > 1e-9);
    }

    #[test]
    fn advance_examples() {
        let obs = unit_sphere().with_velocity(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let next = obs.advanced(0.01);
        assert_eq!(next.center, Vector3::new(0.01, 0.0, 0.0));
        assert_eq!(next.orientation, obs.orientation);

        let mut tilted = unit_sphere();
        tilted.orientation = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
        assert_eq!(tilted.advanced(0.5).orientation, tilted.orientation);

        // exp of the pure quaternion (0, 0, 0, π/2) is cos(π/2) + k sin(π/2) = k
        let spin = unit_sphere().with_velocity(Vector3::zeros(), Vector3::new(0.0, 0.0, PI));
        let q = spin.advanced(1.0).orientation;
        let oracle = nalgebra::Quaternion::new(0.0, 0.0, 0.0, 1.0);
        assert!((q.quaternion() - oracle).norm() < 1e-9 || (q.quaternion() + oracle).norm() < 1e-9);
        let x = q.transform_vector(&Vector3::x());
        assert!((x - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn validation_rejects_shrinking_margin() {
        let obs = unit_sphere().with_margin(0.9);
        assert!(matches!(obs.validate(), Err(ObstacleError::Invalid { .. })));
        let mut obs = unit_sphere();
        obs.powers = [1, 0, 1];
        assert!(obs.validate().is_err());
        assert!(unit_sphere().validate().is_ok());
    }

    #[test]
    fn ray_scale_hits_surface() {
        let mut obs = Obstacle::ellipsoid(1, Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.3, 0.6, 0.2));
        obs.powers = [1, 2, 1];
        obs.orientation = UnitQuaternion::from_euler_angles(0.4, 0.1, -0.2);
        obs.eta = 1.2;
        let p = obs.surface_point_along(&Vector3::new(0.3, -0.8, 0.5), Surface::Inflated);
        assert!((obs.gamma(&p, Surface::Inflated) - 1.0).abs() < 1e-10);
    }
}
