//! Closest points between arm geometry and obstacle surfaces.
//!
//! Links are capsules (a segment plus a radius); the end-effector center is a
//! single point. Distances are Euclidean, measured to either the raw or the
//! margin-inflated obstacle surface.

use nalgebra::Vector3;
use thiserror::Error;

use crate::kinematics::{ArmModel, ChainState, END_EFFECTOR_LINK};
use crate::obstacle::{Obstacle, Surface};

const MAX_ALTERNATIONS: usize = 100;
const PARAMETER_TOLERANCE: f64 = 1e-8;
const FALLBACK_SAMPLES: usize = 64;
const SURFACE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProximityError {
    #[error("closest-point search did not converge for obstacle {obstacle_id}")]
    NoConvergence { obstacle_id: u32 },
}

/// Closest pair between a capsule (or point) and an obstacle surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPair {
    /// Parameter of the closest axis point, `a + t (b − a)`.
    pub t: f64,
    pub axis_point: Vector3<f64>,
    pub surface_point: Vector3<f64>,
    /// Unit vector pointing from the obstacle toward the capsule.
    pub direction: Vector3<f64>,
    /// Axis distance minus radius; negative when the capsule penetrates.
    pub signed_distance: f64,
}

impl ClosestPair {
    /// Clearance floored at zero.
    pub fn distance(&self) -> f64 {
        self.signed_distance.max(0.0)
    }

    /// Vector from the obstacle's closest point to the capsule, with length
    /// equal to [`ClosestPair::distance`].
    pub fn separation(&self) -> Vector3<f64> {
        self.direction * self.distance()
    }

    /// Closest point on the capsule surface.
    pub fn capsule_point(&self, radius: f64) -> Vector3<f64> {
        if self.signed_distance > 0.0 {
            self.axis_point - self.direction * radius
        } else {
            self.axis_point
        }
    }

    /// The same pair seen from the obstacle: separation points the other way.
    pub fn reversed(&self) -> Vector3<f64> {
        -self.separation()
    }
}

/// Euclidean projection of an obstacle-frame point lying outside the unit
/// level set onto that level set.
///
/// Solves the Lagrange conditions `y + μ ∇Γ(y) = x` per coordinate for a fixed
/// multiplier and then brackets `μ` so that `Γ(y(μ)) = 1`.
fn project_outside_local(obs: &Obstacle, x: &Vector3<f64>) -> Vector3<f64> {
    let abs = x.abs();
    let coeff = Vector3::from_fn(|i, _| {
        let p = obs.powers[i] as i32;
        2.0 * p as f64 / obs.axes[i].powi(2 * p)
    });

    let solve_coordinate = |i: usize, mu: f64| -> f64 {
        let target = abs[i];
        if target == 0.0 {
            return 0.0;
        }
        let p = obs.powers[i] as i32;
        if p == 1 {
            return target / (1.0 + mu * coeff[i]);
        }
        // φ(y) = y + μ c y^(2p−1) − x is convex and increasing on y ≥ 0, so
        // Newton from an upper bound descends monotonically onto the root.
        let k = 2 * p - 1;
        let mut y = target.min((target / (mu * coeff[i])).powf(1.0 / k as f64));
        for _ in 0..100 {
            let g = y + mu * coeff[i] * y.powi(k) - target;
            let dg = 1.0 + mu * coeff[i] * k as f64 * y.powi(k - 1);
            let next = (y - g / dg).max(0.0);
            if (y - next).abs() <= 1e-16 * target.max(1e-300) {
                y = next;
                break;
            }
            y = next;
        }
        y
    };
    let level = |mu: f64| -> (f64, Vector3<f64>) {
        let y = Vector3::from_fn(|i, _| solve_coordinate(i, mu));
        (obs.gamma_local(&y) - 1.0, y)
    };

    let (mut lo, mut hi) = (0.0_f64, abs.norm().max(1e-12) * obs.axes.max());
    while level(hi).0 > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut mu = 0.5 * (lo + hi);
    let mut y = abs;
    for _ in 0..200 {
        let (g, candidate) = level(mu);
        y = candidate;
        if g.abs() <= SURFACE_TOLERANCE * 1e-2 {
            break;
        }
        if g > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        // Newton on g(μ) using dy/dμ = −c y^(2p−1) / (1 + μ c (2p−1) y^(2p−2))
        let mut slope = 0.0;
        for i in 0..3 {
            if y[i] == 0.0 {
                continue;
            }
            let p = obs.powers[i] as i32;
            let a = obs.axes[i];
            let dy = -coeff[i] * y[i].powi(2 * p - 1) / (1.0 + mu * coeff[i] * (2 * p - 1) as f64 * y[i].powi(2 * p - 2));
            slope += 2.0 * p as f64 * (y[i] / a).powi(2 * p - 1) / a * dy;
        }
        let newton = if slope < 0.0 { mu - g / slope } else { f64::NAN };
        mu = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Vector3::from_fn(|i, _| y[i].copysign(x[i]))
}

/// Depth of an interior obstacle-frame point, measured along the outward
/// gradient to the unit level set. Exact for spheres; an upper bound otherwise.
fn interior_depth_local(obs: &Obstacle, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let grad = obs.gradient_local(x);
    let dir = if grad.norm() > 1e-12 {
        grad.normalize()
    } else {
        // at the center: leave along the shortest semi-axis
        let i = obs.axes.imin();
        let mut d = Vector3::zeros();
        d[i] = 1.0;
        d
    };
    let (mut lo, mut hi) = (0.0_f64, obs.axes.max());
    while obs.gamma_local(&(x + dir * hi)) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if obs.gamma_local(&(x + dir * mid)) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 {
            break;
        }
    }
    (0.5 * (lo + hi), dir)
}

/// Closest pair between a single world point and the chosen obstacle surface.
pub fn point_to_obstacle(point: &Vector3<f64>, obs: &Obstacle, surface: Surface) -> ClosestPair {
    let scale = match surface {
        Surface::Raw => 1.0,
        Surface::Inflated => obs.eta,
    };
    let local = obs.to_local(point, surface);
    if obs.gamma_local(&local) <= 1.0 {
        let (depth, dir) = interior_depth_local(obs, &local);
        let direction = obs.orientation.transform_vector(&dir);
        return ClosestPair {
            t: 0.0,
            axis_point: *point,
            surface_point: obs.to_world(&(local + dir * depth), surface),
            direction,
            signed_distance: -depth * scale,
        };
    }
    let y = project_outside_local(obs, &local);
    let surface_point = obs.to_world(&y, surface);
    let diff = point - surface_point;
    let dist = diff.norm();
    let direction = if dist > 1e-12 {
        diff / dist
    } else {
        obs.orientation.transform_vector(&obs.gradient_local(&y)).normalize()
    };
    ClosestPair {
        t: 0.0,
        axis_point: *point,
        surface_point,
        direction,
        signed_distance: dist,
    }
}

fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    a + (b - a) * t
}

/// Minimizes a unimodal function on `[lo, hi]` by golden-section search.
fn golden_min(mut lo: f64, mut hi: f64, iterations: usize, f: impl Fn(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iterations {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    // compare against the bracket ends so minima on the boundary are kept
    let mid = 0.5 * (lo + hi);
    [lo, mid, hi].into_iter().min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap_or(mid)
}

fn with_radius(mut pair: ClosestPair, t: f64, radius: f64) -> ClosestPair {
    pair.t = t;
    pair.signed_distance -= radius;
    pair
}

/// Closest pair between the capsule `a`–`b` with `radius` and the obstacle.
///
/// Alternates between projecting the current axis point onto the surface and
/// projecting that surface point back onto the segment. Reports
/// [`ProximityError::NoConvergence`] when the parameter has not settled after
/// 100 rounds; [`segment_to_obstacle_sampled`] is the fallback.
pub fn segment_to_obstacle(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
    obs: &Obstacle,
    surface: Surface,
) -> Result<ClosestPair, ProximityError> {
    let axis = b - a;
    let len_sq = axis.norm_squared();
    if len_sq == 0.0 {
        return Ok(with_radius(point_to_obstacle(a, obs, surface), 0.0, radius));
    }

    // Γ along the segment is convex; its minimizer decides penetration and
    // seeds the alternation.
    let deepest = golden_min(0.0, 1.0, 60, |t| obs.gamma(&lerp(a, b, t), surface));
    let start = lerp(a, b, deepest);
    if obs.gamma(&start, surface) <= 1.0 {
        return Ok(with_radius(point_to_obstacle(&start, obs, surface), deepest, radius));
    }

    let mut t = deepest;
    for _ in 0..MAX_ALTERNATIONS {
        let pair = point_to_obstacle(&lerp(a, b, t), obs, surface);
        let next = ((pair.surface_point - a).dot(&axis) / len_sq).clamp(0.0, 1.0);
        if (next - t).abs() < PARAMETER_TOLERANCE {
            let pair = point_to_obstacle(&lerp(a, b, next), obs, surface);
            return Ok(with_radius(pair, next, radius));
        }
        t = next;
    }
    Err(ProximityError::NoConvergence { obstacle_id: obs.id })
}

/// Dense-sampling fallback: 64 axis samples, then golden-section refinement
/// around the best one.
pub fn segment_to_obstacle_sampled(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
    obs: &Obstacle,
    surface: Surface,
) -> Result<ClosestPair, ProximityError> {
    let dist = |t: f64| point_to_obstacle(&lerp(a, b, t), obs, surface).signed_distance;
    let n = FALLBACK_SAMPLES - 1;
    let best = (0..=n)
        .map(|k| k as f64 / n as f64)
        .min_by(|x, y| dist(*x).total_cmp(&dist(*y)))
        .unwrap_or(0.0);
    let step = 1.0 / n as f64;
    let t = golden_min((best - step).max(0.0), (best + step).min(1.0), 50, dist);
    let pair = point_to_obstacle(&lerp(a, b, t), obs, surface);
    if !pair.signed_distance.is_finite() {
        return Err(ProximityError::NoConvergence { obstacle_id: obs.id });
    }
    Ok(with_radius(pair, t, radius))
}

/// Iterative query with the sampling fallback.
pub fn capsule_to_obstacle(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
    obs: &Obstacle,
    surface: Surface,
) -> Result<ClosestPair, ProximityError> {
    segment_to_obstacle(a, b, radius, obs, surface).or_else(|_| segment_to_obstacle_sampled(a, b, radius, obs, surface))
}

/// The point on the non-end-effector links closest to any obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoint {
    pub link: usize,
    pub capsule: usize,
    pub obstacle_id: u32,
    /// Critical point on the capsule surface, world frame.
    pub point: Vector3<f64>,
    /// From the obstacle's closest point to the critical point.
    pub d0: Vector3<f64>,
    pub distance: f64,
    /// Unit escape direction; defined even at contact.
    pub direction: Vector3<f64>,
}

/// Clearance of the end-effector center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EeClearance {
    pub obstacle_id: u32,
    pub d_e: Vector3<f64>,
    pub distance: f64,
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProximityReport {
    pub critical: Option<CriticalPoint>,
    pub end_effector: Option<EeClearance>,
}

/// Minimum over every (non-end-effector capsule, obstacle) pair. Ties go to
/// the lowest link index, then the lowest obstacle id.
pub fn critical_point(
    model: &ArmModel,
    chain: &ChainState,
    obstacles: &[Obstacle],
    surface: Surface,
) -> Result<Option<CriticalPoint>, ProximityError> {
    let mut best: Option<(CriticalPoint, (usize, u32, usize))> = None;
    for (ci, capsule) in model.capsules.iter().enumerate() {
        if capsule.link == END_EFFECTOR_LINK {
            continue;
        }
        let (a, b) = chain.capsule_segment(capsule);
        for obs in obstacles {
            let pair = capsule_to_obstacle(&a, &b, capsule.radius, obs, surface)?;
            let candidate = CriticalPoint {
                link: capsule.link,
                capsule: ci,
                obstacle_id: obs.id,
                point: pair.capsule_point(capsule.radius),
                d0: pair.separation(),
                distance: pair.distance(),
                direction: pair.direction,
            };
            let key = (capsule.link, obs.id, ci);
            let better = match &best {
                None => true,
                Some((current, current_key)) => {
                    candidate.distance < current.distance || (candidate.distance == current.distance && key < *current_key)
                }
            };
            if better {
                best = Some((candidate, key));
            }
        }
    }
    Ok(best.map(|(c, _)| c))
}

/// Closest obstacle to the end-effector center, ties to the lowest id.
pub fn ee_clearance(chain: &ChainState, obstacles: &[Obstacle], surface: Surface) -> Option<EeClearance> {
    let e0 = chain.ee_position();
    let mut best: Option<EeClearance> = None;
    let mut sorted: Vec<&Obstacle> = obstacles.iter().collect();
    sorted.sort_by_key(|o| o.id);
    for obs in sorted {
        let pair = point_to_obstacle(&e0, obs, surface);
        let candidate = EeClearance {
            obstacle_id: obs.id,
            d_e: pair.separation(),
            distance: pair.distance(),
            direction: pair.direction,
        };
        if best.as_ref().is_none_or(|b| candidate.distance < b.distance) {
            best = Some(candidate);
        }
    }
    best
}

pub fn proximity_report(
    model: &ArmModel,
    chain: &ChainState,
    obstacles: &[Obstacle],
) -> Result<ProximityReport, ProximityError> {
    Ok(ProximityReport {
        critical: critical_point(model, chain, obstacles, Surface::Inflated)?,
        end_effector: ee_clearance(chain, obstacles, Surface::Inflated),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::JointVector;

    fn sphere_at(c: Vector3<f64>) -> Obstacle {
        Obstacle::sphere(1, c, 1.0)
    }

    #[test]
    fn segment_above_sphere() {
        let obs = sphere_at(Vector3::new(1.0, 2.0, 0.0));
        let a = Vector3::zeros();
        let b = Vector3::new(2.0, 0.0, 0.0);
        let pair = segment_to_obstacle(&a, &b, 0.0, &obs, Surface::Raw).unwrap();
        assert!((pair.axis_point - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-7);
        assert!((pair.surface_point - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-7);
        assert!((pair.distance() - 1.0).abs() < 1e-9);
        assert!((pair.direction - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-7);

        let pair = segment_to_obstacle(&a, &b, 0.05, &obs, Surface::Raw).unwrap();
        assert!((pair.distance() - 0.95).abs() < 1e-9);
        assert!((pair.capsule_point(0.05) - Vector3::new(1.0, 0.05, 0.0)).norm() < 1e-7);
    }

    #[test]
    fn grazing_segment_has_outward_direction() {
        let obs = sphere_at(Vector3::new(1.0, 1.0, 0.0));
        let pair = capsule_to_obstacle(&Vector3::zeros(), &Vector3::new(2.0, 0.0, 0.0), 0.0, &obs, Surface::Raw).unwrap();
        assert!(pair.distance() < 1e-6);
        // brute-force oracle: surface sample closest to the contact point
        let contact = Vector3::new(1.0, 0.0, 0.0);
        let mut best = (f64::INFINITY, Vector3::zeros());
        for i in 0..=100 {
            for j in 0..100 {
                let th = std::f64::consts::PI * i as f64 / 100.0;
                let ph = 2.0 * std::f64::consts::PI * j as f64 / 100.0;
                let s = obs.center + Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                let d = (s - contact).norm();
                if d < best.0 {
                    best = (d, (s - obs.center).normalize());
                }
            }
        }
        let angle = pair.direction.dot(&best.1).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-2, "angle {angle}");
    }

    #[test]
    fn penetrating_segment_reports_depth() {
        let obs = sphere_at(Vector3::zeros());
        let pair = segment_to_obstacle(&Vector3::new(-2.0, 0.3, 0.0), &Vector3::new(2.0, 0.3, 0.0), 0.1, &obs, Surface::Raw).unwrap();
        assert_eq!(pair.distance(), 0.0);
        assert!((pair.signed_distance - (-(0.7) - 0.1)).abs() < 1e-9);
        assert!((pair.direction - Vector3::y()).norm() < 1e-6);
    }

    #[test]
    fn point_queries() {
        let obs = sphere_at(Vector3::zeros());
        let pair = point_to_obstacle(&Vector3::new(2.0, 0.0, 0.0), &obs, Surface::Raw);
        assert!((pair.separation() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        let on = point_to_obstacle(&Vector3::new(0.0, 0.0, 1.0), &obs, Surface::Raw);
        assert!(on.distance() < 1e-12);
        assert!((on.direction - Vector3::z()).norm() < 1e-12);

        let inside = point_to_obstacle(&Vector3::new(0.0, -0.5, 0.0), &obs, Surface::Raw);
        assert_eq!(inside.distance(), 0.0);
        assert!((inside.direction + Vector3::y()).norm() < 1e-12);
        // gradient sign oracle: stepping along the direction lowers penetration
        let g0 = obs.gamma(&Vector3::new(0.0, -0.5, 0.0), Surface::Raw);
        let g1 = obs.gamma(&(Vector3::new(0.0, -0.5, 0.0) + inside.direction * 1e-3), Surface::Raw);
        assert!(g1 > g0);
    }

    #[test]
    fn inflated_surface_is_used() {
        let obs = sphere_at(Vector3::zeros()).with_margin(1.5);
        let pair = point_to_obstacle(&Vector3::new(2.0, 0.0, 0.0), &obs, Surface::Inflated);
        assert!((pair.distance() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_on_superquadric_satisfies_optimality() {
        let mut obs = Obstacle::ellipsoid(4, Vector3::new(0.1, 0.2, -0.3), Vector3::new(0.3, 0.15, 0.4));
        obs.powers = [2, 1, 3];
        obs.orientation = nalgebra::UnitQuaternion::from_euler_angles(0.3, 0.5, -0.4);
        let p = Vector3::new(0.8, -0.1, 0.4);
        let pair = point_to_obstacle(&p, &obs, Surface::Raw);
        assert!((obs.gamma(&pair.surface_point, Surface::Raw) - 1.0).abs() < 1e-9);
        let n = obs.normal(&pair.surface_point, Surface::Raw).unwrap().normalize();
        assert!((n - pair.direction).norm() < 1e-7);
    }

    #[test]
    fn sampled_fallback_agrees() {
        let mut obs = Obstacle::ellipsoid(2, Vector3::new(0.3, 0.4, 0.1), Vector3::new(0.2, 0.35, 0.15));
        obs.orientation = nalgebra::UnitQuaternion::from_euler_angles(0.2, -0.3, 0.9);
        let a = Vector3::new(-0.4, 0.0, 0.0);
        let b = Vector3::new(0.9, 0.1, 0.3);
        let it = segment_to_obstacle(&a, &b, 0.02, &obs, Surface::Raw).unwrap();
        let sm = segment_to_obstacle_sampled(&a, &b, 0.02, &obs, Surface::Raw).unwrap();
        assert!((it.distance() - sm.distance()).abs() < 1e-8);
    }

    #[test]
    fn far_obstacle_and_tie_breaking() {
        let model = ArmModel::default_srs7();
        let q = JointVector::from_row_slice(&[0.0, 0.6, 0.0, 1.2, 0.0, 0.3, 0.0]);
        let chain = model.forward_kinematics(&q);
        let far = Obstacle::sphere(1, Vector3::new(20.0, 0.0, 0.0), 0.2);
        let cp = critical_point(&model, &chain, &[far], Surface::Inflated).unwrap().unwrap();
        assert!(cp.distance > 10.0);

        // two identical spheres mirrored through the arm's plane (y = 0)
        let elbow = chain.joint_origins[3];
        let left = Obstacle::sphere(5, elbow + Vector3::new(0.0, 0.3, 0.0), 0.1);
        let right = Obstacle::sphere(2, elbow - Vector3::new(0.0, 0.3, 0.0), 0.1);
        let cp = critical_point(&model, &chain, &[left, right], Surface::Inflated).unwrap().unwrap();
        assert_eq!(cp.obstacle_id, 2);
    }

    #[test]
    fn critical_link_is_the_nearest_one() {
        let model = ArmModel::default_srs7();
        let q = JointVector::from_row_slice(&[0.0, 0.6, 0.0, 1.2, 0.0, 0.3, 0.0]);
        let chain = model.forward_kinematics(&q);
        // obstacle next to the middle of the upper arm (link 2)
        let (a, b) = chain.capsule_segment(&model.capsules[0]);
        let mid = (a + b) / 2.0;
        let obs = Obstacle::sphere(1, mid + Vector3::new(0.0, 0.25, 0.0), 0.1);
        let cp = critical_point(&model, &chain, std::slice::from_ref(&obs), Surface::Inflated).unwrap().unwrap();
        assert_eq!(cp.link, 2);
        assert!((cp.distance - (0.25 - 0.1 - 0.04)).abs() < 1e-9);
        let (fa, fb) = chain.capsule_segment(&model.capsules[1]);
        let forearm = capsule_to_obstacle(&fa, &fb, 0.035, &obs, Surface::Inflated).unwrap();
        assert!(forearm.distance() > cp.distance + 0.02);
    }

    #[test]
    fn end_effector_clearance() {
        let model = ArmModel::default_srs7();
        let chain = model.forward_kinematics(&JointVector::zeros());
        let e0 = chain.ee_position();
        let obs = Obstacle::sphere(3, e0 - Vector3::new(2.0, 0.0, 0.0), 1.0);
        let c = ee_clearance(&chain, &[obs], Surface::Inflated).unwrap();
        assert!((c.d_e - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(c.obstacle_id, 3);
        assert!(ee_clearance(&chain, &[], Surface::Inflated).is_none());
    }

    #[test]
    fn reversed_pair_flips_sign() {
        let obs = sphere_at(Vector3::new(1.0, 2.0, 0.0));
        let pair = segment_to_obstacle(&Vector3::zeros(), &Vector3::new(2.0, 0.0, 0.0), 0.0, &obs, Surface::Raw).unwrap();
        assert!((pair.reversed() + pair.separation()).norm() < 1e-9);
    }
}
