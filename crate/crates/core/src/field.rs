//! Nominal end-effector dynamics `ξ̇ = f(ξ)` and their forward-Euler rollout.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid integration request: {0}")]
    InvalidRequest(String),
}

/// An analytic velocity field over Cartesian positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorField {
    /// `f(ξ) = gain · (target − ξ)`.
    LinearAttractor { target: [f64; 3], gain: f64 },
    /// A horizontal circle about `center` that attracts nearby states:
    /// radial error decays at `contraction_gain`, the state circulates at
    /// `angular_rate` rad/s, and the height converges to the center's.
    LimitCycle {
        center: [f64; 3],
        radius: f64,
        angular_rate: f64,
        contraction_gain: f64,
    },
}

impl VectorField {
    pub fn linear(target: Vector3<f64>, gain: f64) -> Self {
        VectorField::LinearAttractor {
            target: target.into(),
            gain,
        }
    }

    pub fn evaluate(&self, point: &Vector3<f64>) -> Vector3<f64> {
        match *self {
            VectorField::LinearAttractor { target, gain } => (Vector3::from(target) - point) * gain,
            VectorField::LimitCycle {
                center,
                radius,
                angular_rate,
                contraction_gain,
            } => {
                let rel = point - Vector3::from(center);
                let planar = rel.xy().norm();
                let mut v = Vector3::new(-angular_rate * rel.y, angular_rate * rel.x, -contraction_gain * rel.z);
                if planar > 0.0 {
                    let radial = contraction_gain * (radius - planar) / planar;
                    v.x += radial * rel.x;
                    v.y += radial * rel.y;
                }
                v
            }
        }
    }

    /// The fixed point the field converges to, if it has one.
    pub fn attractor(&self) -> Option<Vector3<f64>> {
        match *self {
            VectorField::LinearAttractor { target, .. } => Some(Vector3::from(target)),
            VectorField::LimitCycle { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            VectorField::LinearAttractor { target, gain } => {
                if !finite(target) || !(gain.is_finite() && *gain > 0.0) {
                    return Err("linear attractor needs a finite target and a positive gain".into());
                }
            }
            VectorField::LimitCycle {
                center,
                radius,
                angular_rate,
                contraction_gain,
            } => {
                if !finite(center) || !(*radius > 0.0) || !angular_rate.is_finite() || !(*contraction_gain > 0.0) {
                    return Err("limit cycle needs finite center, positive radius and positive contraction gain".into());
                }
            }
        }
        Ok(())
    }
}

/// Uniformly spaced samples of an integrated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<(f64, Vector3<f64>)>,
}

impl Trajectory {
    pub fn last(&self) -> Vector3<f64> {
        self.samples.last().map(|s| s.1).unwrap_or_else(Vector3::zeros)
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.samples.iter().map(|(_, p)| p)
    }

    /// `t,x,y,z` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,z\n");
        for (t, p) in &self.samples {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", t, p.x, p.y, p.z));
        }
        out
    }
}

/// Forward-Euler rollout `ξ_t = ξ_{t−1} + v(ξ_{t−1}) dt`.
///
/// `modulate`, when given, maps `(point, f(point))` to the velocity actually
/// integrated; this is where obstacle modulation plugs in.
pub fn integrate<M>(
    field: &VectorField,
    start: Vector3<f64>,
    dt: f64,
    steps: usize,
    mut modulate: Option<M>,
) -> Result<Trajectory, FieldError>
where
    M: FnMut(&Vector3<f64>, &Vector3<f64>) -> Vector3<f64>,
{
    if !(dt > 0.0) || steps == 0 {
        return Err(FieldError::InvalidRequest(format!("need dt > 0 and steps >= 1, got dt={dt} steps={steps}")));
    }
    let mut samples = Vec::with_capacity(steps + 1);
    let mut xi = start;
    samples.push((0.0, xi));
    for step in 1..=steps {
        let raw = field.evaluate(&xi);
        let v = match modulate.as_mut() {
            Some(m) => m(&xi, &raw),
            None => raw,
        };
        xi += v * dt;
        if !xi.iter().all(|c| c.is_finite()) {
            return Err(FieldError::NonFiniteState { step });
        }
        samples.push((step as f64 * dt, xi));
    }
    Ok(Trajectory { dt, samples })
}

/// Shorthand for an unmodulated rollout.
pub fn integrate_plain(field: &VectorField, start: Vector3<f64>, dt: f64, steps: usize) -> Result<Trajectory, FieldError> {
    integrate(field, start, dt, steps, None::<fn(&Vector3<f64>, &Vector3<f64>) -> Vector3<f64>>)
}
