//! Dynamical-system modulation around moving convex obstacles.
//!
//! The modulated end-effector velocity is
//!
//! ```text
//! ξ̇ = M̄(ξ) (f(ξ) − ξ̇ᶜ) + ξ̇ᶜ,     M̄ = Π_k M_k,     M_k = E_k D_k E_k⁻¹
//! ```
//!
//! where `E_k = [n e¹ e²]` is built from the obstacle normal at the
//! margin-scaled relative position and `D_k` holds the eigenvalues that damp
//! the normal component and amplify the tangential ones.
//!
//! Weights and the velocity-shift smoothing use `Γ − 1`, so an obstacle whose
//! inflated boundary passes through the query point takes the full weight and
//! its normal eigenvalue drops to zero there.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::field::VectorField;
use crate::obstacle::{tangent_basis, Obstacle, ObstacleError, Surface};

const MIN_BASIS_DET: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModulationError {
    #[error("obstacle {id}: deflection basis is singular (normalized det {det:e})")]
    SingularBasis { id: u32, det: f64 },
    #[error("obstacle {id}: query point sits at the obstacle center")]
    AtCenter { id: u32 },
}

/// Per-obstacle quantities behind one modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleTerm {
    pub id: u32,
    /// Margin-applied Γ, unclamped.
    pub gamma: f64,
    pub weight: f64,
    pub eigenvalues: [f64; 3],
    /// The relative velocity was receding, so the normal eigenvalue was held at 1.
    pub tail_effect_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationResult {
    pub combined: Matrix3<f64>,
    pub velocity_shift: Vector3<f64>,
    /// Sorted by ascending obstacle id.
    pub per_obstacle: Vec<ObstacleTerm>,
}

impl ModulationResult {
    fn identity() -> Self {
        Self {
            combined: Matrix3::identity(),
            velocity_shift: Vector3::zeros(),
            per_obstacle: Vec::new(),
        }
    }
}

/// `(λ¹, λ², λ³)` for one obstacle.
///
/// Both the normal and the tangent deflection scale with the weight, so an
/// obstacle with zero weight contributes the identity and cannot push the
/// flow into the obstacle whose boundary is being approached.
///
/// `gamma` should already be clamped to at least 1 by callers that may query
/// interior points.
pub fn eigenvalues(gamma: f64, sigma: f64, weight: f64, approaching: bool) -> [f64; 3] {
    let decay = 1.0 / gamma.abs().powf(1.0 / sigma);
    let normal = if approaching { 1.0 - weight * decay } else { 1.0 };
    let tangent = 1.0 + weight * decay;
    [normal, tangent, tangent]
}

/// Weight of obstacle `k` among margin-applied Γ values.
///
/// `ω_k = Π_{i≠k} (Γ_i − 1) / ((Γ_k − 1) + (Γ_i − 1))`; interior values are
/// clamped to the boundary and a 0/0 factor takes its symmetric limit 1/2.
pub fn weight(k: usize, gammas: &[f64]) -> f64 {
    let excess = |g: f64| (g - 1.0).max(0.0);
    let dk = excess(gammas[k]);
    gammas
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &g)| {
            let di = excess(g);
            let denom = dk + di;
            if denom == 0.0 {
                0.5
            } else {
                di / denom
            }
        })
        .product()
}

pub fn weights(gammas: &[f64]) -> Vec<f64> {
    (0..gammas.len()).map(|k| weight(k, gammas)).collect()
}

/// `M_k = E D E⁻¹` for one obstacle, using `relative_velocity` for the
/// tail-effect test.
pub fn modulation_matrix(
    obs: &Obstacle,
    point: &Vector3<f64>,
    relative_velocity: &Vector3<f64>,
    weight: f64,
) -> Result<(Matrix3<f64>, ObstacleTerm), ModulationError> {
    let gamma = obs.gamma(point, Surface::Inflated);
    let n = obs.normal(point, Surface::Inflated).map_err(|e| match e {
        ObstacleError::ZeroGradient => ModulationError::AtCenter { id: obs.id },
        ObstacleError::Invalid { .. } => unreachable!("normal() only reports ZeroGradient"),
    })?;
    let (e1, e2) = tangent_basis(&n);
    let basis = Matrix3::from_columns(&[n, e1, e2]);
    let det = basis.determinant() / (n.norm() * e1.norm() * e2.norm());
    if det.abs() < MIN_BASIS_DET {
        return Err(ModulationError::SingularBasis { id: obs.id, det });
    }
    let inverse = basis
        .try_inverse()
        .ok_or(ModulationError::SingularBasis { id: obs.id, det })?;

    let approaching = n.dot(relative_velocity) < 0.0;
    let lambda = eigenvalues(gamma.max(1.0), obs.sigma, weight, approaching);
    let m = basis * Matrix3::from_diagonal(&Vector3::from(lambda)) * inverse;
    Ok((
        m,
        ObstacleTerm {
            id: obs.id,
            gamma,
            weight,
            eigenvalues: lambda,
            tail_effect_active: !approaching,
        },
    ))
}

/// Weighted rigid-body velocity of the obstacles as seen from `point`:
/// `Σ_k exp(−(Γ_k − 1)/ρ_k) ω_k (v_k + w_k × (ξ − c_k)/η_k)`.
pub fn velocity_shift(obstacles: &[Obstacle], point: &Vector3<f64>, weights: &[f64]) -> Vector3<f64> {
    obstacles
        .iter()
        .zip(weights)
        .map(|(obs, &w)| {
            let gamma = obs.gamma(point, Surface::Inflated).max(1.0);
            let smoothing = (-(gamma - 1.0) / obs.rho).exp();
            let scaled = (point - obs.center) / obs.eta;
            (obs.linear_velocity + obs.angular_velocity.cross(&scaled)) * (smoothing * w)
        })
        .sum()
}

/// Modulates an already evaluated nominal velocity `f` at `point`.
pub fn modulate_velocity(
    obstacles: &[Obstacle],
    point: &Vector3<f64>,
    f: &Vector3<f64>,
) -> Result<(Vector3<f64>, ModulationResult), ModulationError> {
    if obstacles.is_empty() {
        return Ok((*f, ModulationResult::identity()));
    }
    let mut order: Vec<usize> = (0..obstacles.len()).collect();
    order.sort_by_key(|&i| obstacles[i].id);
    let sorted: Vec<Obstacle> = order.iter().map(|&i| obstacles[i].clone()).collect();

    let gammas: Vec<f64> = sorted.iter().map(|o| o.gamma(point, Surface::Inflated)).collect();
    let weights = weights(&gammas);
    let shift = velocity_shift(&sorted, point, &weights);
    let relative = f - shift;

    let mut combined = Matrix3::identity();
    let mut per_obstacle = Vec::with_capacity(sorted.len());
    for (obs, &w) in sorted.iter().zip(&weights) {
        let (m, term) = modulation_matrix(obs, point, &relative, w)?;
        combined *= m;
        per_obstacle.push(term);
    }
    let velocity = combined * relative + shift;
    Ok((
        velocity,
        ModulationResult {
            combined,
            velocity_shift: shift,
            per_obstacle,
        },
    ))
}

/// Evaluates the field at `point` and modulates it.
pub fn modulate(
    obstacles: &[Obstacle],
    field: &VectorField,
    point: &Vector3<f64>,
) -> Result<(Vector3<f64>, ModulationResult), ModulationError> {
    modulate_velocity(obstacles, point, &field.evaluate(point))
}
