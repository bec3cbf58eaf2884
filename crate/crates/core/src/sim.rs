//! Fixed-step closed-loop simulation with perfect velocity actuation.
//!
//! Each tick `t_k = k·dt` computes the command against the obstacles at
//! `t_k`, records a row, integrates `q ← clamp(q + q̇·dt)` and moves the
//! obstacles forward by one step.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{control_step, ControlError, Mode};
use crate::field::VectorField;
use crate::kinematics::{ArmModel, JointState, JointVector, END_EFFECTOR_LINK, JOINTS};
use crate::obstacle::{Obstacle, Surface};
use crate::proximity::{capsule_to_obstacle, point_to_obstacle, ProximityError};
use crate::scenario::Scenario;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("control failed at t = {t}: {source}")]
    Control {
        t: f64,
        #[source]
        source: ControlError,
    },
    #[error(transparent)]
    Proximity(#[from] ProximityError),
}

/// Which part of the arm a collision involves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Body {
    Link(usize),
    EndEffector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub body: Body,
    pub obstacle_id: u32,
    /// Positive penetration depth, m.
    pub depth: f64,
}

/// Signed clearances of the arm against the raw obstacle surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub end_effector: f64,
    pub links: f64,
}

impl Clearance {
    pub fn min(&self) -> f64 {
        self.end_effector.min(self.links)
    }
}

/// Ground-truth clearance of every capsule (except on the end-effector link)
/// and of the end-effector center against the raw surfaces.
pub fn clearance(model: &ArmModel, q: &JointVector, obstacles: &[Obstacle]) -> Result<(Clearance, Vec<Collision>), ProximityError> {
    let chain = model.forward_kinematics(q);
    let mut result = Clearance {
        end_effector: f64::INFINITY,
        links: f64::INFINITY,
    };
    let mut collisions = Vec::new();
    let mut sorted: Vec<&Obstacle> = obstacles.iter().collect();
    sorted.sort_by_key(|o| o.id);
    for capsule in &model.capsules {
        if capsule.link == END_EFFECTOR_LINK {
            continue;
        }
        let (a, b) = chain.capsule_segment(capsule);
        for obs in &sorted {
            let d = capsule_to_obstacle(&a, &b, capsule.radius, obs, Surface::Raw)?.signed_distance;
            result.links = result.links.min(d);
            if d < 0.0 {
                collisions.push(Collision {
                    body: Body::Link(capsule.link),
                    obstacle_id: obs.id,
                    depth: -d,
                });
            }
        }
    }
    let e0 = chain.ee_position();
    for obs in &sorted {
        let d = point_to_obstacle(&e0, obs, Surface::Raw).signed_distance;
        result.end_effector = result.end_effector.min(d);
        if d < 0.0 {
            collisions.push(Collision {
                body: Body::EndEffector,
                obstacle_id: obs.id,
                depth: -d,
            });
        }
    }
    collisions.sort_by(|x, y| x.body.cmp(&y.body).then(x.obstacle_id.cmp(&y.obstacle_id)));
    Ok((result, collisions))
}

/// Every (body, obstacle) pair in strict penetration of a raw surface.
pub fn detect_collision(model: &ArmModel, q: &JointVector, obstacles: &[Obstacle]) -> Result<Vec<Collision>, ProximityError> {
    clearance(model, q, obstacles).map(|(_, c)| c)
}

/// One logged control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: [f64; JOINTS],
    pub qdot: [f64; JOINTS],
    pub qdot_unsaturated: [f64; JOINTS],
    pub ee_position: [f64; 3],
    /// w, x, y, z
    pub ee_orientation: [f64; 4],
    pub field_velocity: [f64; 3],
    pub modulated_velocity: [f64; 3],
    pub xdot: [f64; 6],
    pub tracking_error: [f64; 6],
    pub delta_v: f64,
    pub delta_h: f64,
    pub sigma_v: f64,
    pub v0: f64,
    /// −1 when no critical point was computed.
    pub critical_link: i64,
    pub critical_obstacle: i64,
    pub critical_distance: f64,
    pub ee_obstacle: i64,
    /// End-effector distance to the nearest margin surface.
    pub ee_distance: f64,
    /// Margin-applied Γ at the end-effector, one entry per obstacle in id order.
    pub gammas: Vec<f64>,
    pub min_ee_clearance: f64,
    pub min_link_clearance: f64,
    pub min_clearance: f64,
    pub ee_collision: bool,
    pub link_collision: bool,
    pub saturated: bool,
    /// The end-effector Jacobian was inverted with damping.
    pub task_damped: bool,
    /// The reduced critical-point row was inverted with damping.
    pub row_damped: bool,
}

impl LogRow {
    pub fn collision(&self) -> bool {
        self.ee_collision || self.link_collision
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub mode: Mode,
    pub cycles: usize,
    pub min_clearance: f64,
    pub min_ee_clearance: f64,
    pub min_link_clearance: f64,
    /// Cycles with any collision.
    pub collision_count: usize,
    pub ee_collision_count: usize,
    pub link_collision_count: usize,
    pub saturated_cycles: usize,
    /// Cycles where the end-effector Jacobian needed damping.
    pub damped_cycles: usize,
    pub final_target_error: f64,
    /// Set when the run stopped early; the rows cover the completed part.
    pub aborted: Option<String>,
}

impl Summary {
    /// 0 for a clean run, 1 when any collision occurred, 3 when aborted.
    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_some() {
            3
        } else if self.collision_count > 0 {
            1
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub obstacle_ids: Vec<u32>,
    pub rows: Vec<LogRow>,
    pub summary: Summary,
}

/// Wall-clock cost of the control steps, kept apart from the log so logs stay
/// reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timing {
    pub mean_step_seconds: f64,
    pub max_step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub timing: Timing,
}

/// Distance to the field's goal: the attractor, or the limit circle.
pub fn target_error(field: &VectorField, point: &Vector3<f64>) -> f64 {
    match field {
        VectorField::LinearAttractor { target, .. } => (point - Vector3::from(*target)).norm(),
        VectorField::LimitCycle { center, radius, .. } => {
            let rel = point - Vector3::from(*center);
            (rel.xy().norm() - radius).hypot(rel.z)
        }
    }
}

/// Recomputes the summary from rows.
pub fn summarize(scenario: &str, mode: Mode, rows: &[LogRow], field: &VectorField, aborted: Option<String>) -> Summary {
    let fold_min = |f: fn(&LogRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    let count = |f: fn(&LogRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let final_target_error = rows
        .last()
        .map(|r| target_error(field, &Vector3::from(r.ee_position)))
        .unwrap_or(f64::NAN);
    Summary {
        scenario: scenario.to_string(),
        mode,
        cycles: rows.len(),
        min_clearance: fold_min(|r| r.min_clearance),
        min_ee_clearance: fold_min(|r| r.min_ee_clearance),
        min_link_clearance: fold_min(|r| r.min_link_clearance),
        collision_count: count(LogRow::collision),
        ee_collision_count: count(|r| r.ee_collision),
        link_collision_count: count(|r| r.link_collision),
        saturated_cycles: count(|r| r.saturated),
        damped_cycles: count(|r| r.task_damped),
        final_target_error,
        aborted,
    }
}

fn array<const N: usize>(v: impl IntoIterator<Item = f64>) -> [f64; N] {
    let mut out = [0.0; N];
    for (slot, x) in out.iter_mut().zip(v) {
        *slot = x;
    }
    out
}

/// Runs a scenario in the mode it names.
pub fn run(scenario: &Scenario) -> RunOutput {
    let model = &scenario.model;
    let cfg = &scenario.controller;
    let dt = cfg.dt;
    let cycles = scenario.cycles();

    let mut scripted: Vec<_> = scenario.obstacles.clone();
    scripted.sort_by_key(|s| s.initial.id);
    let mut obstacles: Vec<Obstacle> = scripted.iter().map(|s| s.initial.clone()).collect();
    let obstacle_ids: Vec<u32> = obstacles.iter().map(|o| o.id).collect();

    let mut q = scenario.initial_q;
    let mut desired = model.ee_pose(&q);
    let mut rows = Vec::with_capacity(cycles);
    let mut aborted = None;
    let mut elapsed_total = 0.0;
    let mut elapsed_max: f64 = 0.0;

    for k in 0..cycles {
        let t = k as f64 * dt;
        for (obs, script) in obstacles.iter_mut().zip(&scripted) {
            let (v, w) = script.velocity_at(t);
            obs.linear_velocity = v;
            obs.angular_velocity = w;
        }

        let started = Instant::now();
        let step = control_step(model, &JointState::at_rest(q), &obstacles, &scenario.field, &desired, cfg, scenario.mode);
        let elapsed = started.elapsed().as_secs_f64();
        elapsed_total += elapsed;
        elapsed_max = elapsed_max.max(elapsed);

        let (out, next_desired) = match step {
            Ok(v) => v,
            Err(source) => {
                let err = match source {
                    ControlError::NonFinite => SimError::NonFiniteState { t },
                    other => SimError::Control { t, source: other },
                };
                aborted = Some(err.to_string());
                break;
            }
        };
        let (clear, collisions) = match clearance(model, &q, &obstacles) {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(SimError::from(e).to_string());
                break;
            }
        };
        let d = &out.diagnostics;
        let pose = model.ee_pose(&q);
        let quat = pose.orientation.quaternion();
        rows.push(LogRow {
            t,
            q: array(q.iter().copied()),
            qdot: array(out.qdot.iter().copied()),
            qdot_unsaturated: array(d.qdot_unsaturated.iter().copied()),
            ee_position: pose.position.into(),
            ee_orientation: [quat.w, quat.i, quat.j, quat.k],
            field_velocity: d.field_velocity.into(),
            modulated_velocity: d.modulated_velocity.into(),
            xdot: array(d.xdot.iter().copied()),
            tracking_error: array(d.tracking_error.iter().copied()),
            delta_v: d.delta_v,
            delta_h: d.delta_h,
            sigma_v: d.sigma_v,
            v0: d.v0,
            critical_link: d.critical.map_or(-1, |c| c.link as i64),
            critical_obstacle: d.critical.map_or(-1, |c| c.obstacle_id as i64),
            critical_distance: d.critical.map_or(f64::INFINITY, |c| c.distance),
            ee_obstacle: d.end_effector.map_or(-1, |c| c.obstacle_id as i64),
            ee_distance: d.end_effector.map_or(f64::INFINITY, |c| c.distance),
            gammas: obstacles.iter().map(|o| o.gamma(&pose.position, Surface::Inflated)).collect(),
            min_ee_clearance: clear.end_effector,
            min_link_clearance: clear.links,
            min_clearance: clear.min(),
            ee_collision: collisions.iter().any(|c| c.body == Body::EndEffector),
            link_collision: collisions.iter().any(|c| matches!(c.body, Body::Link(_))),
            saturated: d.saturation_scale < 1.0,
            task_damped: d.task_damped,
            row_damped: d.row_damped,
        });
        if k + 1 == cycles {
            break;
        }

        q = model.clamp_to_limits(&(q + out.qdot * dt));
        if !q.iter().all(|v| v.is_finite()) {
            aborted = Some(SimError::NonFiniteState { t: t + dt }.to_string());
            break;
        }
        desired = next_desired;
        for obs in obstacles.iter_mut() {
            *obs = obs.advanced(dt);
        }
    }

    let summary = summarize(&scenario.name, scenario.mode, &rows, &scenario.field, aborted);
    let timing = Timing {
        mean_step_seconds: if rows.is_empty() { 0.0 } else { elapsed_total / rows.len() as f64 },
        max_step_seconds: elapsed_max,
    };
    RunOutput {
        log: TrajectoryLog {
            obstacle_ids,
            rows,
            summary,
        },
        timing,
    }
}

/// Runs the scenario in another mode.
pub fn run_mode(scenario: &Scenario, mode: Mode) -> RunOutput {
    run(&scenario.clone().with_mode(mode))
}

#[derive(Debug, Error)]
pub enum LogParseError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing or unexpected column `{0}`")]
    Column(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Value { row: usize, column: String, value: String },
}

impl TrajectoryLog {
    pub fn header(&self) -> Vec<String> {
        csv_header(&self.obstacle_ids)
    }

    /// One header line plus one line per row, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut fields: Vec<String> = Vec::with_capacity(96);
            let mut num = |v: f64| fields.push(format!("{v:.16e}"));
            num(row.t);
            row.q.iter().chain(&row.qdot).chain(&row.qdot_unsaturated).for_each(|v| num(*v));
            row.ee_position.iter().chain(&row.ee_orientation).for_each(|v| num(*v));
            row.field_velocity.iter().chain(&row.modulated_velocity).for_each(|v| num(*v));
            row.xdot.iter().chain(&row.tracking_error).for_each(|v| num(*v));
            for v in [row.delta_v, row.delta_h, row.sigma_v, row.v0] {
                num(v);
            }
            fields.push(row.critical_link.to_string());
            fields.push(row.critical_obstacle.to_string());
            fields.push(format!("{:.16e}", row.critical_distance));
            fields.push(row.ee_obstacle.to_string());
            fields.push(format!("{:.16e}", row.ee_distance));
            for g in &row.gammas {
                fields.push(format!("{g:.16e}"));
            }
            for v in [row.min_ee_clearance, row.min_link_clearance, row.min_clearance] {
                fields.push(format!("{v:.16e}"));
            }
            for b in [row.collision(), row.ee_collision, row.link_collision, row.saturated, row.task_damped, row.row_damped] {
                fields.push(u8::from(b).to_string());
            }
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Reads rows written by [`TrajectoryLog::to_csv`]. The summary is
    /// recomputed from the rows.
    pub fn rows_from_csv(text: &str) -> Result<(Vec<u32>, Vec<LogRow>), LogParseError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let ids: Vec<u32> = header
            .iter()
            .filter_map(|h| h.strip_prefix("gamma_"))
            .map(|s| s.parse().map_err(|_| LogParseError::Column(format!("gamma_{s}"))))
            .collect::<Result<_, _>>()?;
        let expected = csv_header(&ids);
        if let Some((got, want)) = header.iter().zip(&expected).find(|(g, w)| g != w) {
            return Err(LogParseError::Column(format!("{got} (expected {want})")));
        }
        if header.len() != expected.len() {
            return Err(LogParseError::Column(format!("{} columns (expected {})", header.len(), expected.len())));
        }
        let mut rows = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            let values: Vec<&str> = record.iter().collect();
            if values.len() != expected.len() {
                return Err(LogParseError::Column(format!("row {r} has {} fields (expected {})", values.len(), expected.len())));
            }
            let mut cursor = 0usize;
            let mut f = |n: usize| -> Result<Vec<f64>, LogParseError> {
                let parsed = values[cursor..cursor + n]
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        v.parse::<f64>().map_err(|_| LogParseError::Value {
                            row: r,
                            column: expected[cursor + k].clone(),
                            value: v.to_string(),
                        })
                    })
                    .collect();
                cursor += n;
                parsed
            };
            let t = f(1)?[0];
            let q = array(f(JOINTS)?);
            let qdot = array(f(JOINTS)?);
            let qdot_unsaturated = array(f(JOINTS)?);
            let ee_position = array(f(3)?);
            let ee_orientation = array(f(4)?);
            let field_velocity = array(f(3)?);
            let modulated_velocity = array(f(3)?);
            let xdot = array(f(6)?);
            let tracking_error = array(f(6)?);
            let factors = f(4)?;
            let critical_link = f(1)?[0] as i64;
            let critical_obstacle = f(1)?[0] as i64;
            let critical_distance = f(1)?[0];
            let ee_obstacle = f(1)?[0] as i64;
            let ee_distance = f(1)?[0];
            let gammas = f(ids.len())?;
            let clear = f(3)?;
            let flags: Vec<bool> = f(6)?.into_iter().map(|v| v != 0.0).collect();
            rows.push(LogRow {
                t,
                q,
                qdot,
                qdot_unsaturated,
                ee_position,
                ee_orientation,
                field_velocity,
                modulated_velocity,
                xdot,
                tracking_error,
                delta_v: factors[0],
                delta_h: factors[1],
                sigma_v: factors[2],
                v0: factors[3],
                critical_link,
                critical_obstacle,
                critical_distance,
                ee_obstacle,
                ee_distance,
                gammas,
                min_ee_clearance: clear[0],
                min_link_clearance: clear[1],
                min_clearance: clear[2],
                ee_collision: flags[1],
                link_collision: flags[2],
                saturated: flags[3],
                task_damped: flags[4],
                row_damped: flags[5],
            });
        }
        Ok((ids, rows))
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// `t,x,y,z` end-effector polyline.
    pub fn ee_path_csv(&self) -> String {
        let mut out = String::from("t,x,y,z\n");
        for r in &self.rows {
            let p = r.ee_position;
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e}", r.t, p[0], p[1], p[2]);
        }
        out
    }

    /// Per-tick clearance series against the raw surfaces.
    pub fn clearance_csv(&self) -> String {
        let mut out = String::from("t,min_clearance,min_ee_clearance,min_link_clearance\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                r.t, r.min_clearance, r.min_ee_clearance, r.min_link_clearance
            );
        }
        out
    }

    /// Per-obstacle margin-applied Γ at the end-effector.
    pub fn gamma_csv(&self) -> String {
        let mut out = String::from("t");
        for id in &self.obstacle_ids {
            let _ = write!(out, ",gamma_{id}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:.16e}", r.t);
            for g in &r.gammas {
                let _ = write!(out, ",{g:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_header(ids: &[u32]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for prefix in ["q", "qdot", "qdot_raw"] {
        h.extend((0..JOINTS).map(|i| format!("{prefix}{i}")));
    }
    h.extend(["ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz"].map(String::from));
    h.extend(["f_x", "f_y", "f_z", "mod_x", "mod_y", "mod_z"].map(String::from));
    h.extend((0..6).map(|i| format!("xdot{i}")));
    h.extend((0..6).map(|i| format!("err{i}")));
    h.extend(
        [
            "delta_v",
            "delta_h",
            "sigma_v",
            "v0",
            "critical_link",
            "critical_obstacle",
            "critical_distance",
            "ee_obstacle",
            "ee_distance",
        ]
        .map(String::from),
    );
    h.extend(ids.iter().map(|id| format!("gamma_{id}")));
    h.extend(
        [
            "min_ee_clearance",
            "min_link_clearance",
            "min_clearance",
            "collision",
            "ee_collision",
            "link_collision",
            "saturated",
            "task_damped",
            "row_damped",
        ]
        .map(String::from),
    );
    h
}
