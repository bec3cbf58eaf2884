//! Real-time whole-body obstacle avoidance for 7-DOF redundant manipulators.
//!
//! The end-effector follows a dynamical system that is modulated around
//! moving convex obstacles, while the rest of the arm is pushed clear through
//! null-space joint velocities at the point closest to an obstacle.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod batch;
pub mod controller;
pub mod field;
pub mod kinematics;
pub mod modulation;
pub mod obstacle;
pub mod proximity;
pub mod scenario;
pub mod sim;
