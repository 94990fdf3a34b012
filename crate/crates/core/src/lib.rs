//! Robust data-driven nonlinear predictive control for discrete-time MIMO
//! plants that are full-state feedback linearizable.
//!
//! The controller never sees a model of the plant. It stores one persistently
//! exciting input/output trajectory in Hankel matrices, approximates the
//! synthetic input of the linearized dynamics with a basis-function
//! dictionary, and solves a slack-relaxed predictive control program with a
//! terminal equality constraint every `d_max` steps.
//!
//! Module map:
//!
//! * [`plant`] test plants with known relative degrees (ground truth only).
//! * [`lifting`] trajectories, lifted output-window states, Hankel matrices,
//!   persistency of excitation and noise injection.
//! * [`dictionary`] basis functions, coefficient fitting and the scalar
//!   constants the controller consumes.
//! * [`qp`] convex quadratic subproblem solver.
//! * [`npc`] assembly and SQP solution of one predictive control program.
//! * [`closedloop`] receding-horizon runs, deviation-bound checks and
//!   practical-stability summaries.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closedloop;
pub mod dictionary;
pub mod error;
pub(crate) mod linalg;
pub mod lifting;
pub mod nonfinite;
pub mod npc;
pub mod plant;
pub mod qp;
pub mod seed;

pub use error::{Error, Result};
