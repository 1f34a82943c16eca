//! Trajectory projection onto constraint sets.
//!
//! Two flavours live here. [`ModelBasedProjector`] solves the real problem:
//! find the nearest trajectory that is consistent with the one-step
//! prediction model and satisfies every stage constraint. [`project_pointwise`]
//! is the cheap dynamics-blind fallback that fixes up each state and action
//! in isolation.

pub mod qp;
pub mod sqp;
pub mod tighten;

use nalgebra::DVector;

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::traj::Trajectory;
use crate::{Error, Result};

pub use sqp::{FeasibleSetSpec, ModelBasedProjector, SqpOptions};
pub use tighten::tighten;

/// Outcome of a model-based projection.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub trajectory: Trajectory,
    /// Squared distance between input and output over all states and actions.
    pub cost: f64,
    /// False when the solve stalled or an inner QP failed; the trajectory is
    /// then the best iterate seen, not a certified projection.
    pub converged: bool,
    pub iterations: usize,
    /// Worst remaining constraint violation at the returned trajectory.
    pub max_violation: f64,
}

/// Moves one state the shortest distance needed to satisfy one primitive.
/// For the keep-out disk a state sitting exactly on the center is pushed
/// along +x so the result is still deterministic.
pub fn project_point(s: &mut DVector<f64>, p: &ConstraintPrimitive) {
    match p {
        ConstraintPrimitive::Halfspace { a, b } => {
            let excess = a.dot(s) - b;
            if excess > 0.0 {
                *s -= a * (excess / a.norm_squared());
            }
        }
        ConstraintPrimitive::Box { lower, upper } => {
            for i in 0..s.len() {
                s[i] = s[i].clamp(lower[i], upper[i]);
            }
        }
        ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
            let dx = s[coords.0] - center[0];
            let dy = s[coords.1] - center[1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < *radius {
                if dist < 1e-12 {
                    s[coords.0] = center[0] + radius;
                    s[coords.1] = center[1];
                } else {
                    s[coords.0] = center[0] + dx * radius / dist;
                    s[coords.1] = center[1] + dy * radius / dist;
                }
            }
        }
    }
}

/// Dynamics-blind projection: clamps every action into the box and runs each
/// state (from step 1 on; step 0 holds the measurement) through its stage's
/// primitives once, in order. With overlapping primitives only the last one
/// is guaranteed to hold afterwards, and nothing reconciles the states with
/// the actions. That weakness is the point: this is the baseline showing why
/// the model-based projection is needed.
pub fn project_pointwise(traj: &Trajectory, constraints: &StageConstraintSet) -> Result<Trajectory> {
    if constraints.rows() != traj.rows() {
        return Err(Error::ShapeMismatch(format!(
            "constraint stages {} vs trajectory rows {}",
            constraints.rows(),
            traj.rows()
        )));
    }
    if constraints.d_a() != traj.d_a() {
        return Err(Error::ShapeMismatch("action dims disagree".into()));
    }
    let mut states = traj.states.clone();
    let mut actions = traj.actions.clone();
    for r in 0..traj.rows() {
        let clamped = constraints.clamp_action(&traj.action_row(r));
        actions.row_mut(r).copy_from(&clamped.transpose());
        if r == 0 {
            continue;
        }
        let mut s = states.row(r).transpose();
        for p in &constraints.stages[r] {
            project_point(&mut s, p);
        }
        states.row_mut(r).copy_from(&s.transpose());
    }
    Trajectory::new(states, actions, traj.origin_time)
}
