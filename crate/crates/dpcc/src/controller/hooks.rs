//! Denoising-loop interventions: projection and gradient guidance.

use nalgebra::DMatrix;

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::diffusion::DenoiseHook;
use crate::projection::{project_pointwise, ModelBasedProjector};
use crate::schedule::NoiseSchedule;
use crate::traj::Trajectory;

/// Projects every denoising iterate onto the feasible set and accumulates the
/// squared projection distances, which double as the plan-selection cost.
/// A stalled solve falls back to the pointwise cleanup of its best iterate,
/// counted in `nonconverged`.
pub struct ProjectHook<'a> {
    projector: &'a ModelBasedProjector,
    pub cumulative_cost: f64,
    pub calls: usize,
    pub nonconverged: usize,
}

impl<'a> ProjectHook<'a> {
    pub fn new(projector: &'a ModelBasedProjector) -> Self {
        Self { projector, cumulative_cost: 0.0, calls: 0, nonconverged: 0 }
    }
}

impl DenoiseHook for ProjectHook<'_> {
    fn after_step(&mut self, _k: usize, tau: Trajectory) -> Trajectory {
        self.calls += 1;
        let out = match self.projector.project(&tau) {
            Ok(res) if res.converged => res.trajectory,
            Ok(res) => {
                self.nonconverged += 1;
                project_pointwise(&res.trajectory, &self.projector.spec().constraints)
                    .unwrap_or(res.trajectory)
            }
            Err(_) => {
                self.nonconverged += 1;
                match project_pointwise(&tau, &self.projector.spec().constraints) {
                    Ok(fixed) => fixed,
                    Err(_) => return tau,
                }
            }
        };
        self.cumulative_cost += tau.sq_distance(&out);
        out
    }
}

/// Dynamics-blind variant: every iterate gets the cheap pointwise cleanup.
pub struct PointwiseHook<'a> {
    constraints: &'a StageConstraintSet,
    pub calls: usize,
}

impl<'a> PointwiseHook<'a> {
    pub fn new(constraints: &'a StageConstraintSet) -> Self {
        Self { constraints, calls: 0 }
    }
}

impl DenoiseHook for PointwiseHook<'_> {
    fn after_step(&mut self, _k: usize, tau: Trajectory) -> Trajectory {
        self.calls += 1;
        match project_pointwise(&tau, self.constraints) {
            Ok(fixed) => fixed,
            Err(_) => tau,
        }
    }
}

/// Squared-hinge constraint penalty over a trajectory: states from step 1 on
/// against their stage's primitives, every action row against the box.
pub fn constraint_penalty(tau: &Trajectory, set: &StageConstraintSet) -> f64 {
    let mut acc = 0.0;
    for i in 1..tau.rows() {
        let s = tau.state_row(i);
        for p in &set.stages[i] {
            match p {
                ConstraintPrimitive::Halfspace { a, b } => {
                    let v = (a.dot(&s) - b).max(0.0);
                    acc += v * v;
                }
                ConstraintPrimitive::Box { lower, upper } => {
                    for d in 0..s.len() {
                        let over = (s[d] - upper[d]).max(0.0);
                        let under = (lower[d] - s[d]).max(0.0);
                        acc += over * over + under * under;
                    }
                }
                ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
                    let dx = s[coords.0] - center[0];
                    let dy = s[coords.1] - center[1];
                    let v = (radius - (dx * dx + dy * dy).sqrt()).max(0.0);
                    acc += v * v;
                }
            }
        }
    }
    for r in 0..tau.rows() {
        let a = tau.action_row(r);
        for d in 0..a.len() {
            let over = (a[d] - set.action_upper[d]).max(0.0);
            let under = (set.action_lower[d] - a[d]).max(0.0);
            acc += over * over + under * under;
        }
    }
    acc
}

/// Gradient of [`constraint_penalty`] with respect to every state and action
/// entry. The squared hinge is differentiable everywhere; the keep-out disk
/// has no defined direction at its exact center, where zero is returned.
pub fn constraint_penalty_gradient(
    tau: &Trajectory,
    set: &StageConstraintSet,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut gs = DMatrix::zeros(tau.rows(), tau.d_s());
    let mut ga = DMatrix::zeros(tau.rows(), tau.d_a());
    for i in 1..tau.rows() {
        let s = tau.state_row(i);
        for p in &set.stages[i] {
            match p {
                ConstraintPrimitive::Halfspace { a, b } => {
                    let v = (a.dot(&s) - b).max(0.0);
                    if v > 0.0 {
                        for d in 0..s.len() {
                            gs[(i, d)] += 2.0 * v * a[d];
                        }
                    }
                }
                ConstraintPrimitive::Box { lower, upper } => {
                    for d in 0..s.len() {
                        gs[(i, d)] += 2.0 * (s[d] - upper[d]).max(0.0);
                        gs[(i, d)] -= 2.0 * (lower[d] - s[d]).max(0.0);
                    }
                }
                ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
                    let dx = s[coords.0] - center[0];
                    let dy = s[coords.1] - center[1];
                    let dist = (dx * dx + dy * dy).sqrt();
                    let v = (radius - dist).max(0.0);
                    if v > 0.0 && dist > 1e-9 {
                        gs[(i, coords.0)] -= 2.0 * v * dx / dist;
                        gs[(i, coords.1)] -= 2.0 * v * dy / dist;
                    }
                }
            }
        }
    }
    for r in 0..tau.rows() {
        let a = tau.action_row(r);
        for d in 0..a.len() {
            ga[(r, d)] += 2.0 * (a[d] - set.action_upper[d]).max(0.0);
            ga[(r, d)] -= 2.0 * (set.action_lower[d] - a[d]).max(0.0);
        }
    }
    (gs, ga)
}

/// Nudges each posterior mean down the penalty gradient, scaled by the step's
/// posterior variance, so corrections fade as the chain sharpens and vanish
/// at the deterministic final step.
pub struct GuidanceHook<'a> {
    constraints: &'a StageConstraintSet,
    sched: &'a NoiseSchedule,
    lambda: f64,
}

impl<'a> GuidanceHook<'a> {
    pub fn new(constraints: &'a StageConstraintSet, sched: &'a NoiseSchedule, lambda: f64) -> Self {
        Self { constraints, sched, lambda }
    }
}

impl DenoiseHook for GuidanceHook<'_> {
    fn adjust_mean(&mut self, k: usize, mut mu: Trajectory) -> Trajectory {
        let sigma = self.sched.sigma_k(k);
        let scale = self.lambda * sigma * sigma;
        if scale == 0.0 {
            return mu;
        }
        let (gs, ga) = constraint_penalty_gradient(&mu, self.constraints);
        mu.states -= gs * scale;
        mu.actions -= ga * scale;
        mu
    }
}
