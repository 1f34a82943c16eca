//! Mismatch bound estimation and the worst-case disturbance plant used to
//! stress the tightening margin.

use nalgebra::{DVector, Vector2};

use crate::constraint::ConstraintPrimitive;
use crate::dynamics::NominalDynamics;
use crate::normalize::Normalizer;
use crate::{Error, Result};

use super::{EnvConfig, EnvState};

/// Margin estimate from recorded rollouts: the largest normalized gap
/// between an observed transition and the planner model's prediction,
/// inflated by `safety`. Traces are (states, actions) row-per-step in raw
/// units, actions aligned with the state they were issued from.
pub fn estimate_gamma(
    traces: &[(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)],
    nominal: &NominalDynamics,
    normalizer: &Normalizer,
    safety: f64,
) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    if !(safety >= 1.0) || !safety.is_finite() {
        return Err(Error::InvalidArgument("safety factor must be finite and >= 1".into()));
    }
    let mut worst: f64 = 0.0;
    for (states, actions) in traces {
        if states.nrows() != actions.nrows() || states.ncols() != nominal.d_s || actions.ncols() != nominal.d_a {
            return Err(Error::ShapeMismatch("trace dims disagree with the model".into()));
        }
        for t in 0..states.nrows().saturating_sub(1) {
            let s = states.row(t).transpose();
            let a = actions.row(t).transpose();
            let predicted = nominal.step(&s, &a);
            let observed = states.row(t + 1).transpose();
            let w = normalizer.normalize_state(&observed) - normalizer.normalize_state(&predicted);
            worst = worst.max(w.norm());
        }
    }
    Ok(safety * worst)
}

/// Unit direction (in normalized state space) pointing from `s_norm`
/// toward the nearest constraint boundary, i.e. the push a bounded
/// adversary should spend its budget on. `None` when no primitive gives a
/// finite direction.
pub fn worst_case_disturbance(
    s_norm: &DVector<f64>,
    primitives: &[ConstraintPrimitive],
) -> Option<DVector<f64>> {
    let n = s_norm.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut consider = |margin: f64, dir: DVector<f64>| {
        if !margin.is_finite() {
            return;
        }
        if best.as_ref().map_or(true, |(m, _)| margin < *m) {
            best = Some((margin, dir));
        }
    };
    for p in primitives {
        match p {
            ConstraintPrimitive::Halfspace { a, b } => {
                let norm = a.norm();
                if norm > 1e-12 {
                    consider((b - a.dot(s_norm)) / norm, a / norm);
                }
            }
            ConstraintPrimitive::Box { lower, upper } => {
                for d in 0..n {
                    if upper[d].is_finite() {
                        let mut e = DVector::zeros(n);
                        e[d] = 1.0;
                        consider(upper[d] - s_norm[d], e);
                    }
                    if lower[d].is_finite() {
                        let mut e = DVector::zeros(n);
                        e[d] = -1.0;
                        consider(s_norm[d] - lower[d], e);
                    }
                }
            }
            ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
                let dx = s_norm[coords.0] - center[0];
                let dy = s_norm[coords.1] - center[1];
                let dist = (dx * dx + dy * dy).sqrt();
                let mut dir = DVector::zeros(n);
                if dist > 1e-9 {
                    dir[coords.0] = -dx / dist;
                    dir[coords.1] = -dy / dist;
                } else {
                    // At the center every direction is equally deep; pick +x.
                    dir[coords.0] = 1.0;
                }
                consider(dist - radius, dir);
            }
        }
    }
    best.map(|(_, dir)| dir)
}

/// Plant step that replaces the servo lag with an exact adversarial
/// mismatch: the next state is the planner model's prediction plus a
/// disturbance of normalized norm exactly `gamma`, aimed at the nearest
/// constraint boundary. This realizes the worst case the tightening margin
/// is supposed to absorb.
pub fn step_exact_mismatch(
    cfg: &EnvConfig,
    state: &EnvState,
    a: &Vector2<f64>,
    nominal: &NominalDynamics,
    normalizer: &Normalizer,
    primitives: &[ConstraintPrimitive],
    gamma: f64,
) -> EnvState {
    let cmd = super::clamp_speed(*a, cfg.v_max);
    let predicted = nominal.step(&state.s_vec(), &DVector::from_vec(vec![cmd.x, cmd.y]));
    let pred_norm = normalizer.normalize_state(&predicted);
    let mut next = predicted;
    if gamma > 0.0 {
        if let Some(dir) = worst_case_disturbance(&pred_norm, primitives) {
            // Per-dimension half-ranges turn the normalized push back into
            // raw units.
            for i in 0..next.len() {
                let (c, _) = normalizer.state_scale(i);
                next[i] += gamma * dir[i] * c;
            }
        }
    }
    EnvState::from_s_vec(&next, state.steps + 1)
}
