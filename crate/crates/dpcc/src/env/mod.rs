//! 2D reach-the-line world: a point mass commanded by desired velocity,
//! tracked by a saturated proportional servo that the planner's model does
//! not know about. That lag is the model mismatch everything downstream has
//! to absorb.
//!
//! State is s = [p; d]: actual position and the servo's setpoint. The
//! commanded action moves the setpoint; the servo chases it within one
//! control interval. In the stiff limit (k_p -> 1/t_s, no speed cap) the
//! servo lands on the setpoint exactly and the plant coincides with the
//! planner's forward-Euler model.

pub mod expert;
pub mod gamma;
pub mod suites;

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::{Error, Result};

pub use expert::generate_demos;
pub use gamma::{estimate_gamma, step_exact_mismatch, worst_case_disturbance};
pub use suites::novel_constraint_suites;

/// World geometry and plant parameters, raw units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub workspace_lower: [f64; 2],
    pub workspace_upper: [f64; 2],
    /// Crossing this line (inclusive) counts as reaching the goal.
    pub y_goal: f64,
    pub y_start: f64,
    pub t_s: f64,
    /// Servo gain chasing the setpoint, 1/s.
    pub k_p: f64,
    /// Speed cap applied to both the commanded and the servo velocity.
    pub v_max: f64,
    pub episode_cap: usize,
    /// Keep-out disk centers; two horizontal rows of three by default, so a
    /// crossing path picks one of four gaps per row.
    pub obstacles: Vec<[f64; 2]>,
    pub obstacle_radius: f64,
    /// Radius of the uniform position noise in [`step_noisy`]; 0 disables.
    pub noise_amp: f64,
    /// Fallback mismatch margin (normalized units) when none is estimated.
    pub default_margin: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            workspace_lower: [-1.0, -1.0],
            workspace_upper: [1.0, 1.0],
            y_goal: 0.9,
            y_start: -0.9,
            t_s: 0.1,
            k_p: 5.0,
            v_max: 1.0,
            episode_cap: 300,
            obstacles: vec![
                [-0.5, -0.25],
                [0.0, -0.25],
                [0.5, -0.25],
                [-0.5, 0.3],
                [0.0, 0.3],
                [0.5, 0.3],
            ],
            obstacle_radius: 0.12,
            noise_amp: 0.0,
            default_margin: 0.025,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = self.workspace_lower.iter().chain(self.workspace_upper.iter()).all(|v| v.is_finite());
        if !finite || self.workspace_lower[0] >= self.workspace_upper[0] || self.workspace_lower[1] >= self.workspace_upper[1] {
            return Err(Error::Config("workspace box is degenerate".into()));
        }
        if self.y_goal <= self.y_start || self.y_goal > self.workspace_upper[1] || self.y_start < self.workspace_lower[1] {
            return Err(Error::Config("goal line must sit above the start, inside the workspace".into()));
        }
        if !(self.t_s > 0.0) || !(self.k_p > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::Config("t_s, k_p, v_max must be positive".into()));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode cap must be positive".into()));
        }
        if !(self.obstacle_radius > 0.0) || !self.obstacle_radius.is_finite() {
            return Err(Error::Config("obstacle radius must be positive".into()));
        }
        for o in &self.obstacles {
            let inside = o[0] - self.obstacle_radius >= self.workspace_lower[0]
                && o[0] + self.obstacle_radius <= self.workspace_upper[0]
                && o[1] - self.obstacle_radius >= self.workspace_lower[1]
                && o[1] + self.obstacle_radius <= self.workspace_upper[1];
            if !inside {
                return Err(Error::Config(format!("obstacle at ({}, {}) leaves the workspace", o[0], o[1])));
            }
        }
        if !(self.noise_amp >= 0.0) || !self.noise_amp.is_finite() {
            return Err(Error::Config("noise_amp must be finite and >= 0".into()));
        }
        if !(self.default_margin >= 0.0) || !self.default_margin.is_finite() {
            return Err(Error::Config("default_margin must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn d_s(&self) -> usize {
        4
    }

    pub fn d_a(&self) -> usize {
        2
    }

    /// Distinct obstacle row heights, bottom to top.
    pub fn obstacle_rows(&self) -> Vec<f64> {
        let mut ys: Vec<f64> = Vec::new();
        for o in &self.obstacles {
            if !ys.iter().any(|y| (y - o[1]).abs() < 1e-9) {
                ys.push(o[1]);
            }
        }
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys
    }

    /// Gap center x positions for one obstacle row: midpoints between the
    /// workspace walls and the disk edges, and between consecutive disks.
    pub fn row_gaps(&self, row_y: f64) -> Vec<f64> {
        let mut xs: Vec<f64> = self
            .obstacles
            .iter()
            .filter(|o| (o[1] - row_y).abs() < 1e-9)
            .map(|o| o[0])
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let r = self.obstacle_radius;
        let mut gaps = Vec::with_capacity(xs.len() + 1);
        let mut left_edge = self.workspace_lower[0];
        for &x in &xs {
            gaps.push(0.5 * (left_edge + (x - r)));
            left_edge = x + r;
        }
        gaps.push(0.5 * (left_edge + self.workspace_upper[0]));
        gaps
    }

    /// Number of distinct crossing routes: one gap choice per obstacle row.
    pub fn route_count(&self) -> usize {
        self.obstacle_rows().iter().map(|&y| self.row_gaps(y).len()).product()
    }

    /// Whether an actual position collides with a training obstacle.
    pub fn collides(&self, p: &Vector2<f64>) -> bool {
        self.obstacles.iter().any(|o| {
            let dx = p.x - o[0];
            let dy = p.y - o[1];
            dx * dx + dy * dy < self.obstacle_radius * self.obstacle_radius
        })
    }

    pub fn in_workspace(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.workspace_lower[0]
            && p.x <= self.workspace_upper[0]
            && p.y >= self.workspace_lower[1]
            && p.y <= self.workspace_upper[1]
    }

    /// The training constraint field as a stage set: workspace box and
    /// keep-out disks on the actual-position coordinates, uniformly over
    /// the window. Action bounds come from the caller (the demo bounding
    /// box once a dataset exists).
    pub fn training_constraints(
        &self,
        rows: usize,
        action_lower: DVector<f64>,
        action_upper: DVector<f64>,
    ) -> Result<StageConstraintSet> {
        let mut prims = Vec::with_capacity(self.obstacles.len() + 1);
        prims.push(ConstraintPrimitive::Box {
            lower: DVector::from_vec(vec![
                self.workspace_lower[0],
                self.workspace_lower[1],
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ]),
            upper: DVector::from_vec(vec![
                self.workspace_upper[0],
                self.workspace_upper[1],
                f64::INFINITY,
                f64::INFINITY,
            ]),
        });
        for o in &self.obstacles {
            prims.push(ConstraintPrimitive::AvoidDisk {
                center: *o,
                radius: self.obstacle_radius,
                coords: (0, 1),
            });
        }
        StageConstraintSet::uniform(prims, rows, action_lower, action_upper)
    }
}

/// Plant state: actual position, servo setpoint, and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub p: Vector2<f64>,
    pub d: Vector2<f64>,
    pub steps: usize,
}

impl EnvState {
    /// At-rest start: setpoint on the actual position.
    pub fn start(x: f64, y: f64) -> Self {
        Self { p: Vector2::new(x, y), d: Vector2::new(x, y), steps: 0 }
    }

    /// Stacked state [p; d] the model and constraints operate on.
    pub fn s_vec(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.p.x, self.p.y, self.d.x, self.d.y])
    }

    pub fn from_s_vec(s: &DVector<f64>, steps: usize) -> Self {
        debug_assert_eq!(s.len(), 4);
        Self { p: Vector2::new(s[0], s[1]), d: Vector2::new(s[2], s[3]), steps }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.d.iter()).all(|v| v.is_finite())
    }
}

fn clamp_speed(v: Vector2<f64>, cap: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

/// One plant step. The setpoint integrates the (speed-capped) command
/// first; the servo then chases the updated setpoint for one interval.
/// Chasing the fresh setpoint is what makes the stiff-servo limit coincide
/// with the planner's Euler model (see the module docs).
pub fn step(cfg: &EnvConfig, state: &EnvState, a: &Vector2<f64>) -> EnvState {
    let cmd = clamp_speed(*a, cfg.v_max);
    let d_next = state.d + cmd * cfg.t_s;
    let chase = clamp_speed((d_next - state.p) * cfg.k_p, cfg.v_max);
    let p_next = state.p + chase * cfg.t_s;
    EnvState { p: p_next, d: d_next, steps: state.steps + 1 }
}

/// [`step`] plus uniform position noise of radius `noise_amp`.
pub fn step_noisy(cfg: &EnvConfig, state: &EnvState, a: &Vector2<f64>, rng: &mut ChaCha8Rng) -> EnvState {
    let mut next = step(cfg, state, a);
    if cfg.noise_amp > 0.0 {
        // Rejection-sampled uniform draw from the disk.
        let w = loop {
            let x: f64 = rng.gen_range(-1.0..=1.0);
            let y: f64 = rng.gen_range(-1.0..=1.0);
            if x * x + y * y <= 1.0 {
                break Vector2::new(x, y) * cfg.noise_amp;
            }
        };
        next.p += w;
    }
    next
}

/// Reach-the-line indicator, closed at the boundary.
pub fn goal_reached(cfg: &EnvConfig, state: &EnvState) -> bool {
    state.p.y >= cfg.y_goal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NominalDynamics;

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = EnvConfig::default();
        c.obstacles.push([0.95, 0.0]); // pokes out of the workspace
        assert!(c.validate().is_err());
        let mut c = EnvConfig::default();
        c.y_goal = -0.95;
        assert!(c.validate().is_err());
        let mut c = EnvConfig::default();
        c.t_s = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let cfg = EnvConfig::default();
        let s = EnvState::start(0.2, -0.9);
        let next = step(&cfg, &s, &Vector2::zeros());
        assert_eq!(next.p, s.p);
        assert_eq!(next.d, s.d);
        assert_eq!(next.steps, 1);
    }

    #[test]
    fn stiff_servo_reproduces_the_planner_model() {
        // k_p = 1/t_s with no speed cap lands the servo on the fresh
        // setpoint, so from an at-rest start the plant IS the Euler model.
        let mut cfg = EnvConfig::default();
        cfg.k_p = 1.0 / cfg.t_s;
        cfg.v_max = f64::INFINITY;
        let model = NominalDynamics::new(4, 2, cfg.t_s).unwrap();
        let mut state = EnvState::start(0.1, -0.9);
        for i in 0..20 {
            let a = Vector2::new(0.3 * (i as f64 * 0.7).sin(), 0.4);
            let want = model.step(&state.s_vec(), &DVector::from_vec(vec![a.x, a.y]));
            state = step(&cfg, &state, &a);
            assert!((state.s_vec() - want).norm() < 1e-14);
        }
    }

    #[test]
    fn lagged_servo_differs_from_the_model() {
        let cfg = EnvConfig::default();
        let model = NominalDynamics::new(4, 2, cfg.t_s).unwrap();
        let state = EnvState::start(0.0, -0.9);
        let a = Vector2::new(0.0, 0.45);
        let next = step(&cfg, &state, &a);
        let want = model.step(&state.s_vec(), &DVector::from_vec(vec![0.0, 0.45]));
        // Setpoint row matches the model, actual position lags behind.
        assert!((next.d.y - want[3]).abs() < 1e-15);
        assert!(next.p.y < want[1]);
    }

    #[test]
    fn one_step_hand_arithmetic() {
        // p=(0,0), d=(0.1,0), a=0, k_p=1, t_s=0.1: servo covers a tenth of
        // the 0.1 offset.
        let mut cfg = EnvConfig::default();
        cfg.k_p = 1.0;
        let state = EnvState { p: Vector2::zeros(), d: Vector2::new(0.1, 0.0), steps: 0 };
        let next = step(&cfg, &state, &Vector2::zeros());
        assert!((next.p - Vector2::new(0.01, 0.0)).norm() < 1e-15);
        assert_eq!(next.d, state.d);
    }

    #[test]
    fn command_and_servo_respect_the_speed_cap() {
        let cfg = EnvConfig::default();
        let state = EnvState { p: Vector2::new(-0.5, -0.5), d: Vector2::new(0.5, 0.5), steps: 0 };
        let next = step(&cfg, &state, &Vector2::new(30.0, 40.0));
        // Setpoint moved by at most v_max * t_s, likewise the position.
        assert!((next.d - state.d).norm() <= cfg.v_max * cfg.t_s + 1e-12);
        assert!((next.p - state.p).norm() <= cfg.v_max * cfg.t_s + 1e-12);
    }

    #[test]
    fn goal_boundary_is_closed() {
        let cfg = EnvConfig::default();
        let mut s = EnvState::start(0.0, 0.9);
        assert!(goal_reached(&cfg, &s));
        s.p.y = 0.9 - 1e-9;
        assert!(!goal_reached(&cfg, &s));
        assert!(!goal_reached(&cfg, &EnvState::start(0.0, -0.9)));
    }

    #[test]
    fn default_field_has_sixteen_routes() {
        let cfg = EnvConfig::default();
        assert_eq!(cfg.obstacle_rows(), vec![-0.25, 0.3]);
        assert_eq!(cfg.route_count(), 16);
        let gaps = cfg.row_gaps(-0.25);
        assert_eq!(gaps.len(), 4);
        // Outer gaps midway between wall and disk edge, inner between edges.
        assert!((gaps[0] - -0.81).abs() < 1e-12);
        assert!((gaps[1] - -0.25).abs() < 1e-12);
        assert!((gaps[2] - 0.25).abs() < 1e-12);
        assert!((gaps[3] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn collision_and_workspace_checks() {
        let cfg = EnvConfig::default();
        assert!(cfg.collides(&Vector2::new(0.0, -0.25)));
        assert!(cfg.collides(&Vector2::new(0.11, -0.25)));
        assert!(!cfg.collides(&Vector2::new(0.13, -0.25)));
        assert!(cfg.in_workspace(&Vector2::new(1.0, -1.0)));
        assert!(!cfg.in_workspace(&Vector2::new(1.01, 0.0)));
    }

    #[test]
    fn noise_respects_the_amplitude() {
        let mut cfg = EnvConfig::default();
        cfg.noise_amp = 0.03;
        let state = EnvState::start(0.0, 0.0);
        let mut rng = crate::rng::stream(5);
        for _ in 0..200 {
            let clean = step(&cfg, &state, &Vector2::new(0.1, 0.1));
            let noisy = step_noisy(&cfg, &state, &Vector2::new(0.1, 0.1), &mut rng);
            assert!((noisy.p - clean.p).norm() <= cfg.noise_amp + 1e-12);
            assert_eq!(noisy.d, clean.d);
        }
    }

    #[test]
    fn training_constraints_cover_obstacles_and_walls() {
        let cfg = EnvConfig::default();
        let set = cfg
            .training_constraints(
                3,
                DVector::from_vec(vec![-0.45, -0.45]),
                DVector::from_vec(vec![0.45, 0.45]),
            )
            .unwrap();
        set.validate(4).unwrap();
        assert_eq!(set.rows(), 3);
        assert_eq!(set.stages[0].len(), 7);
        // A point inside an obstacle violates, a free point does not.
        let bad = DVector::from_vec(vec![0.0, -0.25, 0.0, -0.25]);
        assert!(set.stage_violation(1, &bad) > 0.1);
        let ok = DVector::from_vec(vec![-0.25, -0.25, -0.25, -0.25]);
        assert_eq!(set.stage_violation(1, &ok), 0.0);
        // Setpoint coordinates are unconstrained by the box.
        let wild_d = DVector::from_vec(vec![0.25, 0.0, 9.0, -9.0]);
        assert_eq!(set.stage_violation(1, &wild_d), 0.0);
    }
}
