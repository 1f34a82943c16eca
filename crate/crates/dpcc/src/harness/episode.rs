//! One closed-loop episode: a controller wired to a plant, stepped until
//! the goal line or the step cap, with every visited state logged so the
//! violation count can be recomputed from the record alone.

use nalgebra::{DVector, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::StageConstraintSet;
use crate::controller::{Controller, ControllerOptions, Method};
use crate::diffusion::Checkpoint;
use crate::dynamics::NominalDynamics;
use crate::env::{self, EnvConfig, EnvState};
use crate::normalize::Normalizer;
use crate::projection::{tighten, SqpOptions};
use crate::rng;
use crate::{Error, Result};

/// A visited state counts as violating when its normalized violation of the
/// true constraint set exceeds this.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Clearance (normalized units) a start state must have from every suite
/// boundary. Keeping the plan feasible step over step presumes a feasible
/// first state, and the controller erodes the set by its mismatch margin,
/// so starts are drawn strictly inside by more than any margin in use.
pub const START_PAD: f64 = 0.05;

/// Which plant the controller is wired to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantMode {
    /// The lagged-servo plant, with the config's position noise if any.
    Servo,
    /// The planner's own model plus a worst-case disturbance of normalized
    /// norm [`EpisodeOptions::disturbance`], aimed at the nearest constraint
    /// boundary. This realizes exactly the error budget the tightening
    /// margin is meant to absorb, so it is the sharpest test of it.
    ExactMismatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub method: Method,
    /// Tightening margin in normalized units; 0 runs untightened. Ignored
    /// by methods that do not handle constraints.
    pub margin: f64,
    /// Scales the planner model's step length; the plant is untouched.
    pub mismatch_factor: f64,
    pub lambda: f64,
    pub batch: usize,
    /// Seeds the start position, the controller, and the plant noise.
    pub seed: u64,
    pub plant: PlantMode,
    /// Disturbance norm for [`PlantMode::ExactMismatch`]; ignored otherwise.
    pub disturbance: f64,
    pub sqp: SqpOptions,
    /// Grid tags copied verbatim into the record.
    pub train_seed: u64,
    pub test_seed: u64,
    pub suite_index: usize,
}

impl EpisodeOptions {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            margin: 0.0,
            mismatch_factor: 1.0,
            lambda: 1.0,
            batch: 4,
            seed,
            plant: PlantMode::Servo,
            disturbance: 0.0,
            sqp: SqpOptions::default(),
            train_seed: 0,
            test_seed: 0,
            suite_index: 0,
        }
    }
}

/// Everything measured in one episode. `states` holds every visited state
/// (start included) and `actions` the command issued at each of them, so
/// the whole episode can be replayed and the metrics recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: Method,
    /// Whether a tightening margin was actually in force.
    pub tightening: bool,
    pub mismatch: f64,
    pub train_seed: u64,
    pub test_seed: u64,
    pub suite: usize,
    pub seed: u64,
    /// Plant steps taken; the cap when the goal was missed.
    pub timesteps: usize,
    pub goal: bool,
    pub constraints_and_goal: bool,
    /// Steps whose landed state violated the true set beyond
    /// [`VIOLATION_TOL`] in normalized units. The start state is given to
    /// the controller, not caused by it, so it is not counted.
    pub violation_steps: usize,
    pub max_violation: f64,
    pub controller_failures: usize,
    /// Candidate plans drawn over the episode, and how many of them ended
    /// farther than [`VIOLATION_TOL`] from the set the controller enforces.
    pub candidates: usize,
    pub candidates_violating: usize,
    pub projection_calls: usize,
    pub nonconverged_calls: usize,
    /// Mean controller wall-clock per step. In-memory only: wall time is
    /// not deterministic, so it stays out of the serialized record.
    #[serde(skip)]
    pub mean_step_ms: f64,
    pub states: Vec<[f64; 4]>,
    pub actions: Vec<[f64; 2]>,
}

fn pack_state(s: &EnvState) -> [f64; 4] {
    [s.p.x, s.p.y, s.d.x, s.d.y]
}

/// Draws a start from the spawn band, rejecting positions closer than
/// [`START_PAD`] to a boundary of the (normalized) true set. The draw
/// depends on the seed and the suite but not on the method, so every
/// controller variant sees the same start for a given seed.
fn sample_start(
    env_cfg: &EnvConfig,
    truth: &StageConstraintSet,
    normalizer: &Normalizer,
    seed: u64,
) -> Result<EnvState> {
    let padded = tighten(truth, START_PAD)?;
    let mut rng = rng::substream(rng::mix(&[seed]), "start", 0);
    for _ in 0..1000 {
        let state = EnvState::start(rng.gen_range(-0.6..=0.6), env_cfg.y_start);
        if padded.stage_violation(0, &normalizer.normalize_state(&state.s_vec())) <= 0.0 {
            return Ok(state);
        }
    }
    Err(Error::Config("the spawn band has no start clear of the constraint suite".into()))
}

/// Runs one episode of `opts.method` against `suite` (the true constraint
/// set, raw units). The controller plans against the suite, tightened by
/// `opts.margin`; violations are measured against the suite as given.
pub fn run_episode(
    ckpt: &Checkpoint,
    env_cfg: &EnvConfig,
    suite: &StageConstraintSet,
    opts: &EpisodeOptions,
) -> Result<EpisodeRecord> {
    env_cfg.validate()?;
    if ckpt.d_s != env_cfg.d_s() || ckpt.d_a != env_cfg.d_a() {
        return Err(Error::ShapeMismatch("checkpoint dims do not fit the environment".into()));
    }
    if !opts.disturbance.is_finite() || opts.disturbance < 0.0 {
        return Err(Error::InvalidArgument("disturbance must be finite and >= 0".into()));
    }
    if !opts.mismatch_factor.is_finite() || opts.mismatch_factor <= 0.0 {
        return Err(Error::InvalidArgument("mismatch_factor must be positive".into()));
    }

    let nominal = NominalDynamics::new(ckpt.d_s, ckpt.d_a, env_cfg.t_s)?;
    let margin = if opts.method.handles_constraints() { opts.margin } else { 0.0 };
    let mut copts = ControllerOptions::new(opts.method, opts.seed);
    copts.batch = opts.batch;
    copts.lambda = opts.lambda;
    copts.margin = margin;
    copts.model_time_scale = opts.mismatch_factor;
    copts.sqp = opts.sqp;
    let mut controller = Controller::new(ckpt, suite, &nominal, copts)?;

    // Violations are scored in normalized units. The suites are uniform
    // over the planning window, so stage 0 stands for the per-step set.
    let truth = ckpt.normalizer.normalize_constraints(suite)?;

    let mut plant_rng = rng::substream(rng::mix(&[opts.seed]), "plant", 0);
    let mut state = sample_start(env_cfg, &truth, &ckpt.normalizer, opts.seed)?;

    let mut states = vec![pack_state(&state)];
    let mut actions: Vec<[f64; 2]> = Vec::new();
    let mut violation_steps = 0usize;
    let mut max_violation = 0f64;
    let mut controller_failures = 0usize;
    let mut candidates = 0usize;
    let mut candidates_violating = 0usize;
    let mut projection_calls = 0usize;
    let mut nonconverged_calls = 0usize;
    let mut ms_total = 0f64;
    let mut controller_steps = 0usize;

    let goal = loop {
        if env::goal_reached(env_cfg, &state) {
            break true;
        }
        if state.steps >= env_cfg.episode_cap {
            break false;
        }
        let a = match controller.control_step(&state.s_vec()) {
            Ok((a, diag)) => {
                candidates += diag.candidate_violations.len();
                candidates_violating +=
                    diag.candidate_violations.iter().filter(|&&v| v > VIOLATION_TOL).count();
                projection_calls += diag.projection_calls;
                nonconverged_calls += diag.nonconverged;
                ms_total += diag.elapsed_ms;
                controller_steps += 1;
                a
            }
            // Hold position and keep going; the failure stays on the record.
            Err(_) => {
                controller_failures += 1;
                DVector::zeros(ckpt.d_a)
            }
        };
        let cmd = Vector2::new(a[0], a[1]);
        state = match opts.plant {
            PlantMode::Servo => env::step_noisy(env_cfg, &state, &cmd, &mut plant_rng),
            PlantMode::ExactMismatch => env::step_exact_mismatch(
                env_cfg,
                &state,
                &cmd,
                &nominal,
                &ckpt.normalizer,
                &truth.stages[0],
                opts.disturbance,
            ),
        };
        if !state.is_finite() {
            break false;
        }
        actions.push([cmd.x, cmd.y]);
        states.push(pack_state(&state));
        let v = truth.stage_violation(0, &ckpt.normalizer.normalize_state(&state.s_vec()));
        if v > VIOLATION_TOL {
            violation_steps += 1;
        }
        max_violation = max_violation.max(v);
    };

    let timesteps = if goal { state.steps } else { env_cfg.episode_cap };
    Ok(EpisodeRecord {
        method: opts.method,
        tightening: margin > 0.0,
        mismatch: opts.mismatch_factor,
        train_seed: opts.train_seed,
        test_seed: opts.test_seed,
        suite: opts.suite_index,
        seed: opts.seed,
        timesteps,
        goal,
        constraints_and_goal: goal && violation_steps == 0,
        violation_steps,
        max_violation,
        controller_failures,
        candidates,
        candidates_violating,
        projection_calls,
        nonconverged_calls,
        mean_step_ms: if controller_steps > 0 { ms_total / controller_steps as f64 } else { 0.0 },
        states,
        actions,
    })
}
