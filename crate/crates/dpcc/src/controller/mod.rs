//! Receding-horizon control on top of the trajectory sampler.
//!
//! Each control step draws a batch of candidate plans conditioned on the
//! measured state, optionally intervening in the reverse process (projection,
//! guidance, pointwise cleanup), picks one plan, and returns its first action.
//! All sampling noise derives from (seed, step, chain index), so a rollout is
//! a pure function of the seed and the measured states it was fed.

pub mod hooks;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraint::StageConstraintSet;
use crate::diffusion::{sample_chain, Checkpoint, DenoiserNet, NoHook};
use crate::dynamics::NominalDynamics;
use crate::normalize::Normalizer;
use crate::projection::{
    project_pointwise, tighten, FeasibleSetSpec, ModelBasedProjector, SqpOptions,
};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::traj::Trajectory;
use crate::{Error, Result};

use hooks::{GuidanceHook, PointwiseHook, ProjectHook};

/// Plan-generation and selection strategy for one controller instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Project every denoising iterate, pick a candidate at random.
    DpccR,
    /// Project every iterate, pick the candidate closest to the previous
    /// plan shifted by one step.
    DpccT,
    /// Project every iterate, pick the candidate with the smallest
    /// accumulated projection cost.
    DpccC,
    /// Plain sampling, no constraint handling at all.
    Diffuser,
    /// Gradient guidance on the posterior means, no projection.
    Guidance,
    /// Plain sampling, then one projection of the finished plan.
    PostProcessing,
    /// Pointwise (dynamics-blind) cleanup of every iterate.
    ModelFree,
}

impl Method {
    pub fn all() -> [Method; 7] {
        [
            Method::DpccR,
            Method::DpccT,
            Method::DpccC,
            Method::Diffuser,
            Method::Guidance,
            Method::PostProcessing,
            Method::ModelFree,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DpccR => "dpcc-r",
            Method::DpccT => "dpcc-t",
            Method::DpccC => "dpcc-c",
            Method::Diffuser => "diffuser",
            Method::Guidance => "guidance",
            Method::PostProcessing => "post-processing",
            Method::ModelFree => "model-free",
        }
    }

    /// Whether the method runs the model-based projector.
    pub fn uses_projector(&self) -> bool {
        matches!(self, Method::DpccR | Method::DpccT | Method::DpccC | Method::PostProcessing)
    }

    /// Whether the method reacts to the constraint margin at all.
    pub fn handles_constraints(&self) -> bool {
        !matches!(self, Method::Diffuser)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerOptions {
    pub method: Method,
    /// Candidate plans per control step.
    pub batch: usize,
    pub seed: u64,
    /// Guidance strength (only read by [`Method::Guidance`]).
    pub lambda: f64,
    /// Constraint margin in normalized units; 0 disables tightening.
    pub margin: f64,
    /// Scales the step length the planner's dynamics assume, leaving the
    /// plant untouched. 1 is a matched model.
    pub model_time_scale: f64,
    pub sqp: SqpOptions,
}

impl ControllerOptions {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            batch: 4,
            seed,
            lambda: 1.0,
            margin: 0.0,
            model_time_scale: 1.0,
            sqp: SqpOptions::default(),
        }
    }
}

/// Per-step record of what the controller did, for logs and tests.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub t: i64,
    pub chosen: usize,
    /// Accumulated projection cost per candidate (empty unless the method
    /// projects every iterate).
    pub candidate_costs: Vec<f64>,
    /// Worst constraint violation of each finished candidate against the
    /// set the controller enforces (tightened when a margin is active).
    pub candidate_violations: Vec<f64>,
    pub projection_calls: usize,
    pub nonconverged: usize,
    /// Violation of the chosen plan against the enforced set.
    pub plan_violation: f64,
    /// Whether the previous plan, re-anchored on the measurement, replaced a
    /// batch whose repairs all failed.
    pub fallback_plan: bool,
    pub elapsed_ms: f64,
}

pub struct Controller {
    net: DenoiserNet,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    rows: usize,
    d_s: usize,
    d_a: usize,
    /// Normalized constraint set the controller enforces. Tightened by the
    /// margin when one is set.
    set: StageConstraintSet,
    projector: Option<ModelBasedProjector>,
    raw_action_lower: DVector<f64>,
    raw_action_upper: DVector<f64>,
    opts: ControllerOptions,
    prev_plan: Option<Trajectory>,
    /// Last executed plan that passed the enforced set, with the step it was
    /// executed at. The fallback rolls this route forward; unlike
    /// `prev_plan` it is never an unrepaired plan.
    last_certified: Option<(Trajectory, i64)>,
    t: i64,
}

impl Controller {
    pub fn new(
        ckpt: &Checkpoint,
        constraints_raw: &StageConstraintSet,
        nominal: &NominalDynamics,
        opts: ControllerOptions,
    ) -> Result<Self> {
        ckpt.validate()?;
        if constraints_raw.rows() != ckpt.rows {
            return Err(Error::ShapeMismatch(format!(
                "constraint set covers {} steps, model plans {}",
                constraints_raw.rows(),
                ckpt.rows
            )));
        }
        constraints_raw.validate(ckpt.d_s)?;
        if constraints_raw.d_a() != ckpt.d_a {
            return Err(Error::ShapeMismatch("action box dim differs from model".into()));
        }
        if nominal.d_s != ckpt.d_s || nominal.d_a != ckpt.d_a {
            return Err(Error::ShapeMismatch("dynamics dims differ from model".into()));
        }
        if opts.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !opts.lambda.is_finite() || opts.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be finite and >= 0".into()));
        }
        if !opts.model_time_scale.is_finite() || opts.model_time_scale <= 0.0 {
            return Err(Error::InvalidArgument("model_time_scale must be positive".into()));
        }
        if !opts.margin.is_finite() || opts.margin < 0.0 {
            return Err(Error::InvalidArgument("margin must be finite and >= 0".into()));
        }

        let normalized = ckpt.normalizer.normalize_constraints(constraints_raw)?;
        let set =
            if opts.margin > 0.0 { tighten(&normalized, opts.margin)? } else { normalized };

        let projector = if opts.method.uses_projector() {
            let affine = nominal.to_affine(Some(&ckpt.normalizer), opts.model_time_scale);
            let spec = FeasibleSetSpec::new(set.clone(), affine)?;
            Some(ModelBasedProjector::with_options(spec, opts.sqp)?)
        } else {
            None
        };

        Ok(Self {
            net: ckpt.net.clone(),
            sched: ckpt.schedule.clone(),
            normalizer: ckpt.normalizer.clone(),
            rows: ckpt.rows,
            d_s: ckpt.d_s,
            d_a: ckpt.d_a,
            set,
            projector,
            raw_action_lower: constraints_raw.action_lower.clone(),
            raw_action_upper: constraints_raw.action_upper.clone(),
            opts,
            prev_plan: None,
            last_certified: None,
            t: 0,
        })
    }

    pub fn method(&self) -> Method {
        self.opts.method
    }

    pub fn step_index(&self) -> i64 {
        self.t
    }

    /// The normalized constraint set the controller enforces (tightened
    /// when a margin is active).
    pub fn enforced_set(&self) -> &StageConstraintSet {
        &self.set
    }

    /// Forget the previous plan and restart the step counter, optionally
    /// under a new seed. The model and constraints are kept.
    pub fn reset(&mut self, seed: u64) {
        self.opts.seed = seed;
        self.prev_plan = None;
        self.last_certified = None;
        self.t = 0;
    }

    /// Worst violation of a normalized plan against the enforced set,
    /// skipping the measured first state.
    fn plan_violation(&self, tau: &Trajectory) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..tau.rows() {
            worst = worst.max(self.set.stage_violation(i, &tau.state_row(i)));
        }
        for r in 0..tau.rows() {
            worst = worst.max(self.set.action_violation(&tau.action_row(r)));
        }
        worst
    }

    fn sample_candidate(
        &self,
        s_norm: &DVector<f64>,
        chain_seed: u64,
        diag: &mut StepDiagnostics,
    ) -> Result<Trajectory> {
        let mut chain_rng = rng::stream(chain_seed);
        let (rows, d_s, d_a) = (self.rows, self.d_s, self.d_a);
        match self.opts.method {
            Method::Diffuser => sample_chain(
                &self.net, &self.sched, rows, d_s, d_a, s_norm, self.t, &mut chain_rng,
                &mut NoHook,
            ),
            Method::Guidance => {
                let mut hook = GuidanceHook::new(&self.set, &self.sched, self.opts.lambda);
                sample_chain(
                    &self.net, &self.sched, rows, d_s, d_a, s_norm, self.t, &mut chain_rng,
                    &mut hook,
                )
            }
            Method::ModelFree => {
                let mut hook = PointwiseHook::new(&self.set);
                let tau = sample_chain(
                    &self.net, &self.sched, rows, d_s, d_a, s_norm, self.t, &mut chain_rng,
                    &mut hook,
                )?;
                diag.projection_calls += hook.calls;
                Ok(tau)
            }
            Method::PostProcessing => {
                let tau = sample_chain(
                    &self.net, &self.sched, rows, d_s, d_a, s_norm, self.t, &mut chain_rng,
                    &mut NoHook,
                )?;
                let projector = self.projector.as_ref().expect("projector built for this method");
                diag.projection_calls += 1;
                match projector.project(&tau) {
                    Ok(res) if res.converged => Ok(res.trajectory),
                    Ok(res) => {
                        diag.nonconverged += 1;
                        Ok(project_pointwise(&res.trajectory, &self.set)?)
                    }
                    Err(_) => {
                        diag.nonconverged += 1;
                        Ok(project_pointwise(&tau, &self.set)?)
                    }
                }
            }
            Method::DpccR | Method::DpccT | Method::DpccC => {
                let projector = self.projector.as_ref().expect("projector built for this method");
                let mut hook = ProjectHook::new(projector);
                let tau = sample_chain(
                    &self.net, &self.sched, rows, d_s, d_a, s_norm, self.t, &mut chain_rng,
                    &mut hook,
                )?;
                diag.candidate_costs.push(hook.cumulative_cost);
                diag.projection_calls += hook.calls;
                diag.nonconverged += hook.nonconverged;
                Ok(tau)
            }
        }
    }

    /// The last certified plan advanced to the current step and re-anchored
    /// on the measured state: its actions shift forward by the plan's age,
    /// vacated rows get the in-box action closest to standing still, and the
    /// states re-roll through the planner's model from the measurement.
    /// Re-anchoring every step keeps the feasibility check downstream honest
    /// against the state the plant actually reached.
    fn rolled_fallback(&self, s_norm: &DVector<f64>) -> Option<Trajectory> {
        let (cert, t0) = self.last_certified.as_ref()?;
        let dyn_ = &self.projector.as_ref()?.spec().dynamics;
        let age = usize::try_from(self.t - t0).ok()?;
        let rows = self.rows;
        let idle = self.normalizer.normalize_action(&DVector::zeros(self.d_a));
        let mut actions = DMatrix::zeros(rows, self.d_a);
        for r in 0..rows {
            for d in 0..self.d_a {
                actions[(r, d)] = match r.checked_add(age) {
                    Some(src) if src < rows => cert.actions[(src, d)],
                    _ => idle[d].clamp(self.set.action_lower[d], self.set.action_upper[d]),
                };
            }
        }
        let mut states = DMatrix::zeros(rows, self.d_s);
        states.row_mut(0).copy_from(&s_norm.transpose());
        for i in 1..rows {
            let s_prev = states.row(i - 1).transpose();
            let a_prev = actions.row(i - 1).transpose();
            let s_next = &dyn_.b * a_prev + s_prev + &dyn_.offset;
            states.row_mut(i).copy_from(&s_next.transpose());
        }
        Trajectory::new(states, actions, cert.origin_time + age as i64).ok()
    }

    /// Squared distance between a fresh candidate and the previous plan
    /// advanced by one step: candidate row i against previous row i + 1.
    fn shifted_sq_distance(cand: &Trajectory, prev: &Trajectory) -> f64 {
        let mut acc = 0.0;
        for i in 0..cand.rows() - 1 {
            acc += (cand.state_row(i) - prev.state_row(i + 1)).norm_squared();
            acc += (cand.action_row(i) - prev.action_row(i + 1)).norm_squared();
        }
        acc
    }

    fn select(&self, candidates: &[Trajectory], costs: &[f64], viols: &[f64]) -> usize {
        // Methods that repair their candidates pick among the repaired ones.
        // A candidate whose projection failed to converge is damage, not a
        // choice; it is executed only when the whole batch failed, and then
        // the least violating plan wins no matter the method.
        let pool: Vec<usize> = if self.opts.method.uses_projector() {
            let tol = self.opts.sqp.feas_tol.max(1e-9);
            let ok: Vec<usize> = (0..candidates.len()).filter(|&i| viols[i] <= tol).collect();
            if ok.is_empty() {
                let mut best = 0;
                for i in 1..viols.len() {
                    if viols[i] < viols[best] {
                        best = i;
                    }
                }
                return best;
            }
            ok
        } else {
            (0..candidates.len()).collect()
        };
        let random_pick = |n: usize| -> usize {
            let mut r = rng::substream(rng::mix(&[self.opts.seed, self.t as u64]), "select", 0);
            use rand::Rng;
            r.gen_range(0..n)
        };
        match self.opts.method {
            Method::DpccC => {
                let mut best = pool[0];
                for &i in &pool {
                    if costs[i] < costs[best] {
                        best = i;
                    }
                }
                best
            }
            Method::DpccT => match &self.prev_plan {
                None => pool[random_pick(pool.len())],
                Some(prev) => {
                    let mut best = pool[0];
                    let mut best_d = f64::INFINITY;
                    for &i in &pool {
                        let d = Self::shifted_sq_distance(&candidates[i], prev);
                        if d < best_d {
                            best = i;
                            best_d = d;
                        }
                    }
                    best
                }
            },
            _ => pool[random_pick(pool.len())],
        }
    }

    /// One receding-horizon step: condition on the measured state, draw and
    /// (per method) repair a batch of plans, pick one, return its first
    /// action in plant units together with diagnostics.
    pub fn control_step(&mut self, s_raw: &DVector<f64>) -> Result<(DVector<f64>, StepDiagnostics)> {
        let started = Instant::now();
        if s_raw.len() != self.d_s {
            return Err(Error::ShapeMismatch(format!(
                "measured state has dim {}, model expects {}",
                s_raw.len(),
                self.d_s
            )));
        }
        if !s_raw.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("measured state is not finite".into()));
        }
        let s_norm = self.normalizer.normalize_state(s_raw);

        let mut diag = StepDiagnostics {
            t: self.t,
            chosen: 0,
            candidate_costs: Vec::new(),
            candidate_violations: Vec::with_capacity(self.opts.batch),
            projection_calls: 0,
            nonconverged: 0,
            plan_violation: 0.0,
            fallback_plan: false,
            elapsed_ms: 0.0,
        };

        let mut candidates = Vec::with_capacity(self.opts.batch);
        for b in 0..self.opts.batch {
            let chain_seed = rng::mix(&[self.opts.seed, self.t as u64, b as u64]);
            let tau = self.sample_candidate(&s_norm, chain_seed, &mut diag)?;
            diag.candidate_violations.push(self.plan_violation(&tau));
            candidates.push(tau);
        }

        let chosen = self.select(&candidates, &diag.candidate_costs, &diag.candidate_violations);
        diag.chosen = chosen;
        diag.plan_violation = diag.candidate_violations[chosen];

        let mut plan = candidates.swap_remove(chosen);
        if self.opts.method.uses_projector()
            && diag.plan_violation > self.opts.sqp.feas_tol.max(1e-9)
        {
            // Every repair in the batch failed. The previous plan advanced
            // one step still tracks a route that was certified a step ago;
            // after the plant's deviation it sits near the enforced set
            // rather than in it, so it gets one projection of its own. That
            // is a small-perturbation solve along a route that already
            // worked, which is exactly where the projector is reliable.
            if let Some(fb) = self.rolled_fallback(&s_norm) {
                let tol = self.opts.sqp.feas_tol.max(1e-9);
                let v = self.plan_violation(&fb);
                if v <= tol {
                    plan = fb;
                    diag.plan_violation = v;
                    diag.fallback_plan = true;
                } else if let Some(proj) = self.projector.as_ref() {
                    diag.projection_calls += 1;
                    match proj.project(&fb) {
                        Ok(res) if res.converged => {
                            diag.plan_violation = self.plan_violation(&res.trajectory);
                            plan = res.trajectory;
                            diag.fallback_plan = true;
                        }
                        Ok(res) => {
                            eprintln!("FB t={} rolled_v={:.3e} proj_nc out={:.3e} batch_v={:.3e}", self.t, v, res.max_violation, diag.candidate_violations.iter().cloned().fold(f64::INFINITY, f64::min));
                            diag.nonconverged += 1;
                        }
                        Err(e) => {
                            eprintln!("FB t={} rolled_v={:.3e} proj_err {e}", self.t, v);
                            diag.nonconverged += 1;
                        }
                    }
                }
            } else {
                eprintln!("FB t={} no prev plan", self.t);
            }
        }
        let a_norm = plan.action_row(0);
        let mut action = self.normalizer.denormalize_action(&a_norm);
        for i in 0..action.len() {
            action[i] = action[i].clamp(self.raw_action_lower[i], self.raw_action_upper[i]);
        }
        if !action.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("controller produced non-finite action".into()));
        }

        if self.opts.method.uses_projector()
            && diag.plan_violation <= self.opts.sqp.feas_tol.max(1e-9)
        {
            self.last_certified = Some((plan.clone(), self.t));
        }
        self.prev_plan = Some(plan);
        self.t += 1;
        diag.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok((action, diag))
    }
}
