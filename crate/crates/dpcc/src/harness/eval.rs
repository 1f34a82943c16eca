//! Experiment grids over methods, seeds, and constraint suites, with
//! deterministic outputs: a metrics CSV, a plot-data JSON, and per-episode
//! JSONL. Episodes run concurrently but are merged in grid order (method,
//! then train seed, test seed, suite), so reruns write identical bytes.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::StageConstraintSet;
use crate::controller::Method;
use crate::dataset::Dataset;
use crate::diffusion::Checkpoint;
use crate::dynamics::NominalDynamics;
use crate::env::{self, EnvConfig};
use crate::harness::config::{checkpoint_path, demos_path, ExperimentConfig};
use crate::harness::episode::{run_episode, EpisodeOptions, EpisodeRecord, PlantMode};
use crate::rng;
use crate::{Error, Result};

pub const METRICS_COLUMNS: [&str; 9] = [
    "method",
    "tightening",
    "mismatch",
    "timesteps_mean",
    "timesteps_std",
    "goal_rate",
    "cg_rate",
    "viol_mean",
    "viol_std",
];

/// One metrics row: every episode sharing (method, tightening, mismatch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    /// "on", "off", or "na" for methods that ignore constraints entirely.
    pub tightening: String,
    pub mismatch: f64,
    /// Mean/std with failed episodes counted at the step cap.
    pub timesteps_mean: f64,
    pub timesteps_std: f64,
    pub goal_rate: f64,
    pub cg_rate: f64,
    pub viol_mean: f64,
    pub viol_std: f64,
    /// Mean over goal-reaching episodes only; falls back to the capped
    /// mean when nothing succeeded.
    pub timesteps_mean_success: f64,
    pub episodes: usize,
}

#[derive(Debug)]
pub struct EvalReport {
    pub margin: f64,
    pub rows: Vec<AggregateRow>,
    pub episodes: Vec<EpisodeRecord>,
}

/// The tightening margin an experiment runs with: the configured value if
/// fixed, otherwise estimated from fresh expert rollouts (seeded apart
/// from the training corpus) against the planner model.
pub fn resolve_margin(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<f64> {
    if let Some(m) = cfg.margin {
        return Ok(m);
    }
    let routes = cfg.env.route_count();
    let n = cfg.gamma_rollouts.div_ceil(routes).max(1) * routes;
    let probe = env::generate_demos(&cfg.env, n, rng::mix(&[cfg.demo_seed, 1]))?;
    let traces: Vec<(DMatrix<f64>, DMatrix<f64>)> =
        probe.demos.iter().map(|d| (d.states.clone(), d.actions.clone())).collect();
    let nominal = NominalDynamics::new(ckpt.d_s, ckpt.d_a, cfg.env.t_s)?;
    env::estimate_gamma(&traces, &nominal, &ckpt.normalizer, cfg.gamma_safety)
}

fn load_checkpoints(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Vec<(u64, Checkpoint)>> {
    let mut out = Vec::with_capacity(cfg.train_seeds.len());
    for &seed in &cfg.train_seeds {
        let path = checkpoint_path(data_dir, seed);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no checkpoint for train seed {seed} (expected {})",
                path.display()
            )));
        }
        out.push((seed, Checkpoint::load(&path)?));
    }
    let first = &out[0].1;
    let (rows, d_s, d_a) = (first.rows, first.d_s, first.d_a);
    if out.iter().any(|(_, c)| c.rows != rows || c.d_s != d_s || c.d_a != d_a) {
        return Err(Error::Config("checkpoints disagree on planning shape".into()));
    }
    Ok(out)
}

struct Job {
    ckpt: usize,
    suite: usize,
    opts: EpisodeOptions,
}

fn run_jobs(
    env_cfg: &EnvConfig,
    ckpts: &[(u64, Checkpoint)],
    suites: &[StageConstraintSet],
    jobs: Vec<Job>,
) -> Result<Vec<EpisodeRecord>> {
    jobs.into_par_iter()
        .map(|j| run_episode(&ckpts[j.ckpt].1, env_cfg, &suites[j.suite], &j.opts))
        .collect()
}

fn episode_options(cfg: &ExperimentConfig, method: Method, margin: f64) -> EpisodeOptions {
    let mut o = EpisodeOptions::new(method, 0);
    o.margin = margin;
    o.batch = cfg.batch;
    o.lambda = cfg.lambda;
    o.plant = PlantMode::Servo;
    o
}

/// Every (checkpoint, test seed, suite) episode for one method arm. The
/// episode seed depends only on (test seed, suite), so different methods
/// and models face the same starts and noise.
fn push_arm(
    jobs: &mut Vec<Job>,
    cfg: &ExperimentConfig,
    ckpts: &[(u64, Checkpoint)],
    n_suites: usize,
    proto: &EpisodeOptions,
) {
    for (ci, (train_seed, _)) in ckpts.iter().enumerate() {
        for &test in &cfg.test_seeds {
            for si in 0..n_suites {
                let mut o = proto.clone();
                o.seed = rng::mix(&[test, si as u64]);
                o.train_seed = *train_seed;
                o.test_seed = test;
                o.suite_index = si;
                jobs.push(Job { ckpt: ci, suite: si, opts: o });
            }
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn tightening_label(e: &EpisodeRecord) -> &'static str {
    if !e.method.handles_constraints() {
        "na"
    } else if e.tightening {
        "on"
    } else {
        "off"
    }
}

/// Groups episodes by (method, tightening, mismatch) in first-seen order.
fn aggregate(episodes: &[EpisodeRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, &'static str, f64)> = Vec::new();
    let mut groups: Vec<Vec<&EpisodeRecord>> = Vec::new();
    for e in episodes {
        let key = (e.method, tightening_label(e), e.mismatch);
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(e),
            None => {
                keys.push(key);
                groups.push(vec![e]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((method, label, mismatch), g)| {
            let steps: Vec<f64> = g.iter().map(|e| e.timesteps as f64).collect();
            let viols: Vec<f64> = g.iter().map(|e| e.violation_steps as f64).collect();
            let (timesteps_mean, timesteps_std) = mean_std(&steps);
            let (viol_mean, viol_std) = mean_std(&viols);
            let succ: Vec<f64> =
                g.iter().filter(|e| e.goal).map(|e| e.timesteps as f64).collect();
            let timesteps_mean_success =
                if succ.is_empty() { timesteps_mean } else { mean_std(&succ).0 };
            AggregateRow {
                method: method.as_str().to_string(),
                tightening: label.to_string(),
                mismatch,
                timesteps_mean,
                timesteps_std,
                goal_rate: g.iter().filter(|e| e.goal).count() as f64 / g.len() as f64,
                cg_rate: g.iter().filter(|e| e.constraints_and_goal).count() as f64
                    / g.len() as f64,
                viol_mean,
                viol_std,
                timesteps_mean_success,
                episodes: g.len(),
            }
        })
        .collect()
}

fn write_metrics_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("csv: {e}")))?;
    let fail = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(METRICS_COLUMNS).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.method.as_str(),
            r.tightening.as_str(),
            &format!("{:.2}", r.mismatch),
            &format!("{:.4}", r.timesteps_mean),
            &format!("{:.4}", r.timesteps_std),
            &format!("{:.4}", r.goal_rate),
            &format!("{:.4}", r.cg_rate),
            &format!("{:.4}", r.viol_mean),
            &format!("{:.4}", r.viol_std),
        ])
        .map_err(fail)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PlotData<'a> {
    margin: f64,
    rows: &'a [AggregateRow],
}

fn write_outputs(
    out_dir: &Path,
    names: (&str, &str, &str),
    margin: f64,
    rows: &[AggregateRow],
    episodes: &[EpisodeRecord],
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join(names.0), rows)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(names.1))?);
    for e in episodes {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    let mut p = std::io::BufWriter::new(std::fs::File::create(out_dir.join(names.2))?);
    serde_json::to_writer_pretty(&mut p, &PlotData { margin, rows })?;
    p.write_all(b"\n")?;
    p.flush()?;
    Ok(())
}

/// Runs the configured method grid on the lagged-servo plant at matched
/// model time, one tightening arm per call, and writes `metrics.csv`,
/// `episodes.jsonl`, and `plot.json` under `out_dir`. Rows come out in
/// config method order. An empty method list yields a header-only table.
pub fn evaluate(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let demos = Dataset::load_jsonl(&demos_path(data_dir))?;
    let ckpts = load_checkpoints(cfg, data_dir)?;
    let margin = resolve_margin(cfg, &ckpts[0].1)?;
    let suites = env::novel_constraint_suites(&cfg.env, &demos, ckpts[0].1.rows)?;

    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        let arm_margin =
            if method.handles_constraints() && cfg.tightening { margin } else { 0.0 };
        let proto = episode_options(cfg, method, arm_margin);
        push_arm(&mut jobs, cfg, &ckpts, suites.len(), &proto);
    }
    let episodes = run_jobs(&cfg.env, &ckpts, &suites, jobs)?;
    let rows = aggregate(&episodes);
    write_outputs(out_dir, ("metrics.csv", "episodes.jsonl", "plot.json"), margin, &rows, &episodes)?;
    Ok(EvalReport { margin, rows, episodes })
}

/// Sweeps the planner's assumed step length over the configured factors
/// (the plant is untouched) with the selection-by-cost method, tightening
/// active. The factor-1 row reproduces the main grid's row exactly.
/// Writes `ablation.csv`, `ablation-episodes.jsonl`, `ablation-plot.json`.
pub fn ablate_model_mismatch(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let demos = Dataset::load_jsonl(&demos_path(data_dir))?;
    let ckpts = load_checkpoints(cfg, data_dir)?;
    let margin = resolve_margin(cfg, &ckpts[0].1)?;
    let suites = env::novel_constraint_suites(&cfg.env, &demos, ckpts[0].1.rows)?;

    let mut jobs = Vec::new();
    for &factor in &cfg.mismatch_factors {
        let mut proto = episode_options(cfg, Method::DpccC, margin);
        proto.mismatch_factor = factor;
        push_arm(&mut jobs, cfg, &ckpts, suites.len(), &proto);
    }
    let episodes = run_jobs(&cfg.env, &ckpts, &suites, jobs)?;
    let rows = aggregate(&episodes);
    write_outputs(
        out_dir,
        ("ablation.csv", "ablation-episodes.jsonl", "ablation-plot.json"),
        margin,
        &rows,
        &episodes,
    )?;
    Ok(EvalReport { margin, rows, episodes })
}
