//! Command-line bench for the trajectory-diffusion control stack. One TOML
//! config drives everything; subcommands cover the pipeline in order:
//! demo-gen, train (once per seed), then rollout / eval / ablate.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dpcc::controller::Method;
use dpcc::dataset::Dataset;
use dpcc::diffusion::{train, Checkpoint};
use dpcc::env::{generate_demos, novel_constraint_suites};
use dpcc::harness::{
    ablate_model_mismatch, checkpoint_path, demos_path, evaluate, resolve_margin, run_episode,
    AggregateRow, EpisodeOptions, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "dpcc", version, about = "Trajectory diffusion with constraint-projected control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Working directory holding demos, checkpoints, and outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the demonstration corpus into <out>/demos.jsonl.
    DemoGen {
        #[command(flatten)]
        common: Common,
        /// Override the corpus seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write <out>/ckpt-seed<N>.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed; run once per configured train seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a single episode and print a JSON summary line.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dpcc-c", value_parser = Method::from_str)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Constraint suite index.
        #[arg(long, default_value_t = 0)]
        suite: usize,
        /// Checkpoint to drive; defaults to the first configured train seed.
        #[arg(long)]
        train_seed: Option<u64>,
        /// Run with a zero constraint margin.
        #[arg(long)]
        no_tightening: bool,
    },
    /// Run the configured method grid; writes metrics.csv, episodes.jsonl,
    /// plot.json into <out>.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to these methods (repeatable).
        #[arg(long = "method", value_parser = Method::from_str)]
        methods: Vec<Method>,
        /// Run the grid with a zero constraint margin.
        #[arg(long)]
        no_tightening: bool,
    },
    /// Sweep the planner's assumed step length; writes ablation.csv and
    /// friends into <out>.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_rows(rows: &[AggregateRow]) {
    for r in rows {
        println!(
            "{:16} tightening={:3} mismatch={:<5.2} goal={:.2} cg={:.2} steps={:.1} viol={:.2}",
            r.method, r.tightening, r.mismatch, r.goal_rate, r.cg_rate, r.timesteps_mean, r.viol_mean
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::DemoGen { common, seed } => {
            let cfg = load_config(&common)?;
            let seed = seed.unwrap_or(cfg.demo_seed);
            let demos = generate_demos(&cfg.env, cfg.demo_count, seed)?;
            std::fs::create_dir_all(&common.out)
                .with_context(|| format!("creating {}", common.out.display()))?;
            let path = demos_path(&common.out);
            demos.save_jsonl(&path)?;
            println!(
                "wrote {} demonstrations ({} routes, seed {}) to {}",
                demos.len(),
                cfg.env.route_count(),
                seed,
                path.display()
            );
        }
        Cmd::Train { common, seed } => {
            let cfg = load_config(&common)?;
            let demos = Dataset::load_jsonl(&demos_path(&common.out))?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let ckpt = train(&demos, &tc)?;
            let path = checkpoint_path(&common.out, seed);
            ckpt.save(&path)?;
            println!(
                "seed {}: validation loss {:.4} -> {:.4} (best at step {}), saved {}",
                seed,
                ckpt.initial_val_loss,
                ckpt.best_val_loss,
                ckpt.best_val_step,
                path.display()
            );
        }
        Cmd::Rollout { common, method, seed, suite, train_seed, no_tightening } => {
            let cfg = load_config(&common)?;
            let demos = Dataset::load_jsonl(&demos_path(&common.out))?;
            let train_seed = train_seed.unwrap_or(cfg.train_seeds[0]);
            let ckpt = Checkpoint::load(&checkpoint_path(&common.out, train_seed))?;
            let suites = novel_constraint_suites(&cfg.env, &demos, ckpt.rows)?;
            if suite >= suites.len() {
                bail!("suite {suite} out of range (have {})", suites.len());
            }
            let margin = if no_tightening || !method.handles_constraints() {
                0.0
            } else {
                resolve_margin(&cfg, &ckpt)?
            };
            let mut opts = EpisodeOptions::new(method, seed);
            opts.margin = margin;
            opts.batch = cfg.batch;
            opts.lambda = cfg.lambda;
            opts.train_seed = train_seed;
            opts.suite_index = suite;
            let rec = run_episode(&ckpt, &cfg.env, &suites[suite], &opts)?;
            let summary = json!({
                "method": rec.method.as_str(),
                "suite": rec.suite,
                "seed": rec.seed,
                "margin": margin,
                "goal": rec.goal,
                "constraints_and_goal": rec.constraints_and_goal,
                "timesteps": rec.timesteps,
                "violation_steps": rec.violation_steps,
                "max_violation": rec.max_violation,
                "nonconverged_calls": rec.nonconverged_calls,
                "mean_step_ms": rec.mean_step_ms,
            });
            println!("{summary}");
        }
        Cmd::Eval { common, methods, no_tightening } => {
            let mut cfg = load_config(&common)?;
            if !methods.is_empty() {
                cfg.methods = methods;
            }
            if no_tightening {
                cfg.tightening = false;
            }
            let report = evaluate(&cfg, &common.out, &common.out)?;
            println!(
                "margin {:.4}, {} episodes -> {}",
                report.margin,
                report.episodes.len(),
                common.out.join("metrics.csv").display()
            );
            print_rows(&report.rows);
        }
        Cmd::Ablate { common } => {
            let cfg = load_config(&common)?;
            let report = ablate_model_mismatch(&cfg, &common.out, &common.out)?;
            println!(
                "margin {:.4}, {} episodes -> {}",
                report.margin,
                report.episodes.len(),
                common.out.join("ablation.csv").display()
            );
            print_rows(&report.rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit 2 via clap; everything else is one line on stderr
    // and exit 1.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
