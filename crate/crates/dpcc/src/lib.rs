//! Trajectory diffusion with constraint-projected receding-horizon control.
//!
//! A denoising diffusion model is trained on multimodal point-mass
//! demonstrations; at control time every denoising step is followed by a
//! model-based projection onto tightened constraint sets, which keeps the
//! executed plan dynamically consistent and robust to bounded model mismatch.
//!
//! Layout:
//! - [`traj`], [`schedule`], [`dynamics`], [`normalize`], [`constraint`]:
//!   shared data types and the closed-form pieces built on them.
//! - [`diffusion`]: denoiser network, training loop, sampling.
//! - [`projection`]: constraint tightening and the trajectory projections.
//! - [`controller`]: receding-horizon control step and its baselines.
//! - [`env`]: point-mass plant, scripted expert, constraint suites.
//! - [`harness`]: episode runner, experiment grids, metrics output.

pub mod constraint;
pub mod controller;
pub mod dataset;
pub mod diffusion;
pub mod dynamics;
pub mod env;
pub mod harness;
pub mod normalize;
pub mod projection;
pub mod rng;
pub mod schedule;
pub mod traj;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Shapes of two values that must agree did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training diverged or could not finish.
    #[error("training failure at step {step}: {detail}")]
    TrainingFailure { step: usize, detail: String },
    /// A constraint set eroded to nothing.
    #[error("empty constraint set: {0}")]
    EmptySet(String),
    /// The feasible set of a projection instance is empty.
    #[error("infeasible projection: {0}")]
    Infeasible(String),
    /// A configuration file or value is unusable.
    #[error("configuration error: {0}")]
    Config(String),
    /// A required file is absent; the path names the missing file.
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    /// Checkpoint schema version mismatch.
    #[error("unsupported checkpoint schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
