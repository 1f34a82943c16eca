//! Closed-loop experiments: single episodes, grids of them, and the
//! derived tables and logs. Outputs are deterministic functions of the
//! config and the files it names; reruns write byte-identical files.

pub mod config;
pub mod episode;
pub mod eval;

pub use config::{checkpoint_path, demos_path, ExperimentConfig};
pub use episode::{run_episode, EpisodeOptions, EpisodeRecord, PlantMode, VIOLATION_TOL};
pub use eval::{
    ablate_model_mismatch, evaluate, resolve_margin, AggregateRow, EvalReport, METRICS_COLUMNS,
};
